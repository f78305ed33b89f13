#pragma once

#include <vector>

#include "oaf/tensor.hpp"

namespace oaf::carm {

// One stage of the rectification module. The Horizontal and Vertical
// Operations run with the same Params object, so weight sharing between the
// two directions is structural.
struct Params {
    Tensor min_w, min_b; // C1 -> C2
    Tensor ln_g, ln_b;   // layer norm over C2
    Tensor q_w, q_b, k_w, k_b, v_w, v_b; // C2 -> C2
    Tensor mlp1_w, mlp1_b, mlp2_w, mlp2_b; // C2 -> C2 -> C2
    Tensor out_w, out_b; // C2 -> C1
    std::vector<Tensor> local_w, local_b; // conv3d stacks, [C1,C1,3,3,3] each
    int heads = 8;
    bool attn_residual = true;     // add the embedded tokens around attention
    bool v_from_normalized = false; // V from normalized tokens instead of raw embedded ones
    bool parallel = false;          // "P" variant: global and local applied side by side, summed
    double lrelu_slope = 0.01;
};

// token attention over one concatenated direction; f_cat is [rows, tokens, C1]
// with an even token count (two features concatenated)
Tensor global_rectification(const Tensor& f_cat, const Params& p);

// {LReLU(conv3d)} x (L-1) then conv3d over the 2-deep feature stack
// [1, C1, 2, H, W]; L == 0 is the identity
Tensor local_rectification(const Tensor& stack, const Params& p);

struct Outputs {
    Tensor spl, agl;     // F^G after both directions
    Tensor h_spl, h_agl; // F^H intermediates after the horizontal direction
};

// inputs and outputs are [C,H,W]
Outputs carm_forward(const Tensor& f_spl, const Tensor& f_agl, const Params& p);

} // namespace oaf::carm
