#include "oaf/carm.hpp"

#include <cmath>

namespace oaf::carm {

namespace {

Tensor linear(const Tensor& tokens, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(tokens, w), b);
}

// [R,T,C2] -> [R,heads,T,D]
Tensor split_heads(const Tensor& t, int heads) {
    const int R = t.dim(0), T = t.dim(1), C = t.dim(2);
    return permute(reshape(t, {R, T, heads, C / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& t) {
    const int R = t.dim(0), H = t.dim(1), T = t.dim(2), D = t.dim(3);
    return reshape(permute(t, {0, 2, 1, 3}), {R, T, H * D});
}

} // namespace

Tensor global_rectification(const Tensor& f_cat, const Params& p) {
    if (f_cat.ndim() != 3)
        throw DimError("global_rectification: expected [rows,tokens,C], got " +
                       shape_str(f_cat.shape()));
    if (f_cat.dim(1) % 2 != 0)
        throw DimError("global_rectification: token count " + std::to_string(f_cat.dim(1)) +
                       " is odd, input is not a two-feature concatenation");
    const int c2 = p.min_w.dim(1);
    if (c2 % p.heads != 0)
        throw ConfigError("global_rectification: embedding dim " + std::to_string(c2) +
                          " not divisible by " + std::to_string(p.heads) + " heads");

    Tensor emb = linear(f_cat, p.min_w, p.min_b);
    Tensor normed = layer_norm(emb, p.ln_g, p.ln_b);
    Tensor q = linear(normed, p.q_w, p.q_b);
    Tensor k = linear(normed, p.k_w, p.k_b);
    Tensor v = linear(p.v_from_normalized ? normed : emb, p.v_w, p.v_b);

    const int head_dim = c2 / p.heads;
    Tensor qh = split_heads(q, p.heads);
    Tensor kh = split_heads(k, p.heads);
    Tensor vh = split_heads(v, p.heads);
    Tensor scores = mul_scalar(matmul(qh, permute(kh, {0, 1, 3, 2})), 1.0 / std::sqrt(double(head_dim)));
    Tensor sim = softmax(scores, 3);
    notify_attention(sim, 3);
    Tensor ctx = merge_heads(matmul(sim, vh));

    Tensor attn_out = p.attn_residual ? add(ctx, emb) : ctx;
    Tensor hidden = gelu(linear(attn_out, p.mlp1_w, p.mlp1_b));
    Tensor mlp_out = linear(hidden, p.mlp2_w, p.mlp2_b);
    return linear(add(mlp_out, attn_out), p.out_w, p.out_b);
}

Tensor local_rectification(const Tensor& stack, const Params& p) {
    if (stack.ndim() != 5)
        throw DimError("local_rectification: expected [1,C,2,H,W], got " + shape_str(stack.shape()));
    if (stack.dim(2) != 2)
        throw DimError("local_rectification: feature-pair axis must have extent 2, got " +
                       std::to_string(stack.dim(2)));
    Tensor x = stack;
    const size_t L = p.local_w.size();
    for (size_t j = 0; j < L; ++j) {
        x = conv3d(x, p.local_w[j], p.local_b[j]);
        if (j + 1 < L) x = leaky_relu(x, p.lrelu_slope);
    }
    return x;
}

namespace {

struct DirectionAxes {
    int cat_axis;            // axis of [C,H,W] the two features are joined on
    std::vector<int> to_tok; // [C,H,W2] or [C,2H,W] -> [rows,tokens,C]
    std::vector<int> to_map; // [rows,tokens(C half),C] -> [C,H,W]
};

std::pair<Tensor, Tensor> rectify_direction(const Tensor& f_spl, const Tensor& f_agl,
                                            const DirectionAxes& ax, const Params& p) {
    Tensor cat = concat({f_spl, f_agl}, ax.cat_axis);
    Tensor tokens = permute(cat, ax.to_tok);
    const int half = tokens.dim(1) / 2;

    auto stack_pair = [&](const Tensor& a, const Tensor& b) {
        Tensor a5 = reshape(a, {1, a.dim(0), 1, a.dim(1), a.dim(2)});
        Tensor b5 = reshape(b, {1, b.dim(0), 1, b.dim(1), b.dim(2)});
        return concat({a5, b5}, 2);
    };
    auto unstack = [&](const Tensor& s) {
        Tensor a = reshape(slice(s, 2, 0, 1), {s.dim(1), s.dim(3), s.dim(4)});
        Tensor b = reshape(slice(s, 2, 1, 1), {s.dim(1), s.dim(3), s.dim(4)});
        return std::make_pair(a, b);
    };

    if (p.parallel) {
        Tensor g = global_rectification(tokens, p);
        Tensor g_spl = permute(slice(g, 1, 0, half), ax.to_map);
        Tensor g_agl = permute(slice(g, 1, half, half), ax.to_map);
        if (p.local_w.empty()) return {g_spl, g_agl};
        auto [l_spl, l_agl] = unstack(local_rectification(stack_pair(f_spl, f_agl), p));
        return {add(g_spl, l_spl), add(g_agl, l_agl)};
    }

    Tensor g = global_rectification(tokens, p);
    Tensor g_spl = permute(slice(g, 1, 0, half), ax.to_map);
    Tensor g_agl = permute(slice(g, 1, half, half), ax.to_map);
    if (p.local_w.empty()) return {g_spl, g_agl};
    Tensor rect = local_rectification(stack_pair(g_spl, g_agl), p);
    return unstack(rect);
}

} // namespace

Outputs carm_forward(const Tensor& f_spl, const Tensor& f_agl, const Params& p) {
    if (!shape_eq(f_spl.shape(), f_agl.shape()) || f_spl.ndim() != 3)
        throw DimError("carm_forward: inputs must both be [C,H,W], got " + shape_str(f_spl.shape()) +
                       " and " + shape_str(f_agl.shape()));
    const DirectionAxes horizontal{2, {1, 2, 0}, {2, 0, 1}};
    const DirectionAxes vertical{1, {2, 1, 0}, {2, 1, 0}};
    auto [h_spl, h_agl] = rectify_direction(f_spl, f_agl, horizontal, p);
    auto [g_spl, g_agl] = rectify_direction(h_spl, h_agl, vertical, p);
    Outputs out;
    out.spl = g_spl;
    out.agl = g_agl;
    out.h_spl = h_spl;
    out.h_agl = h_agl;
    return out;
}

} // namespace oaf::carm
