#pragma once

#include <utility>
#include <vector>

#include "oaf/tensor.hpp"

namespace oaf::safm {

// One stage of the fusion module: a per-stage center stem plus a single
// SAI stem shared by every sub-aperture view (parameter count independent of
// the number of views).
struct StageParams {
    Tensor center_w, center_b;
    int center_stride = 4, center_pad = 3;
    Tensor sai_w, sai_b;
    int sai_stride = 4, sai_pad = 3;
    double eps = 1e-6;
    bool theta_trust = true;  // trust: e == 0 maps to weight 1
    bool compare_deep = true; // score against the stage center feature, not the raw-center stem
};

// strided embedding of the center path to the stage resolution/channels
Tensor embed_center(const Tensor& x, const StageParams& p);

// shared-weight embedding of one raw sub-aperture image
Tensor embed_sai(const Tensor& x, const StageParams& p);

// elementwise |center - sai|
Tensor pixel_score(const Tensor& center_feat, const Tensor& sai_feat);

// clamp(1 - e/(max(e)+eps), 0, 1)^2 with the max taken over the whole view
// map and treated as a constant; "novelty" inverts the direction
Tensor mask_score(const Tensor& e, double eps = 1e-6, bool trust = true);

// The max normalizer is a detached statistic, so finite-difference checks of
// the defined gradient must hold it fixed. A trace records the normalizers of
// one reference forward; in replay mode mask_score consumes them in call
// order instead of recomputing.
struct NormalizerTrace {
    std::vector<double> values;
    size_t next = 0;
    void rewind() { next = 0; }
};
// trace == nullptr turns the mechanism off
void set_normalizer_trace(NormalizerTrace* trace, bool replay);

// P = center + sum_i score_i * sai_i, summed in list order
Tensor aggregate_angular(const Tensor& center_feat, const std::vector<Tensor>& sai_feats,
                         const std::vector<Tensor>& scores);

// returns (F_spl, F_agl); sais must already be in the fixed deterministic
// order (the encoder sorts by view coordinate). center_raw is only consulted
// when compare_deep is off: scores are then taken against the SAI stem
// applied to the raw center image.
std::pair<Tensor, Tensor> safm_forward(const Tensor& center_input,
                                       const std::vector<Tensor>& sais, const StageParams& p,
                                       const Tensor& center_raw = Tensor());

} // namespace oaf::safm
