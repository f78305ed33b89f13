#include "oaf/safm.hpp"

namespace oaf::safm {

Tensor embed_center(const Tensor& x, const StageParams& p) {
    if (x.ndim() != 3)
        throw DimError("embed_center: expected [C,H,W], got " + shape_str(x.shape()));
    if (x.dim(0) != p.center_w.dim(1))
        throw DimError("embed_center: input channels " + std::to_string(x.dim(0)) +
                       " do not match stage config " + std::to_string(p.center_w.dim(1)));
    Tensor x4 = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    Tensor y = conv2d(x4, p.center_w, p.center_b, p.center_stride, p.center_pad);
    return reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
}

Tensor embed_sai(const Tensor& x, const StageParams& p) {
    if (x.ndim() != 3)
        throw DimError("embed_sai: expected [3,H,W], got " + shape_str(x.shape()));
    if (x.dim(0) != p.sai_w.dim(1))
        throw DimError("embed_sai: input channels " + std::to_string(x.dim(0)) +
                       " do not match shared stem " + std::to_string(p.sai_w.dim(1)));
    Tensor x4 = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    Tensor y = conv2d(x4, p.sai_w, p.sai_b, p.sai_stride, p.sai_pad);
    return reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
}

Tensor pixel_score(const Tensor& center_feat, const Tensor& sai_feat) {
    if (!shape_eq(center_feat.shape(), sai_feat.shape()))
        throw DimError("pixel_score: shape mismatch " + shape_str(center_feat.shape()) + " vs " +
                       shape_str(sai_feat.shape()));
    return abs_val(sub(center_feat, sai_feat));
}

namespace {
thread_local NormalizerTrace* g_norm_trace = nullptr;
thread_local bool g_norm_replay = false;
} // namespace

void set_normalizer_trace(NormalizerTrace* trace, bool replay) {
    g_norm_trace = trace;
    g_norm_replay = replay;
    if (trace) trace->rewind();
}

Tensor mask_score(const Tensor& e, double eps, bool trust) {
    if (!e.is_shell())
        for (double v : e.values())
            if (v < 0) throw NumericError("mask_score: negative pixel score");
    Tensor mx = max_all_detached(e);
    double normalizer = e.is_shell() ? 0.0 : mx.item();
    if (g_norm_trace && !e.is_shell()) {
        if (g_norm_replay) {
            if (g_norm_trace->next >= g_norm_trace->values.size())
                throw UsageError("normalizer trace replay ran past the recorded forward");
            normalizer = g_norm_trace->values[g_norm_trace->next++];
        } else {
            g_norm_trace->values.push_back(normalizer);
        }
    }
    const double inv = e.is_shell() ? 1.0 : 1.0 / (normalizer + eps);
    Tensor scaled = mul_scalar(e, trust ? -inv : inv); // -e/(max+eps) or +e/(max+eps)
    Tensor theta = clamp01(add_scalar(scaled, trust ? 1.0 : 0.0));
    return square(theta);
}

Tensor aggregate_angular(const Tensor& center_feat, const std::vector<Tensor>& sai_feats,
                         const std::vector<Tensor>& scores) {
    if (sai_feats.size() != scores.size())
        throw DimError("aggregate_angular: " + std::to_string(sai_feats.size()) + " features vs " +
                       std::to_string(scores.size()) + " scores");
    Tensor acc = center_feat;
    for (size_t i = 0; i < sai_feats.size(); ++i) {
        if (!shape_eq(sai_feats[i].shape(), center_feat.shape()))
            throw DimError("aggregate_angular: view feature " + shape_str(sai_feats[i].shape()) +
                           " does not match center " + shape_str(center_feat.shape()));
        acc = add(acc, mul(scores[i], sai_feats[i]));
    }
    return acc;
}

std::pair<Tensor, Tensor> safm_forward(const Tensor& center_input,
                                       const std::vector<Tensor>& sais, const StageParams& p,
                                       const Tensor& center_raw) {
    Tensor f_spl = embed_center(center_input, p);
    Tensor score_ref = f_spl;
    if (!p.compare_deep && !sais.empty()) {
        if (!center_raw.defined())
            throw ConfigError("safm_forward: compare=stem needs the raw center image");
        score_ref = embed_sai(center_raw, p);
    }
    std::vector<Tensor> embedded;
    std::vector<Tensor> scores;
    embedded.reserve(sais.size());
    scores.reserve(sais.size());
    for (const auto& sai : sais) {
        Tensor emb = embed_sai(sai, p);
        if (!shape_eq(emb.shape(), f_spl.shape()))
            throw DimError("safm_forward: SAI embedding " + shape_str(emb.shape()) +
                           " does not match center feature " + shape_str(f_spl.shape()));
        Tensor e = pixel_score(score_ref, emb);
        scores.push_back(mask_score(e, p.eps, p.theta_trust));
        embedded.push_back(std::move(emb));
    }
    Tensor f_agl = aggregate_angular(f_spl, embedded, scores);
    return {f_spl, f_agl};
}

} // namespace oaf::safm
