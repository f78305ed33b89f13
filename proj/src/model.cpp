#include "oaf/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "oaf/rng.hpp"

using nlohmann::json;

namespace oaf::model {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

ModelConfig ModelConfig::preset(const std::string& name, int classes) {
    ModelConfig cfg;
    cfg.classes = classes;
    if (name == "tiny") {
        cfg.stage_channels = {16, 32, 48, 64};
        cfg.blocks_per_stage = {1, 1, 1, 1};
        cfg.attn_reduction = {4, 2, 1, 1};
        cfg.block_heads = {1, 2, 3, 4};
    } else if (name == "mitb4-like") {
        cfg.stage_channels = {64, 128, 320, 512};
        cfg.blocks_per_stage = {3, 8, 27, 3};
    } else {
        throw ConfigError("unknown preset '" + name + "'");
    }
    cfg.validate();
    return cfg;
}

void ModelConfig::validate() const {
    auto need4 = [](const std::vector<int>& v, const char* what) {
        if (v.size() != 4) throw ConfigError(std::string(what) + " must list four stages");
    };
    need4(stage_channels, "stage_channels");
    need4(stage_strides, "stage_strides");
    need4(blocks_per_stage, "blocks_per_stage");
    need4(attn_reduction, "attn_reduction");
    need4(block_heads, "block_heads");
    if (classes < 2) throw ConfigError("classes must be >= 2");
    for (int s = 0; s < 4; ++s) {
        if (stage_channels[size_t(s)] <= 0 || blocks_per_stage[size_t(s)] < 1 ||
            attn_reduction[size_t(s)] < 1 || block_heads[size_t(s)] < 1)
            throw ConfigError("stage extents must be positive");
        if (s > 0) {
            if (stage_channels[size_t(s)] <= stage_channels[size_t(s - 1)])
                throw ConfigError("stage_channels must be strictly increasing");
            if (stage_strides[size_t(s)] <= stage_strides[size_t(s - 1)] ||
                stage_strides[size_t(s)] % stage_strides[size_t(s - 1)] != 0)
                throw ConfigError("stage_strides must be strictly increasing and nested");
        }
        if (stage_channels[size_t(s)] % block_heads[size_t(s)] != 0)
            throw ConfigError("stage channels must divide into block heads");
        if (stage_channels[size_t(s)] * carm.embed_mult % carm.heads != 0)
            throw ConfigError("carm embedding dim must divide into its heads");
    }
    if (ffn_expansion < 1 || decoder_dim < 1 || carm.embed_mult < 1 || carm.local_layers < 0 ||
        carm.heads < 1)
        throw ConfigError("invalid model dimensions");
}

int ModelConfig::size_multiple() const {
    long long q = stage_strides[0];
    for (int s = 0; s < 4; ++s)
        if (attn_reduction[size_t(s)] > 1)
            q = std::lcm(q, (long long)stage_strides[size_t(s)] * attn_reduction[size_t(s)]);
    return int(q);
}

std::string ModelConfig::to_json() const {
    json j;
    j["stage_channels"] = stage_channels;
    j["stage_strides"] = stage_strides;
    j["blocks_per_stage"] = blocks_per_stage;
    j["attn_reduction"] = attn_reduction;
    j["block_heads"] = block_heads;
    j["ffn_expansion"] = ffn_expansion;
    j["decoder_dim"] = decoder_dim;
    j["classes"] = classes;
    j["carm_embed_mult"] = carm.embed_mult;
    j["carm_local_layers"] = carm.local_layers;
    j["carm_heads"] = carm.heads;
    j["carm_attn_residual"] = carm.attn_residual;
    j["carm_v_from_normalized"] = carm.v_from_normalized;
    j["carm_parallel"] = carm.parallel;
    j["safm_theta_trust"] = safm_theta_trust;
    j["safm_compare_deep"] = safm_compare_deep;
    j["pattern"] = pattern;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    ModelConfig cfg;
    try {
        cfg.stage_channels = j.at("stage_channels").get<std::vector<int>>();
        cfg.stage_strides = j.at("stage_strides").get<std::vector<int>>();
        cfg.blocks_per_stage = j.at("blocks_per_stage").get<std::vector<int>>();
        cfg.attn_reduction = j.at("attn_reduction").get<std::vector<int>>();
        cfg.block_heads = j.at("block_heads").get<std::vector<int>>();
        cfg.ffn_expansion = j.at("ffn_expansion").get<int>();
        cfg.decoder_dim = j.at("decoder_dim").get<int>();
        cfg.classes = j.at("classes").get<int>();
        cfg.carm.embed_mult = j.at("carm_embed_mult").get<int>();
        cfg.carm.local_layers = j.at("carm_local_layers").get<int>();
        cfg.carm.heads = j.at("carm_heads").get<int>();
        cfg.carm.attn_residual = j.at("carm_attn_residual").get<bool>();
        cfg.carm.v_from_normalized = j.at("carm_v_from_normalized").get<bool>();
        cfg.carm.parallel = j.at("carm_parallel").get<bool>();
        cfg.safm_theta_trust = j.at("safm_theta_trust").get<bool>();
        cfg.safm_compare_deep = j.at("safm_compare_deep").get<bool>();
        cfg.pattern = j.at("pattern").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

uint64_t ModelConfig::digest() const {
    const std::string s = to_json();
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) h = (h ^ uint64_t(uint8_t(c))) * 0x100000001b3ull;
    return h;
}

namespace {

std::string stage_tag(int s) { return "s" + std::to_string(s + 1); }

void block_specs(std::vector<ParamSpec>& out, const std::string& prefix, int C, int reduction,
                 int ffn_expansion) {
    const int E = C * ffn_expansion;
    out.push_back({prefix + ".ln1.g", {C}});
    out.push_back({prefix + ".ln1.b", {C}});
    out.push_back({prefix + ".q.w", {C, C}});
    out.push_back({prefix + ".q.b", {C}});
    if (reduction > 1) {
        out.push_back({prefix + ".sr.w", {C, C, reduction, reduction}});
        out.push_back({prefix + ".sr.b", {C}});
        out.push_back({prefix + ".srln.g", {C}});
        out.push_back({prefix + ".srln.b", {C}});
    }
    out.push_back({prefix + ".k.w", {C, C}});
    out.push_back({prefix + ".k.b", {C}});
    out.push_back({prefix + ".v.w", {C, C}});
    out.push_back({prefix + ".v.b", {C}});
    out.push_back({prefix + ".o.w", {C, C}});
    out.push_back({prefix + ".o.b", {C}});
    out.push_back({prefix + ".ln2.g", {C}});
    out.push_back({prefix + ".ln2.b", {C}});
    out.push_back({prefix + ".ffn1.w", {C, E}});
    out.push_back({prefix + ".ffn1.b", {E}});
    out.push_back({prefix + ".dw.w", {E, 3, 3}});
    out.push_back({prefix + ".dw.b", {E}});
    out.push_back({prefix + ".ffn2.w", {E, C}});
    out.push_back({prefix + ".ffn2.b", {C}});
}

} // namespace

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    for (int s = 0; s < 4; ++s) {
        const int C = cfg.stage_channels[size_t(s)];
        const std::string st = stage_tag(s);
        const int center_in = s == 0 ? 3 : cfg.stage_channels[size_t(s - 1)];
        const int center_k = s == 0 ? 2 * cfg.stage_strides[0] - 1
                                    : 2 * (cfg.stage_strides[size_t(s)] / cfg.stage_strides[size_t(s - 1)]) - 1;
        specs.push_back({"safm." + st + ".center.w", {C, center_in, center_k, center_k}});
        specs.push_back({"safm." + st + ".center.b", {C}});
        specs.push_back({"safm." + st + ".sai.w", {C, 3, 7, 7}});
        specs.push_back({"safm." + st + ".sai.b", {C}});
        for (int j = 0; j < cfg.blocks_per_stage[size_t(s)]; ++j) {
            block_specs(specs, "stb." + st + ".b" + std::to_string(j), C,
                        cfg.attn_reduction[size_t(s)], cfg.ffn_expansion);
            block_specs(specs, "atb." + st + ".b" + std::to_string(j), C,
                        cfg.attn_reduction[size_t(s)], cfg.ffn_expansion);
        }
        const int C2 = C * cfg.carm.embed_mult;
        specs.push_back({"carm." + st + ".min.w", {C, C2}});
        specs.push_back({"carm." + st + ".min.b", {C2}});
        specs.push_back({"carm." + st + ".ln.g", {C2}});
        specs.push_back({"carm." + st + ".ln.b", {C2}});
        for (const char* n : {"q", "k", "v"}) {
            specs.push_back({"carm." + st + "." + n + ".w", {C2, C2}});
            specs.push_back({"carm." + st + "." + n + ".b", {C2}});
        }
        specs.push_back({"carm." + st + ".mlp1.w", {C2, C2}});
        specs.push_back({"carm." + st + ".mlp1.b", {C2}});
        specs.push_back({"carm." + st + ".mlp2.w", {C2, C2}});
        specs.push_back({"carm." + st + ".mlp2.b", {C2}});
        specs.push_back({"carm." + st + ".out.w", {C2, C}});
        specs.push_back({"carm." + st + ".out.b", {C}});
        for (int j = 0; j < cfg.carm.local_layers; ++j) {
            specs.push_back({"carm." + st + ".local" + std::to_string(j) + ".w", {C, C, 3, 3, 3}});
            specs.push_back({"carm." + st + ".local" + std::to_string(j) + ".b", {C}});
        }
        specs.push_back({"ffm." + st + ".merge.w", {2 * C, C}});
        specs.push_back({"ffm." + st + ".merge.b", {C}});
        specs.push_back({"ffm." + st + ".gate1.w", {2 * C, C}});
        specs.push_back({"ffm." + st + ".gate1.b", {C}});
        specs.push_back({"ffm." + st + ".gate2.w", {C, C}});
        specs.push_back({"ffm." + st + ".gate2.b", {C}});
    }
    const int D = cfg.decoder_dim;
    for (int s = 0; s < 4; ++s) {
        specs.push_back({"dec.lin" + std::to_string(s + 1) + ".w", {cfg.stage_channels[size_t(s)], D}});
        specs.push_back({"dec.lin" + std::to_string(s + 1) + ".b", {D}});
    }
    specs.push_back({"dec.fuse.w", {4 * D, D}});
    specs.push_back({"dec.fuse.b", {D}});
    specs.push_back({"dec.cls.w", {D, cfg.classes}});
    specs.push_back({"dec.cls.b", {cfg.classes}});
    return specs;
}

long long param_count(const ModelConfig& cfg) {
    long long n = 0;
    for (const auto& spec : param_specs(cfg)) n += shape_numel(spec.shape);
    return n;
}

Tensor& ModelState::p(const std::string& id) {
    auto it = params.find(id);
    if (it == params.end()) throw ConfigError("unknown parameter id '" + id + "'");
    return it->second;
}

const Tensor& ModelState::p(const std::string& id) const {
    auto it = params.find(id);
    if (it == params.end()) throw ConfigError("unknown parameter id '" + id + "'");
    return it->second;
}

ModelState init_model(const ModelConfig& cfg, uint64_t seed) {
    ModelState state;
    state.config = cfg;
    Rng rng(seed);
    for (const auto& spec : param_specs(cfg)) {
        const bool is_gamma = spec.id.size() > 2 && spec.id.substr(spec.id.size() - 2) == ".g";
        const bool is_weight = spec.id.size() > 2 && spec.id.substr(spec.id.size() - 2) == ".w";
        Tensor t;
        if (is_weight) {
            long long fan_in = 1;
            if (spec.shape.size() == 2)
                fan_in = spec.shape[0];
            else if (spec.shape.size() == 3) // depthwise
                fan_in = (long long)spec.shape[1] * spec.shape[2];
            else
                for (size_t d = 1; d < spec.shape.size(); ++d) fan_in *= spec.shape[size_t(d)];
            const double bound = std::sqrt(3.0 / double(fan_in));
            std::vector<double> vals(size_t(shape_numel(spec.shape)));
            for (auto& v : vals) v = rng.uniform(-bound, bound);
            t = Tensor::from(spec.shape, std::move(vals), true);
        } else {
            t = Tensor::full(spec.shape, is_gamma ? 1.0 : 0.0, true);
        }
        state.params.emplace(spec.id, std::move(t));
    }
    return state;
}

namespace {

ModelState shell_state(const ModelConfig& cfg) {
    ModelState state;
    state.config = cfg;
    for (const auto& spec : param_specs(cfg)) state.params.emplace(spec.id, Tensor::shell(spec.shape));
    return state;
}

Tensor to_tokens(const Tensor& map) { // [C,H,W] -> [H*W, C]
    const int C = map.dim(0), H = map.dim(1), W = map.dim(2);
    return reshape(permute(map, {1, 2, 0}), {H * W, C});
}

Tensor to_map(const Tensor& tokens, int H, int W) { // [H*W, C] -> [C,H,W]
    const int C = tokens.dim(1);
    return permute(reshape(tokens, {H, W, C}), {2, 0, 1});
}

Tensor linear(const Tensor& tokens, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(tokens, w), b);
}

} // namespace

Tensor transformer_block_forward(const Tensor& x, const std::string& prefix,
                                 const ModelState& state, int reduction, int heads,
                                 int ffn_expansion) {
    if (x.ndim() != 3)
        throw DimError("transformer block: expected [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (C % heads != 0)
        throw ConfigError("transformer block: channels " + std::to_string(C) +
                          " not divisible by " + std::to_string(heads) + " heads");
    auto P = [&](const char* n) -> const Tensor& { return state.p(prefix + "." + n); };

    Tensor tokens = to_tokens(x);
    Tensor normed = layer_norm(tokens, P("ln1.g"), P("ln1.b"));
    Tensor q = linear(normed, P("q.w"), P("q.b"));
    Tensor kv_src = normed;
    int HK = H, WK = W;
    if (reduction > 1) {
        if (H % reduction != 0 || W % reduction != 0)
            throw DimError("transformer block: reduction " + std::to_string(reduction) +
                           " does not divide the " + std::to_string(H) + "x" + std::to_string(W) +
                           " layout");
        Tensor nmap = reshape(to_map(normed, H, W), {1, C, H, W});
        Tensor red = conv2d(nmap, P("sr.w"), P("sr.b"), reduction, 0);
        HK = red.dim(2);
        WK = red.dim(3);
        kv_src = layer_norm(to_tokens(reshape(red, {C, HK, WK})), P("srln.g"), P("srln.b"));
    }
    Tensor k = linear(kv_src, P("k.w"), P("k.b"));
    Tensor v = linear(kv_src, P("v.w"), P("v.b"));

    const int D = C / heads;
    auto heads_of = [&](const Tensor& t) { // [T,C] -> [heads,T,D]
        return permute(reshape(t, {t.dim(0), heads, D}), {1, 0, 2});
    };
    Tensor qh = heads_of(q), kh = heads_of(k), vh = heads_of(v);
    Tensor scores = mul_scalar(matmul(qh, permute(kh, {0, 2, 1})), 1.0 / std::sqrt(double(D)));
    Tensor sim = softmax(scores, 2);
    notify_attention(sim, 2);
    Tensor ctx = reshape(permute(matmul(sim, vh), {1, 0, 2}), {H * W, C});
    Tensor x1 = add(tokens, linear(ctx, P("o.w"), P("o.b")));

    Tensor n2 = layer_norm(x1, P("ln2.g"), P("ln2.b"));
    Tensor f1 = linear(n2, P("ffn1.w"), P("ffn1.b"));
    const int E = C * ffn_expansion;
    Tensor f1map = reshape(to_map(f1, H, W), {1, E, H, W});
    Tensor dw = dwconv2d(f1map, P("dw.w"), P("dw.b"), 1, 1);
    Tensor act = gelu(to_tokens(reshape(dw, {E, H, W})));
    Tensor f2 = linear(act, P("ffn2.w"), P("ffn2.b"));
    return to_map(add(x1, f2), H, W);
}

Tensor ffm_forward(const Tensor& f_agl, const Tensor& f_spl, const std::string& prefix,
                   const ModelState& state) {
    if (!shape_eq(f_agl.shape(), f_spl.shape()) || f_agl.ndim() != 3)
        throw DimError("ffm: inputs must both be [C,H,W], got " + shape_str(f_agl.shape()) +
                       " and " + shape_str(f_spl.shape()));
    const int C = f_agl.dim(0), H = f_agl.dim(1), W = f_agl.dim(2);
    auto P = [&](const char* n) -> const Tensor& { return state.p(prefix + "." + n); };
    Tensor cat = concat({f_agl, f_spl}, 0); // [2C,H,W]
    Tensor merged = to_map(linear(to_tokens(cat), P("merge.w"), P("merge.b")), H, W);
    Tensor pooled = reshape(mean_spatial(cat), {1, 2 * C});
    Tensor hidden = gelu(linear(pooled, P("gate1.w"), P("gate1.b")));
    Tensor gate = reshape(sigmoid(linear(hidden, P("gate2.w"), P("gate2.b"))), {C});
    return scale_channels(merged, gate);
}

namespace {

safm::StageParams stage_stem_params(const ModelState& state, int s) {
    const auto& cfg = state.config;
    const std::string st = stage_tag(s);
    safm::StageParams p;
    p.center_w = state.p("safm." + st + ".center.w");
    p.center_b = state.p("safm." + st + ".center.b");
    if (s == 0) {
        p.center_stride = cfg.stage_strides[0];
        p.center_pad = cfg.stage_strides[0] - 1;
    } else {
        const int q = cfg.stage_strides[size_t(s)] / cfg.stage_strides[size_t(s - 1)];
        p.center_stride = q;
        p.center_pad = q - 1;
    }
    p.sai_w = state.p("safm." + st + ".sai.w");
    p.sai_b = state.p("safm." + st + ".sai.b");
    p.sai_stride = cfg.stage_strides[size_t(s)];
    p.sai_pad = 3;
    p.theta_trust = cfg.safm_theta_trust;
    p.compare_deep = cfg.safm_compare_deep;
    return p;
}

carm::Params stage_carm_params(const ModelState& state, int s) {
    const auto& cfg = state.config;
    const std::string st = stage_tag(s);
    carm::Params p;
    p.min_w = state.p("carm." + st + ".min.w");
    p.min_b = state.p("carm." + st + ".min.b");
    p.ln_g = state.p("carm." + st + ".ln.g");
    p.ln_b = state.p("carm." + st + ".ln.b");
    p.q_w = state.p("carm." + st + ".q.w");
    p.q_b = state.p("carm." + st + ".q.b");
    p.k_w = state.p("carm." + st + ".k.w");
    p.k_b = state.p("carm." + st + ".k.b");
    p.v_w = state.p("carm." + st + ".v.w");
    p.v_b = state.p("carm." + st + ".v.b");
    p.mlp1_w = state.p("carm." + st + ".mlp1.w");
    p.mlp1_b = state.p("carm." + st + ".mlp1.b");
    p.mlp2_w = state.p("carm." + st + ".mlp2.w");
    p.mlp2_b = state.p("carm." + st + ".mlp2.b");
    p.out_w = state.p("carm." + st + ".out.w");
    p.out_b = state.p("carm." + st + ".out.b");
    for (int j = 0; j < cfg.carm.local_layers; ++j) {
        p.local_w.push_back(state.p("carm." + st + ".local" + std::to_string(j) + ".w"));
        p.local_b.push_back(state.p("carm." + st + ".local" + std::to_string(j) + ".b"));
    }
    p.heads = cfg.carm.heads;
    p.attn_residual = cfg.carm.attn_residual;
    p.v_from_normalized = cfg.carm.v_from_normalized;
    p.parallel = cfg.carm.parallel;
    return p;
}

} // namespace

std::vector<Tensor> encoder_forward(const Tensor& center, const std::vector<Tensor>& sais,
                                    const ModelState& state) {
    const auto& cfg = state.config;
    std::vector<Tensor> features;
    Tensor x_center = center;
    for (int s = 0; s < 4; ++s) {
        const std::string st = stage_tag(s);
        Tensor f_spl, f_agl;
        {
            flops::Scope scope("safm." + st);
            auto stems = stage_stem_params(state, s);
            auto [spl, agl] = safm::safm_forward(x_center, sais, stems, center);
            f_spl = spl;
            f_agl = agl;
        }
        {
            flops::Scope scope("stb." + st);
            for (int j = 0; j < cfg.blocks_per_stage[size_t(s)]; ++j)
                f_spl = transformer_block_forward(f_spl, "stb." + st + ".b" + std::to_string(j),
                                                  state, cfg.attn_reduction[size_t(s)],
                                                  cfg.block_heads[size_t(s)], cfg.ffn_expansion);
        }
        {
            flops::Scope scope("atb." + st);
            for (int j = 0; j < cfg.blocks_per_stage[size_t(s)]; ++j)
                f_agl = transformer_block_forward(f_agl, "atb." + st + ".b" + std::to_string(j),
                                                  state, cfg.attn_reduction[size_t(s)],
                                                  cfg.block_heads[size_t(s)], cfg.ffn_expansion);
        }
        carm::Outputs rect;
        {
            flops::Scope scope("carm." + st);
            rect = carm::carm_forward(f_spl, f_agl, stage_carm_params(state, s));
        }
        {
            flops::Scope scope("ffm." + st);
            features.push_back(ffm_forward(rect.agl, rect.spl, "ffm." + st, state));
        }
        x_center = rect.spl; // spatial feature feeds the next stage
    }
    return features;
}

std::vector<Tensor> encoder_forward(const lfio::LightFieldSample& sample,
                                    const lfio::ViewPattern& pattern, const ModelState& state) {
    auto coords = pattern.coords;
    for (const auto& [u, v] : coords)
        if (u < 0 || u >= sample.U || v < 0 || v >= sample.V)
            throw DataError("pattern view (" + std::to_string(u) + "," + std::to_string(v) +
                            ") outside the sample grid");
    std::sort(coords.begin(), coords.end()); // fixed summation order by view coordinate
    std::vector<Tensor> sais;
    sais.reserve(coords.size());
    for (const auto& [u, v] : coords) sais.push_back(image_to_tensor(sample.view(u, v)));
    return encoder_forward(image_to_tensor(sample.center()), sais, state);
}

Tensor decode(const std::vector<Tensor>& features, const ModelState& state, int out_h, int out_w) {
    if (features.size() != 4) throw DimError("decode: expected four stage features");
    flops::Scope scope("decoder");
    const int D = state.config.decoder_dim;
    const int H1 = features[0].dim(1), W1 = features[0].dim(2);
    std::vector<Tensor> upsampled;
    for (int s = 0; s < 4; ++s) {
        const Tensor& f = features[size_t(s)];
        Tensor t = linear(to_tokens(f), state.p("dec.lin" + std::to_string(s + 1) + ".w"),
                          state.p("dec.lin" + std::to_string(s + 1) + ".b"));
        Tensor map = to_map(t, f.dim(1), f.dim(2));
        upsampled.push_back(s == 0 ? map : upsample_bilinear(map, H1, W1));
    }
    Tensor fused = linear(to_tokens(concat(upsampled, 0)), state.p("dec.fuse.w"),
                          state.p("dec.fuse.b"));
    Tensor logits = to_map(linear(fused, state.p("dec.cls.w"), state.p("dec.cls.b")), H1, W1);
    return upsample_bilinear(logits, out_h, out_w);
}

Tensor image_to_tensor(const lfio::Image& img) {
    std::vector<double> vals(size_t(3) * img.h * img.w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                vals[(size_t(c) * img.h + size_t(y)) * img.w + size_t(x)] = img.at(y, x, c);
    return Tensor::from({3, img.h, img.w}, std::move(vals));
}

Tensor forward_logits(const lfio::LightFieldSample& sample, const lfio::ViewPattern& pattern,
                      const ModelState& state) {
    const int H = sample.center().h, W = sample.center().w;
    return decode(encoder_forward(sample, pattern, state), state, H, W);
}

FlopReport count_model_flops(const ModelConfig& cfg, int input_h, int input_w, int n_views) {
    cfg.validate();
    if (n_views < 0) throw ConfigError("n_views must be >= 0");
    ModelState state = shell_state(cfg);
    auto trace = [&](int views) {
        FlopCounter counter;
        flops::CountGuard guard(&counter, /*shell_mode=*/true);
        Tensor center = Tensor::shell({3, input_h, input_w});
        std::vector<Tensor> sais(size_t(views), Tensor::shell({3, input_h, input_w}));
        Tensor logits = decode(encoder_forward(center, sais, state), state, input_h, input_w);
        (void)logits;
        return counter;
    };
    FlopCounter at_n = trace(n_views);
    FlopCounter at_n1 = trace(n_views + 1);
    FlopReport report = flop_report(at_n);
    report.params_total = param_count(cfg);
    report.n_views = n_views;
    report.marginal_per_view = at_n1.total() - at_n.total();
    return report;
}

namespace {

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::ifstream& in, T& v, const std::string& path) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError(path + ": truncated checkpoint");
}

constexpr char kMagic[5] = {'O', 'A', 'F', 'W', '1'};

} // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    out.write(kMagic, 5);
    write_raw(out, state.config.digest());
    write_raw(out, state.step);
    const std::string cfg = state.config.to_json();
    write_raw(out, uint32_t(cfg.size()));
    out.write(cfg.data(), std::streamsize(cfg.size()));
    write_raw(out, uint32_t(state.params.size()));
    for (const auto& [id, tensor] : state.params) {
        write_raw(out, uint32_t(id.size()));
        out.write(id.data(), std::streamsize(id.size()));
        write_raw(out, uint8_t(0)); // dtype tag: f64
        write_raw(out, uint32_t(tensor.ndim()));
        for (int d = 0; d < tensor.ndim(); ++d) write_raw(out, uint32_t(tensor.dim(d)));
        out.write(reinterpret_cast<const char*>(tensor.values().data()),
                  std::streamsize(tensor.values().size() * sizeof(double)));
    }
    if (!out) throw FormatError("failed writing checkpoint " + path);
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kMagic, 5) != 0)
        throw FormatError(path + ": not an OAFW1 checkpoint");
    uint64_t digest;
    read_raw(in, digest, path);
    long long step;
    read_raw(in, step, path);
    uint32_t cfg_len;
    read_raw(in, cfg_len, path);
    std::string cfg_text(cfg_len, '\0');
    in.read(cfg_text.data(), std::streamsize(cfg_len));
    if (!in) throw FormatError(path + ": truncated checkpoint");

    ModelState state;
    state.config = ModelConfig::from_json(cfg_text);
    state.step = step;
    if (state.config.digest() != digest)
        throw FormatError(path + ": config digest mismatch, checkpoint is corrupt");

    uint32_t n_params;
    read_raw(in, n_params, path);
    for (uint32_t i = 0; i < n_params; ++i) {
        uint32_t id_len;
        read_raw(in, id_len, path);
        std::string id(id_len, '\0');
        in.read(id.data(), std::streamsize(id_len));
        uint8_t dtype;
        read_raw(in, dtype, path);
        if (dtype != 0) throw FormatError(path + ": unsupported dtype tag " + std::to_string(dtype));
        uint32_t ndim;
        read_raw(in, ndim, path);
        Shape shape(ndim);
        for (auto& d : shape) {
            uint32_t e;
            read_raw(in, e, path);
            d = int(e);
        }
        std::vector<double> vals(size_t(shape_numel(shape)));
        in.read(reinterpret_cast<char*>(vals.data()), std::streamsize(vals.size() * sizeof(double)));
        if (!in) throw FormatError(path + ": truncated checkpoint");
        state.params.emplace(id, Tensor::from(shape, std::move(vals), true));
    }

    // the stored parameter set must match the config's registry exactly
    auto specs = param_specs(state.config);
    if (specs.size() != state.params.size())
        throw FormatError(path + ": parameter count does not match the config");
    for (const auto& spec : specs) {
        auto it = state.params.find(spec.id);
        if (it == state.params.end()) throw FormatError(path + ": missing parameter " + spec.id);
        if (!shape_eq(it->second.shape(), spec.shape))
            throw FormatError(path + ": parameter " + spec.id + " has shape " +
                              shape_str(it->second.shape()) + ", expected " + shape_str(spec.shape));
    }
    return state;
}

} // namespace oaf::model
