#pragma once

#include <map>
#include <string>
#include <vector>

#include "oaf/carm.hpp"
#include "oaf/flops.hpp"
#include "oaf/lfio.hpp"
#include "oaf/safm.hpp"
#include "oaf/tensor.hpp"

namespace oaf::model {

struct CarmConfig {
    int embed_mult = 2;   // C2 = embed_mult * C1
    int local_layers = 3; // conv3d stack depth, 0 disables local rectification
    int heads = 8;
    bool attn_residual = true;
    bool v_from_normalized = false;
    bool parallel = false;
};

struct ModelConfig {
    std::vector<int> stage_channels{64, 128, 320, 512};
    std::vector<int> stage_strides{4, 8, 16, 32}; // cumulative from input resolution
    std::vector<int> blocks_per_stage{2, 2, 2, 2};
    std::vector<int> attn_reduction{8, 4, 2, 1};
    std::vector<int> block_heads{1, 2, 5, 8};
    int ffn_expansion = 4;
    int decoder_dim = 256;
    int classes = 14;
    CarmConfig carm;
    bool safm_theta_trust = true;
    bool safm_compare_deep = true;
    std::string pattern = "diag9";

    static ModelConfig preset(const std::string& name, int classes);
    void validate() const;
    // input sizes must be a multiple of this for the attention reductions to
    // divide every stage grid
    int size_multiple() const;
    std::string to_json() const; // canonical serialization
    uint64_t digest() const;
    static ModelConfig from_json(const std::string& text);
};

struct ParamSpec {
    std::string id;
    Shape shape;
};

// the single source of truth for parameter identities and shapes
std::vector<ParamSpec> param_specs(const ModelConfig& config);
long long param_count(const ModelConfig& config);

struct ModelState {
    ModelConfig config;
    std::map<std::string, Tensor> params; // keyed by ParamId
    long long step = 0;

    Tensor& p(const std::string& id);
    const Tensor& p(const std::string& id) const;
};

ModelState init_model(const ModelConfig& config, uint64_t seed);

// spatially-reduced multi-head self attention + depthwise-conv feed-forward
Tensor transformer_block_forward(const Tensor& x, const std::string& prefix,
                                 const ModelState& state, int reduction, int heads,
                                 int ffn_expansion);

// channel-gated merge of the rectified angular/spatial pair
Tensor ffm_forward(const Tensor& f_agl, const Tensor& f_spl, const std::string& prefix,
                   const ModelState& state);

// tensor-level encoder: center [3,H,W] plus sais in a fixed order
std::vector<Tensor> encoder_forward(const Tensor& center, const std::vector<Tensor>& sais,
                                    const ModelState& state);
// sample-level wrapper: selects views by pattern, sorts them row-major
std::vector<Tensor> encoder_forward(const lfio::LightFieldSample& sample,
                                    const lfio::ViewPattern& pattern, const ModelState& state);

Tensor decode(const std::vector<Tensor>& features, const ModelState& state, int out_h, int out_w);

Tensor forward_logits(const lfio::LightFieldSample& sample, const lfio::ViewPattern& pattern,
                      const ModelState& state);

Tensor image_to_tensor(const lfio::Image& img);

// Static cost profile via a traced forward on shape-only inputs; the marginal
// is the exact difference between n_views+1 and n_views traces.
FlopReport count_model_flops(const ModelConfig& config, int input_h, int input_w, int n_views);

void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

} // namespace oaf::model
