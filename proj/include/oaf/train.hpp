#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "oaf/lfio.hpp"
#include "oaf/model.hpp"
#include "oaf/rng.hpp"
#include "oaf/tensor.hpp"

namespace oaf::train {

struct TrainConfig {
    double lr0 = 6e-5;
    double beta1 = 0.9, beta2 = 0.999;
    double weight_decay = 0.01;
    double adam_eps = 1e-8;
    double poly_power = 0.9;
    int warmup_epochs = 10;
    double flip_prob = 0.5;
    std::vector<double> scales{0.5, 0.75, 1.0, 1.25, 1.5, 1.75};
    std::array<double, 3> norm_mean{0.485, 0.456, 0.406};
    std::array<double, 3> norm_std{0.229, 0.224, 0.225};
    int epochs = 100;
    int batch = 2;
    uint64_t seed = 0;
    int size_cap = 96;      // desk-scale ceiling on augmented extents
    int size_multiple = 16; // resolved from the model config before training
};

struct Metrics {
    int classes = 0;
    std::vector<long long> confusion; // classes*classes, rows are ground truth
    double acc = 0, macc = 0, miou = 0;

    static Metrics from_confusion(std::vector<long long> confusion, int classes);
    std::string to_text() const;
    std::string to_kv() const;
};

// one flip and one scale decision applied to every view identically; a
// horizontal flip also remaps the angular v coordinate so the flipped sample
// stays a consistent light field; normalization happens last
lfio::LightFieldSample augment(const lfio::LightFieldSample& sample, Rng& rng,
                               const TrainConfig& config);
lfio::LightFieldSample normalize_only(const lfio::LightFieldSample& sample,
                                      const TrainConfig& config);

std::vector<int> labels_of(const lfio::LightFieldSample& sample);

// per-pixel cross-entropy, ignore index 255
Tensor loss(const Tensor& logits, const std::vector<int>& labels);

// linear warmup to lr0, then polynomial decay to zero
double lr_at(long long step, long long total_steps, long long warmup_steps,
             const TrainConfig& config);

struct Optimizer {
    std::map<std::string, std::vector<double>> m, v;
    long long t = 0;
};

// forward/backward over one batch plus an AdamW update with decoupled weight
// decay; returns the batch loss
double train_step(model::ModelState& state, Optimizer& opt,
                  const std::vector<const lfio::LightFieldSample*>& batch,
                  const lfio::ViewPattern& pattern, const TrainConfig& config, long long step,
                  long long total_steps, long long warmup_steps);

// raw AdamW update from already-populated grads (exposed for the oracle tests)
void adamw_update(model::ModelState& state, Optimizer& opt, double lr, const TrainConfig& config);

Metrics evaluate(const model::ModelState& state, const std::vector<lfio::LightFieldSample>& data,
                 const lfio::ViewPattern& pattern, const TrainConfig& config);

struct FitOptions {
    lfio::ViewPattern pattern;
    TrainConfig config;
    long long max_steps = -1; // cap on optimizer steps, -1 for epochs*batches
    int eval_every = 0;       // train-set evaluation cadence in steps, 0 = never
    double early_stop_miou = -1.0;
    bool augment = true;
    std::ostream* log = nullptr;
};

struct FitResult {
    std::vector<double> losses;
    long long steps = 0;
    Metrics train_metrics; // filled when eval_every > 0
};

FitResult fit(model::ModelState& state, const std::vector<lfio::LightFieldSample>& data,
              const FitOptions& options);

} // namespace oaf::train
