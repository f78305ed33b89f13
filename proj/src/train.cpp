#include "oaf/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

namespace oaf::train {

namespace {

lfio::Image resize_bilinear(const lfio::Image& img, int th, int tw) {
    lfio::Image out(th, tw);
    const double sy = double(img.h) / th, sx = double(img.w) / tw;
    for (int y = 0; y < th; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, double(img.h - 1));
        const int y0 = int(fy), y1 = std::min(y0 + 1, img.h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < tw; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, double(img.w - 1));
            const int x0 = int(fx), x1 = std::min(x0 + 1, img.w - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = (1 - wy) * ((1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c)) +
                                  wy * ((1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c));
        }
    }
    return out;
}

lfio::LabelMap resize_nearest(const lfio::LabelMap& labels, int th, int tw) {
    lfio::LabelMap out(th, tw);
    const double sy = double(labels.h) / th, sx = double(labels.w) / tw;
    for (int y = 0; y < th; ++y) {
        const int iy = std::clamp(int((y + 0.5) * sy), 0, labels.h - 1);
        for (int x = 0; x < tw; ++x) {
            const int ix = std::clamp(int((x + 0.5) * sx), 0, labels.w - 1);
            out.at(y, x) = labels.at(iy, ix);
        }
    }
    return out;
}

lfio::Image flip_horizontal(const lfio::Image& img) {
    lfio::Image out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.w - 1 - x, c);
    return out;
}

void normalize_inplace(lfio::Image& img, const TrainConfig& cfg) {
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = (img.at(y, x, c) - cfg.norm_mean[size_t(c)]) / cfg.norm_std[size_t(c)];
}

int snap_extent(double target, int multiple, int cap) {
    int snapped = int(std::lround(target / multiple)) * multiple;
    snapped = std::max(snapped, multiple);
    const int capped = std::max(multiple, (cap / multiple) * multiple);
    return std::min(snapped, capped);
}

} // namespace

lfio::LightFieldSample augment(const lfio::LightFieldSample& sample, Rng& rng,
                               const TrainConfig& cfg) {
    const bool flip = rng.uniform01() < cfg.flip_prob;
    const double scale = cfg.scales.empty() ? 1.0 : cfg.scales[rng.uniform_int(cfg.scales.size())];

    lfio::LightFieldSample out = sample;
    if (flip) {
        // mirror every view and remap v -> V-1-v so the flipped sample is
        // still a geometrically consistent light field
        for (int u = 0; u < sample.U; ++u)
            for (int v = 0; v < sample.V; ++v)
                out.view(u, sample.V - 1 - v) = flip_horizontal(sample.view(u, v));
        lfio::LabelMap flipped(sample.labels.h, sample.labels.w);
        for (int y = 0; y < flipped.h; ++y)
            for (int x = 0; x < flipped.w; ++x)
                flipped.at(y, x) = sample.labels.at(y, flipped.w - 1 - x);
        out.labels = flipped;
    }

    const int H = out.labels.h, W = out.labels.w;
    const int th = snap_extent(H * scale, cfg.size_multiple, cfg.size_cap);
    const int tw = snap_extent(W * scale, cfg.size_multiple, cfg.size_cap);
    if (th != H || tw != W) {
        for (auto& view : out.views) view = resize_bilinear(view, th, tw);
        out.labels = resize_nearest(out.labels, th, tw);
    }
    for (auto& view : out.views) normalize_inplace(view, cfg);
    return out;
}

lfio::LightFieldSample normalize_only(const lfio::LightFieldSample& sample,
                                      const TrainConfig& cfg) {
    lfio::LightFieldSample out = sample;
    for (auto& view : out.views) normalize_inplace(view, cfg);
    return out;
}

std::vector<int> labels_of(const lfio::LightFieldSample& sample) {
    std::vector<int> labels(sample.labels.v.size());
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = sample.labels.v[i];
    return labels;
}

Tensor loss(const Tensor& logits, const std::vector<int>& labels) {
    return cross_entropy(logits, labels, 255);
}

double lr_at(long long step, long long total_steps, long long warmup_steps,
             const TrainConfig& cfg) {
    if (step < 0 || step > total_steps) throw UsageError("lr_at: step outside [0, total]");
    if (warmup_steps > 0 && step < warmup_steps) return cfg.lr0 * double(step) / double(warmup_steps);
    if (total_steps <= warmup_steps) return cfg.lr0;
    const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
    return cfg.lr0 * std::pow(1.0 - progress, cfg.poly_power);
}

void adamw_update(model::ModelState& state, Optimizer& opt, double lr, const TrainConfig& cfg) {
    ++opt.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(opt.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(opt.t));
    for (auto& [id, tensor] : state.params) {
        auto& m = opt.m[id];
        auto& v = opt.v[id];
        const size_t n = tensor.values().size();
        if (m.size() != n) m.assign(n, 0.0);
        if (v.size() != n) v.assign(n, 0.0);
        const bool has_grad = tensor.has_grad();
        auto& theta = tensor.mutable_values();
        const std::vector<double>* grad = has_grad ? &tensor.mutable_grad() : nullptr;
        for (size_t i = 0; i < n; ++i) {
            const double g = grad ? (*grad)[i] : 0.0;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * theta[i]);
        }
        tensor.zero_grad();
    }
}

double train_step(model::ModelState& state, Optimizer& opt,
                  const std::vector<const lfio::LightFieldSample*>& batch,
                  const lfio::ViewPattern& pattern, const TrainConfig& cfg, long long step,
                  long long total_steps, long long warmup_steps) {
    if (batch.empty()) throw UsageError("train_step: empty batch");
    Tensor total;
    try {
        for (const auto* sample : batch) {
            Tensor logits = model::forward_logits(*sample, pattern, state);
            Tensor l = loss(logits, labels_of(*sample));
            total = total.defined() ? add(total, l) : l;
        }
        total = mul_scalar(total, 1.0 / double(batch.size()));
        backward(total);
    } catch (const NumericError& e) {
        throw NumericError(std::string("training aborted: ") + e.what());
    }
    const double lr = lr_at(step, total_steps, warmup_steps, cfg);
    adamw_update(state, opt, lr, cfg);
    ++state.step;
    return total.item();
}

Metrics Metrics::from_confusion(std::vector<long long> confusion, int classes) {
    Metrics m;
    m.classes = classes;
    m.confusion = std::move(confusion);
    long long total = 0, diag = 0;
    for (int t = 0; t < classes; ++t)
        for (int q = 0; q < classes; ++q) {
            const long long c = m.confusion[size_t(t) * classes + size_t(q)];
            total += c;
            if (t == q) diag += c;
        }
    m.acc = total > 0 ? double(diag) / double(total) : 0.0;
    double acc_sum = 0, iou_sum = 0;
    int acc_n = 0, iou_n = 0;
    for (int c = 0; c < classes; ++c) {
        long long row = 0, col = 0;
        for (int q = 0; q < classes; ++q) {
            row += m.confusion[size_t(c) * classes + size_t(q)];
            col += m.confusion[size_t(q) * classes + size_t(c)];
        }
        const long long d = m.confusion[size_t(c) * classes + size_t(c)];
        if (row > 0) {
            acc_sum += double(d) / double(row);
            ++acc_n;
        }
        const long long uni = row + col - d;
        if (uni > 0) {
            iou_sum += double(d) / double(uni);
            ++iou_n;
        }
    }
    m.macc = acc_n > 0 ? acc_sum / acc_n : 0.0;
    m.miou = iou_n > 0 ? iou_sum / iou_n : 0.0;
    return m;
}

std::string Metrics::to_text() const {
    std::ostringstream os;
    os << "class  iou\n";
    for (int c = 0; c < classes; ++c) {
        long long row = 0, col = 0;
        for (int q = 0; q < classes; ++q) {
            row += confusion[size_t(c) * classes + size_t(q)];
            col += confusion[size_t(q) * classes + size_t(c)];
        }
        const long long d = confusion[size_t(c) * classes + size_t(c)];
        const long long uni = row + col - d;
        os << "  " << c << "    ";
        if (uni > 0)
            os << double(d) / double(uni);
        else
            os << "n/a";
        os << "\n";
    }
    os << "Acc " << acc << "  mAcc " << macc << "  mIoU " << miou << "\n";
    return os.str();
}

std::string Metrics::to_kv() const {
    std::ostringstream os;
    os << "acc=" << acc << "\nmacc=" << macc << "\nmiou=" << miou << "\n";
    return os.str();
}

Metrics evaluate(const model::ModelState& state, const std::vector<lfio::LightFieldSample>& data,
                 const lfio::ViewPattern& pattern, const TrainConfig& cfg) {
    if (data.empty()) throw UsageError("evaluate: empty dataset");
    const int K = state.config.classes;
    std::vector<long long> confusion(size_t(K) * K, 0);
    NoGradGuard no_grad;
    for (const auto& sample : data) {
        lfio::LightFieldSample prepared = normalize_only(sample, cfg);
        Tensor logits = model::forward_logits(prepared, pattern, state);
        const int H = logits.dim(1), W = logits.dim(2);
        const long long P = (long long)H * W;
        for (long long p = 0; p < P; ++p) {
            const int truth = sample.labels.v[size_t(p)];
            if (truth == 255) continue;
            if (truth >= K) throw DataError("evaluate: label outside the model's class range");
            int best = 0;
            double best_v = logits.values()[size_t(p)];
            for (int k = 1; k < K; ++k) {
                const double v = logits.values()[size_t(k * P + p)];
                if (v > best_v) {
                    best_v = v;
                    best = k;
                }
            }
            ++confusion[size_t(truth) * K + size_t(best)];
        }
    }
    return Metrics::from_confusion(std::move(confusion), K);
}

FitResult fit(model::ModelState& state, const std::vector<lfio::LightFieldSample>& data,
              const FitOptions& options) {
    if (data.empty()) throw UsageError("fit: empty dataset");
    const TrainConfig& cfg = options.config;
    const long long steps_per_epoch = ((long long)data.size() + cfg.batch - 1) / cfg.batch;
    long long total_steps = steps_per_epoch * cfg.epochs;
    if (options.max_steps > 0) total_steps = std::min(total_steps, options.max_steps);
    const long long warmup_steps =
        cfg.epochs > 0 ? total_steps * cfg.warmup_epochs / cfg.epochs : 0;

    Optimizer opt;
    Rng rng = Rng(cfg.seed).fork("train");
    FitResult result;
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    long long step = 0;
    bool stop = false;
    for (int epoch = 0; !stop && step < total_steps; ++epoch) {
        // deterministic shuffle
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(rng.uniform_int(i))]);
        for (size_t b = 0; !stop && b < order.size() && step < total_steps; b += size_t(cfg.batch)) {
            std::vector<lfio::LightFieldSample> prepared;
            std::vector<const lfio::LightFieldSample*> batch;
            for (size_t i = b; i < std::min(order.size(), b + size_t(cfg.batch)); ++i)
                prepared.push_back(options.augment ? augment(data[order[i]], rng, cfg)
                                                   : normalize_only(data[order[i]], cfg));
            for (const auto& s : prepared) batch.push_back(&s);
            const double loss_value =
                train_step(state, opt, batch, options.pattern, cfg, step, total_steps, warmup_steps);
            result.losses.push_back(loss_value);
            if (options.log)
                (*options.log) << "step=" << step << " loss=" << loss_value
                               << " lr=" << lr_at(step, total_steps, warmup_steps, cfg) << "\n";
            ++step;
            if (options.eval_every > 0 && (step % options.eval_every == 0 || step == total_steps)) {
                result.train_metrics = evaluate(state, data, options.pattern, cfg);
                if (options.log)
                    (*options.log) << "eval step=" << step
                                   << " train_miou=" << result.train_metrics.miou << "\n";
                if (options.early_stop_miou > 0 && result.train_metrics.miou >= options.early_stop_miou)
                    stop = true;
            }
        }
    }
    result.steps = step;
    if (options.eval_every > 0 && result.train_metrics.classes == 0)
        result.train_metrics = evaluate(state, data, options.pattern, cfg);
    return result;
}

} // namespace oaf::train
