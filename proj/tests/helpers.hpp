#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "oaf/rng.hpp"
#include "oaf/tensor.hpp"

namespace oaf::testing {

inline Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                          bool requires_grad = true) {
    std::vector<double> vals(size_t(shape_numel(shape)));
    for (auto& v : vals) v = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(vals), requires_grad);
}

// scalar readout that weights every output element differently
inline Tensor weighted_sum(const Tensor& out, Rng& rng) {
    std::vector<double> w(size_t(out.numel()));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return sum_all(mul(out, Tensor::from(out.shape(), std::move(w))));
}

// Central-difference check of d(fwd)/d(inputs); returns the worst relative
// error. fwd must rebuild its graph from the given tensors on every call.
inline double gradcheck(const std::function<Tensor()>& fwd, std::vector<Tensor> inputs,
                        double floor = 1e-6, double h0 = 1e-5) {
    for (auto& t : inputs) t.zero_grad();
    Tensor loss = fwd();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs)
        analytic.push_back(t.has_grad() ? t.grad()
                                        : std::vector<double>(t.values().size(), 0.0));
    double worst = 0.0;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& vals = inputs[ti].mutable_values();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            const double h = h0 * std::max(1.0, std::fabs(orig));
            double fp, fm;
            {
                NoGradGuard ng;
                vals[i] = orig + h;
                fp = fwd().item();
                vals[i] = orig - h;
                fm = fwd().item();
                vals[i] = orig;
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = std::fabs(numeric - analytic[ti][i]) /
                               std::max({std::fabs(numeric), std::fabs(analytic[ti][i]), floor});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// independent nested-loop references for the convolution kernels
inline std::vector<double> naive_conv2d(const std::vector<double>& x, int B, int Cin, int H, int W,
                                        const std::vector<double>& w, int Cout, int k,
                                        const std::vector<double>& bias, int stride, int pad,
                                        int& OH, int& OW) {
    OH = (H + 2 * pad - k) / stride + 1;
    OW = (W + 2 * pad - k) / stride + 1;
    std::vector<double> out(size_t(B) * Cout * OH * OW, 0.0);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[size_t(co)];
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride + ky - pad;
                                const int ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += x[((size_t(b) * Cin + ci) * H + iy) * W + size_t(ix)] *
                                       w[((size_t(co) * Cin + ci) * k + ky) * k + size_t(kx)];
                            }
                    out[((size_t(b) * Cout + co) * OH + oy) * OW + size_t(ox)] = acc;
                }
    return out;
}

inline std::vector<double> naive_conv3d(const std::vector<double>& x, int B, int C, int D, int H,
                                        int W, const std::vector<double>& w, int k,
                                        const std::vector<double>& bias) {
    const int pad = (k - 1) / 2;
    std::vector<double> out(size_t(B) * C * D * H * W, 0.0);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < C; ++co)
            for (int d = 0; d < D; ++d)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        double acc = bias.empty() ? 0.0 : bias[size_t(co)];
                        for (int ci = 0; ci < C; ++ci)
                            for (int kd = 0; kd < k; ++kd)
                                for (int ky = 0; ky < k; ++ky)
                                    for (int kx = 0; kx < k; ++kx) {
                                        const int id = d + kd - pad;
                                        const int iy = y + ky - pad;
                                        const int ix = xx + kx - pad;
                                        if (id < 0 || id >= D || iy < 0 || iy >= H || ix < 0 ||
                                            ix >= W)
                                            continue;
                                        acc += x[(((size_t(b) * C + ci) * D + id) * H + iy) * W +
                                                 size_t(ix)] *
                                               w[(((size_t(co) * C + ci) * k + kd) * k + ky) * k +
                                                 size_t(kx)];
                                    }
                        out[(((size_t(b) * C + co) * D + d) * H + y) * W + size_t(xx)] = acc;
                    }
    return out;
}

} // namespace oaf::testing
