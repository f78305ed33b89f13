#include "oaf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace oaf {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x))
            throw NumericError(std::string("op '") + op + "' produced a non-finite value");
}

std::vector<long long> strides_of(const Shape& s) {
    std::vector<long long> st(s.size(), 1);
    for (int i = int(s.size()) - 2; i >= 0; --i) st[size_t(i)] = st[size_t(i) + 1] * s[size_t(i) + 1];
    return st;
}

// Assemble a traced result. Parents and the backward step are dropped when no
// input needs gradients, so inference runs tape-free.
Tensor finish(const char* op, Shape shape, std::vector<double> values,
              std::vector<Tensor> parents, std::function<void(TensorNode&)> bw) {
    check_finite(values, op);
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->op = op;
    bool needs_grad = false;
    if (grad_enabled())
        for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
    node->requires_grad = needs_grad;
    if (needs_grad) {
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(bw);
    }
    return Tensor::wrap(std::move(node));
}

// C[M,N] += A[M,K] * B[K,N]; four-row blocks so each B row is reused
void gemm_nn(const double* A, const double* B, double* C, int M, int K, int N) {
    int i = 0;
    for (; i + 4 <= M; i += 4) {
        const double* a0 = A + (long long)(i + 0) * K;
        const double* a1 = A + (long long)(i + 1) * K;
        const double* a2 = A + (long long)(i + 2) * K;
        const double* a3 = A + (long long)(i + 3) * K;
        double* c0 = C + (long long)(i + 0) * N;
        double* c1 = C + (long long)(i + 1) * N;
        double* c2 = C + (long long)(i + 2) * N;
        double* c3 = C + (long long)(i + 3) * N;
        for (int k = 0; k < K; ++k) {
            const double* brow = B + (long long)k * N;
            const double v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
            for (int j = 0; j < N; ++j) {
                const double b = brow[j];
                c0[j] += v0 * b;
                c1[j] += v1 * b;
                c2[j] += v2 * b;
                c3[j] += v3 * b;
            }
        }
    }
    for (; i < M; ++i) {
        const double* arow = A + (long long)i * K;
        double* crow = C + (long long)i * N;
        for (int k = 0; k < K; ++k) {
            const double aik = arow[k];
            const double* brow = B + (long long)k * N;
            for (int j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

// X[r,c] -> XT[c,r]
void transpose_into(const double* X, double* XT, int rows, int cols) {
    constexpr int kBlock = 32;
    for (int i0 = 0; i0 < rows; i0 += kBlock)
        for (int j0 = 0; j0 < cols; j0 += kBlock) {
            const int i1 = std::min(i0 + kBlock, rows);
            const int j1 = std::min(j0 + kBlock, cols);
            for (int i = i0; i < i1; ++i)
                for (int j = j0; j < j1; ++j) XT[(long long)j * rows + i] = X[(long long)i * cols + j];
        }
}

// C[M,N] += A[M,L] * B[N,L]^T   (B transposed up front so the hot loop stays saxpy)
void gemm_nt(const double* A, const double* B, double* C, int M, int L, int N) {
    std::vector<double> bt(size_t(L) * N);
    transpose_into(B, bt.data(), N, L);
    gemm_nn(A, bt.data(), C, M, L, N);
}

// C[M,N] += A[L,M]^T * B[L,N]
void gemm_tn(const double* A, const double* B, double* C, int M, int L, int N) {
    std::vector<double> at(size_t(L) * M);
    transpose_into(A, at.data(), L, M);
    gemm_nn(at.data(), B, C, M, L, N);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!shape_eq(a.shape(), b.shape()))
        throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

template <class F, class DF>
Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b, F f, DF df) {
    require_same_shape(a, b, op);
    flops::add(op, a.numel());
    if (flops::count_only()) return Tensor::shell(a.shape());
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(a.values()[i], b.values()[i]);
    auto an = a.node();
    auto bn = b.node();
    return finish(op, a.shape(), std::move(out), {a, b}, [an, bn, df](TensorNode& self) {
        const bool need_a = an->requires_grad;
        const bool need_b = bn->requires_grad;
        if (need_a) an->ensure_grad();
        if (need_b) bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double da = 0, db = 0;
            df(an->values[i], bn->values[i], self.grad[i], da, db);
            if (need_a) an->grad[i] += da;
            if (need_b) bn->grad[i] += db;
        }
    });
}

template <class F, class DF>
Tensor elementwise_unary(const char* op, const Tensor& a, long long flops_per_el, F f, DF df) {
    flops::add(op, a.numel() * flops_per_el);
    if (flops::count_only()) return Tensor::shell(a.shape());
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(a.values()[i]);
    auto an = a.node();
    return finish(op, a.shape(), std::move(out), {a}, [an, df](TensorNode& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * df(an->values[i]);
    });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor add_scalar(const Tensor& a, double s) {
    flops::add("add", a.numel());
    if (flops::count_only()) return Tensor::shell(a.shape());
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + s;
    auto an = a.node();
    return finish("add_scalar", a.shape(), std::move(out), {a}, [an](TensorNode& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    flops::add("mul", a.numel());
    if (flops::count_only()) return Tensor::shell(a.shape());
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
    auto an = a.node();
    return finish("mul_scalar", a.shape(), std::move(out), {a}, [an, s](TensorNode& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
    });
}

Tensor abs_val(const Tensor& a) {
    return elementwise_unary(
        "abs", a, 1, [](double x) { return std::fabs(x); },
        [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
    return elementwise_unary(
        "square", a, 1, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor clamp01(const Tensor& a) {
    return elementwise_unary(
        "clamp", a, 1, [](double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); },
        [](double x) { return (x > 0.0 && x < 1.0) ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    flops::add("lrelu", a.numel());
    if (flops::count_only()) return Tensor::shell(a.shape());
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = a.values()[i];
        out[i] = x > 0 ? x : slope * x;
    }
    auto an = a.node();
    return finish("lrelu", a.shape(), std::move(out), {a}, [an, slope](TensorNode& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * (an->values[i] > 0 ? 1.0 : slope);
    });
}

Tensor gelu(const Tensor& a) {
    return elementwise_unary(
        "gelu", a, 5, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x) {
            return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        });
}

Tensor sigmoid(const Tensor& a) {
    flops::add("sigmoid", a.numel() * 4);
    if (flops::count_only()) return Tensor::shell(a.shape());
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = a.values()[i];
        out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    auto an = a.node();
    std::vector<double> saved = out;
    return finish("sigmoid", a.shape(), std::move(out), {a},
                  [an, saved = std::move(saved)](TensorNode& self) {
                      an->ensure_grad();
                      for (size_t i = 0; i < self.grad.size(); ++i)
                          an->grad[i] += self.grad[i] * saved[i] * (1.0 - saved[i]);
                  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw DimError("matmul: operands must be at least 2-D, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const int M = a.dim(a.ndim() - 2), K = a.dim(a.ndim() - 1);
    const int K2 = b.dim(b.ndim() - 2), N = b.dim(b.ndim() - 1);
    if (K != K2)
        throw DimError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    Shape batch;
    bool a_shared = false, b_shared = false;
    if (batch_a == batch_b) {
        batch = batch_a;
    } else if (batch_a.empty()) {
        batch = batch_b;
        a_shared = true;
    } else if (batch_b.empty()) {
        batch = batch_a;
        b_shared = true;
    } else {
        throw DimError("matmul: batch extents incompatible, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
    const long long B = shape_numel(batch);
    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(N);

    flops::add("matmul", 2LL * B * M * K * N);
    if (flops::count_only()) return Tensor::shell(out_shape);

    std::vector<double> out(size_t(B) * M * N, 0.0);
    const long long a_step = a_shared ? 0 : (long long)M * K;
    const long long b_step = b_shared ? 0 : (long long)K * N;
    for (long long bi = 0; bi < B; ++bi)
        gemm_nn(a.values().data() + bi * a_step, b.values().data() + bi * b_step,
                out.data() + bi * (long long)M * N, M, K, N);

    auto an = a.node();
    auto bn = b.node();
    return finish("matmul", out_shape, std::move(out), {a, b},
                  [an, bn, B, M, K, N, a_step, b_step](TensorNode& self) {
                      const long long c_step = (long long)M * N;
                      if (an->requires_grad) {
                          an->ensure_grad();
                          for (long long bi = 0; bi < B; ++bi)
                              gemm_nt(self.grad.data() + bi * c_step, bn->values.data() + bi * b_step,
                                      an->grad.data() + bi * a_step, M, N, K);
                      }
                      if (bn->requires_grad) {
                          bn->ensure_grad();
                          for (long long bi = 0; bi < B; ++bi)
                              gemm_tn(an->values.data() + bi * a_step, self.grad.data() + bi * c_step,
                                      bn->grad.data() + bi * b_step, K, M, N);
                      }
                  });
}

namespace {

// gather x [Cin,H,W] into col [Cin*k*k, OH*OW], zero padding
void im2col(const double* x, int Cin, int H, int W, int k, int stride, int pad, int OH, int OW,
            double* col) {
    for (int c = 0; c < Cin; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* row = col + ((long long)(c * k + ky) * k + kx) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) {
                        std::memset(row + (long long)oy * OW, 0, sizeof(double) * size_t(OW));
                        continue;
                    }
                    const double* xrow = x + ((long long)c * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        row[(long long)oy * OW + ox] = (ix < 0 || ix >= W) ? 0.0 : xrow[ix];
                    }
                }
            }
}

void col2im_accum(const double* col, int Cin, int H, int W, int k, int stride, int pad, int OH,
                  int OW, double* dx) {
    for (int c = 0; c < Cin; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* row = col + ((long long)(c * k + ky) * k + kx) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    double* xrow = dx + ((long long)c * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < W) xrow[ix] += row[(long long)oy * OW + ox];
                    }
                }
            }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw DimError("conv2d: expected x[B,Cin,H,W] and w[Cout,Cin,k,k], got " +
                       shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != Cin)
        throw DimError("conv2d: weight input channels " + std::to_string(w.dim(1)) +
                       " do not match input channels " + std::to_string(Cin));
    if (w.dim(3) != k) throw DimError("conv2d: kernel must be square, got " + shape_str(w.shape()));
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (k > H + 2 * pad || k > W + 2 * pad)
        throw DimError("conv2d: kernel " + std::to_string(k) + " exceeds padded input " +
                       shape_str(x.shape()) + " with pad " + std::to_string(pad));
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    if (OH <= 0 || OW <= 0)
        throw DimError("conv2d: non-positive output extent for input " + shape_str(x.shape()));
    const bool has_bias = bias.defined();
    if (has_bias && !(bias.ndim() == 1 && bias.dim(0) == Cout))
        throw DimError("conv2d: bias shape " + shape_str(bias.shape()) + " != [Cout]");

    flops::add("conv2d", 2LL * B * Cout * OH * OW * Cin * k * k + (has_bias ? (long long)B * Cout * OH * OW : 0));
    Shape out_shape{B, Cout, OH, OW};
    if (flops::count_only()) return Tensor::shell(out_shape);

    const int CKK = Cin * k * k;
    const long long plane = (long long)OH * OW;
    std::vector<double> col(size_t(CKK) * plane);
    std::vector<double> out(size_t(B) * Cout * plane, 0.0);
    for (int b = 0; b < B; ++b) {
        im2col(x.values().data() + (long long)b * Cin * H * W, Cin, H, W, k, stride, pad, OH, OW,
               col.data());
        gemm_nn(w.values().data(), col.data(), out.data() + (long long)b * Cout * plane, Cout, CKK,
                int(plane));
        if (has_bias)
            for (int co = 0; co < Cout; ++co) {
                double* orow = out.data() + ((long long)b * Cout + co) * plane;
                const double bv = bias.values()[size_t(co)];
                for (long long i = 0; i < plane; ++i) orow[i] += bv;
            }
    }

    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(bias);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = has_bias ? bias.node() : nullptr;
    return finish("conv2d", out_shape, std::move(out), std::move(parents),
                  [xn, wn, bn, B, Cin, H, W, Cout, k, stride, pad, OH, OW](TensorNode& self) {
                      const int CKK = Cin * k * k;
                      const long long plane = (long long)OH * OW;
                      std::vector<double> col(size_t(CKK) * plane);
                      std::vector<double> dcol;
                      if (xn->requires_grad) {
                          xn->ensure_grad();
                          dcol.resize(size_t(CKK) * plane);
                      }
                      if (wn->requires_grad) wn->ensure_grad();
                      if (bn && bn->requires_grad) bn->ensure_grad();
                      for (int b = 0; b < B; ++b) {
                          const double* g = self.grad.data() + (long long)b * Cout * plane;
                          if (wn->requires_grad || xn->requires_grad)
                              im2col(xn->values.data() + (long long)b * Cin * H * W, Cin, H, W, k,
                                     stride, pad, OH, OW, col.data());
                          if (wn->requires_grad)
                              gemm_nt(g, col.data(), wn->grad.data(), Cout, int(plane), CKK);
                          if (xn->requires_grad) {
                              std::fill(dcol.begin(), dcol.end(), 0.0);
                              gemm_tn(wn->values.data(), g, dcol.data(), CKK, Cout, int(plane));
                              col2im_accum(dcol.data(), Cin, H, W, k, stride, pad, OH, OW,
                                           xn->grad.data() + (long long)b * Cin * H * W);
                          }
                          if (bn && bn->requires_grad)
                              for (int co = 0; co < Cout; ++co) {
                                  double acc = 0.0;
                                  const double* grow = g + (long long)co * plane;
                                  for (long long i = 0; i < plane; ++i) acc += grow[i];
                                  bn->grad[size_t(co)] += acc;
                              }
                      }
                  });
}

Tensor dwconv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 3)
        throw DimError("dwconv2d: expected x[B,C,H,W] and w[C,k,k], got " + shape_str(x.shape()) +
                       " and " + shape_str(w.shape()));
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int k = w.dim(1);
    if (w.dim(0) != C || w.dim(2) != k)
        throw DimError("dwconv2d: weight shape " + shape_str(w.shape()) + " != [C,k,k]");
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    if (OH <= 0 || OW <= 0) throw DimError("dwconv2d: non-positive output extent");
    const bool has_bias = bias.defined();

    flops::add("dwconv2d", 2LL * B * C * OH * OW * k * k + (has_bias ? (long long)B * C * OH * OW : 0));
    Shape out_shape{B, C, OH, OW};
    if (flops::count_only()) return Tensor::shell(out_shape);

    std::vector<double> out(size_t(B) * C * OH * OW, 0.0);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xp = x.values().data() + ((long long)b * C + c) * H * W;
            const double* wp = w.values().data() + (long long)c * k * k;
            double* op = out.data() + ((long long)b * C + c) * OH * OW;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double acc = has_bias ? bias.values()[size_t(c)] : 0.0;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            acc += xp[(long long)iy * W + ix] * wp[ky * k + kx];
                        }
                    }
                    op[(long long)oy * OW + ox] = acc;
                }
        }

    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(bias);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = has_bias ? bias.node() : nullptr;
    return finish("dwconv2d", out_shape, std::move(out), std::move(parents),
                  [xn, wn, bn, B, C, H, W, k, stride, pad, OH, OW](TensorNode& self) {
                      if (xn->requires_grad) xn->ensure_grad();
                      if (wn->requires_grad) wn->ensure_grad();
                      if (bn && bn->requires_grad) bn->ensure_grad();
                      for (int b = 0; b < B; ++b)
                          for (int c = 0; c < C; ++c) {
                              const double* xp = xn->values.data() + ((long long)b * C + c) * H * W;
                              const double* wp = wn->values.data() + (long long)c * k * k;
                              const double* gp = self.grad.data() + ((long long)b * C + c) * OH * OW;
                              double* dxp = xn->requires_grad
                                                ? xn->grad.data() + ((long long)b * C + c) * H * W
                                                : nullptr;
                              double* dwp = wn->requires_grad ? wn->grad.data() + (long long)c * k * k
                                                              : nullptr;
                              for (int oy = 0; oy < OH; ++oy)
                                  for (int ox = 0; ox < OW; ++ox) {
                                      const double g = gp[(long long)oy * OW + ox];
                                      if (bn && bn->requires_grad) bn->grad[size_t(c)] += g;
                                      for (int ky = 0; ky < k; ++ky) {
                                          const int iy = oy * stride + ky - pad;
                                          if (iy < 0 || iy >= H) continue;
                                          for (int kx = 0; kx < k; ++kx) {
                                              const int ix = ox * stride + kx - pad;
                                              if (ix < 0 || ix >= W) continue;
                                              if (dxp) dxp[(long long)iy * W + ix] += g * wp[ky * k + kx];
                                              if (dwp) dwp[ky * k + kx] += g * xp[(long long)iy * W + ix];
                                          }
                                      }
                                  }
                          }
                  });
}

namespace {

void im2col3d(const double* x, int C, int D, int H, int W, int k, int pad, double* col) {
    // stride 1, shape preserving; col is [C*k^3, D*H*W]
    const long long plane = (long long)D * H * W;
    long long row_idx = 0;
    for (int c = 0; c < C; ++c)
        for (int kd = 0; kd < k; ++kd)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx, ++row_idx) {
                    double* row = col + row_idx * plane;
                    for (int d = 0; d < D; ++d) {
                        const int id = d + kd - pad;
                        for (int y = 0; y < H; ++y) {
                            const int iy = y + ky - pad;
                            double* dst = row + ((long long)d * H + y) * W;
                            if (id < 0 || id >= D || iy < 0 || iy >= H) {
                                std::memset(dst, 0, sizeof(double) * size_t(W));
                                continue;
                            }
                            const double* src = x + (((long long)c * D + id) * H + iy) * W;
                            for (int xw = 0; xw < W; ++xw) {
                                const int ix = xw + kx - pad;
                                dst[xw] = (ix < 0 || ix >= W) ? 0.0 : src[ix];
                            }
                        }
                    }
                }
}

void col2im3d_accum(const double* col, int C, int D, int H, int W, int k, int pad, double* dx) {
    const long long plane = (long long)D * H * W;
    long long row_idx = 0;
    for (int c = 0; c < C; ++c)
        for (int kd = 0; kd < k; ++kd)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx, ++row_idx) {
                    const double* row = col + row_idx * plane;
                    for (int d = 0; d < D; ++d) {
                        const int id = d + kd - pad;
                        if (id < 0 || id >= D) continue;
                        for (int y = 0; y < H; ++y) {
                            const int iy = y + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const double* src = row + ((long long)d * H + y) * W;
                            double* dst = dx + (((long long)c * D + id) * H + iy) * W;
                            for (int xw = 0; xw < W; ++xw) {
                                const int ix = xw + kx - pad;
                                if (ix >= 0 && ix < W) dst[ix] += src[xw];
                            }
                        }
                    }
                }
}

} // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.ndim() != 5 || w.ndim() != 5)
        throw DimError("conv3d: expected x[B,C,D,H,W] and w[Co,Ci,k,k,k], got " +
                       shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int Co = w.dim(0), Ci = w.dim(1), k = w.dim(2);
    if (Ci != C)
        throw DimError("conv3d: weight input channels " + std::to_string(Ci) + " != " +
                       std::to_string(C));
    if (w.dim(3) != k || w.dim(4) != k)
        throw DimError("conv3d: kernel must be cubic, got " + shape_str(w.shape()));
    if (k % 2 == 0) throw ConfigError("conv3d: kernel extent must be odd, got " + std::to_string(k));
    const int pad = (k - 1) / 2;
    const bool has_bias = bias.defined();
    if (has_bias && !(bias.ndim() == 1 && bias.dim(0) == Co))
        throw DimError("conv3d: bias shape " + shape_str(bias.shape()) + " != [Co]");

    const long long plane = (long long)D * H * W;
    flops::add("conv3d", 2LL * B * Co * plane * Ci * k * k * k + (has_bias ? (long long)B * Co * plane : 0));
    Shape out_shape{B, Co, D, H, W};
    if (flops::count_only()) return Tensor::shell(out_shape);

    const int CKK = Ci * k * k * k;
    std::vector<double> col(size_t(CKK) * plane);
    std::vector<double> out(size_t(B) * Co * plane, 0.0);
    for (int b = 0; b < B; ++b) {
        im2col3d(x.values().data() + (long long)b * C * plane, C, D, H, W, k, pad, col.data());
        gemm_nn(w.values().data(), col.data(), out.data() + (long long)b * Co * plane, Co, CKK,
                int(plane));
        if (has_bias)
            for (int co = 0; co < Co; ++co) {
                double* orow = out.data() + ((long long)b * Co + co) * plane;
                const double bv = bias.values()[size_t(co)];
                for (long long i = 0; i < plane; ++i) orow[i] += bv;
            }
    }

    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(bias);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = has_bias ? bias.node() : nullptr;
    return finish("conv3d", out_shape, std::move(out), std::move(parents),
                  [xn, wn, bn, B, C, D, H, W, Co, k, pad](TensorNode& self) {
                      const int CKK = C * k * k * k;
                      const long long plane = (long long)D * H * W;
                      std::vector<double> col(size_t(CKK) * plane);
                      std::vector<double> dcol;
                      if (xn->requires_grad) {
                          xn->ensure_grad();
                          dcol.resize(size_t(CKK) * plane);
                      }
                      if (wn->requires_grad) wn->ensure_grad();
                      if (bn && bn->requires_grad) bn->ensure_grad();
                      for (int b = 0; b < B; ++b) {
                          const double* g = self.grad.data() + (long long)b * Co * plane;
                          if (wn->requires_grad || xn->requires_grad)
                              im2col3d(xn->values.data() + (long long)b * C * plane, C, D, H, W, k,
                                       pad, col.data());
                          if (wn->requires_grad)
                              gemm_nt(g, col.data(), wn->grad.data(), Co, int(plane), CKK);
                          if (xn->requires_grad) {
                              std::fill(dcol.begin(), dcol.end(), 0.0);
                              gemm_tn(wn->values.data(), g, dcol.data(), CKK, Co, int(plane));
                              col2im3d_accum(dcol.data(), C, D, H, W, k, pad,
                                             xn->grad.data() + (long long)b * C * plane);
                          }
                          if (bn && bn->requires_grad)
                              for (int co = 0; co < Co; ++co) {
                                  double acc = 0.0;
                                  const double* grow = g + (long long)co * plane;
                                  for (long long i = 0; i < plane; ++i) acc += grow[i];
                                  bn->grad[size_t(co)] += acc;
                              }
                      }
                  });
}

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.ndim())
        throw DimError("softmax: axis " + std::to_string(axis) + " invalid for " +
                       shape_str(x.shape()));
    flops::add("softmax", 5 * x.numel());
    if (flops::count_only()) return Tensor::shell(x.shape());

    const auto st = strides_of(x.shape());
    const long long n = x.dim(axis), stride = st[size_t(axis)];
    const long long slices = x.numel() / n;
    std::vector<double> out(x.values().size());
    for (long long s = 0; s < slices; ++s) {
        // decompose slice index into (outer, inner)
        const long long outer = s / stride, inner = s % stride;
        const long long base = outer * n * stride + inner;
        double mx = x.values()[size_t(base)];
        for (long long i = 1; i < n; ++i) mx = std::max(mx, x.values()[size_t(base + i * stride)]);
        double denom = 0.0;
        for (long long i = 0; i < n; ++i) {
            const double e = std::exp(x.values()[size_t(base + i * stride)] - mx);
            out[size_t(base + i * stride)] = e;
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (long long i = 0; i < n; ++i) out[size_t(base + i * stride)] *= inv;
    }

    auto xn = x.node();
    std::vector<double> saved = out;
    return finish("softmax", x.shape(), std::move(out), {x},
                  [xn, saved = std::move(saved), n, stride, slices](TensorNode& self) {
                      xn->ensure_grad();
                      for (long long s = 0; s < slices; ++s) {
                          const long long outer = s / stride, inner = s % stride;
                          const long long base = outer * n * stride + inner;
                          double dot = 0.0;
                          for (long long i = 0; i < n; ++i) {
                              const size_t idx = size_t(base + i * stride);
                              dot += self.grad[idx] * saved[idx];
                          }
                          for (long long i = 0; i < n; ++i) {
                              const size_t idx = size_t(base + i * stride);
                              xn->grad[idx] += saved[idx] * (self.grad[idx] - dot);
                          }
                      }
                  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.ndim() < 1) throw DimError("layer_norm: rank-0 input");
    const int n = x.dim(x.ndim() - 1);
    if (!(gamma.ndim() == 1 && gamma.dim(0) == n) || !(beta.ndim() == 1 && beta.dim(0) == n))
        throw DimError("layer_norm: gamma/beta must be [" + std::to_string(n) + "], got " +
                       shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    flops::add("layer_norm", 5 * x.numel());
    if (flops::count_only()) return Tensor::shell(x.shape());

    const long long rows = x.numel() / n;
    std::vector<double> out(x.values().size());
    std::vector<double> xhat(x.values().size());
    auto inv_std = std::vector<double>(size_t(rows));
    for (long long r = 0; r < rows; ++r) {
        const double* xp = x.values().data() + r * n;
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += xp[i];
        mean /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) var += (xp[i] - mean) * (xp[i] - mean);
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[size_t(r)] = is;
        for (int i = 0; i < n; ++i) {
            const double h = (xp[i] - mean) * is;
            xhat[size_t(r * n + i)] = h;
            out[size_t(r * n + i)] = h * gamma.values()[size_t(i)] + beta.values()[size_t(i)];
        }
    }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return finish("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                  [xn, gn, bn, n, rows, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](TensorNode& self) {
                      if (xn->requires_grad) xn->ensure_grad();
                      if (gn->requires_grad) gn->ensure_grad();
                      if (bn->requires_grad) bn->ensure_grad();
                      for (long long r = 0; r < rows; ++r) {
                          const double* g = self.grad.data() + r * n;
                          const double* h = xhat.data() + r * n;
                          if (gn->requires_grad || bn->requires_grad)
                              for (int i = 0; i < n; ++i) {
                                  if (gn->requires_grad) gn->grad[size_t(i)] += g[i] * h[i];
                                  if (bn->requires_grad) bn->grad[size_t(i)] += g[i];
                              }
                          if (xn->requires_grad) {
                              double mean_gg = 0.0, mean_ggh = 0.0;
                              for (int i = 0; i < n; ++i) {
                                  const double gg = g[i] * gn->values[size_t(i)];
                                  mean_gg += gg;
                                  mean_ggh += gg * h[i];
                              }
                              mean_gg /= n;
                              mean_ggh /= n;
                              const double is = inv_std[size_t(r)];
                              double* dx = xn->grad.data() + r * n;
                              for (int i = 0; i < n; ++i) {
                                  const double gg = g[i] * gn->values[size_t(i)];
                                  dx[i] += is * (gg - mean_gg - h[i] * mean_ggh);
                              }
                          }
                      }
                  });
}

Tensor sum_all(const Tensor& a) {
    flops::add("sum", a.numel());
    if (flops::count_only()) return Tensor::shell({1});
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    auto an = a.node();
    return finish("sum_all", {1}, {acc}, {a}, [an](TensorNode& self) {
        an->ensure_grad();
        const double g = self.grad[0];
        for (double& d : an->grad) d += g;
    });
}

Tensor mean_spatial(const Tensor& x) {
    if (x.ndim() != 3) throw DimError("mean_spatial: expected [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0);
    const long long plane = (long long)x.dim(1) * x.dim(2);
    flops::add("mean", x.numel());
    if (flops::count_only()) return Tensor::shell({C});
    std::vector<double> out(size_t(C), 0.0);
    for (int c = 0; c < C; ++c) {
        const double* p = x.values().data() + c * plane;
        double acc = 0.0;
        for (long long i = 0; i < plane; ++i) acc += p[i];
        out[size_t(c)] = acc / double(plane);
    }
    auto xn = x.node();
    return finish("mean_spatial", {C}, std::move(out), {x}, [xn, C, plane](TensorNode& self) {
        xn->ensure_grad();
        for (int c = 0; c < C; ++c) {
            const double g = self.grad[size_t(c)] / double(plane);
            double* d = xn->grad.data() + c * plane;
            for (long long i = 0; i < plane; ++i) d[i] += g;
        }
    });
}

Tensor scale_channels(const Tensor& x, const Tensor& g) {
    if (x.ndim() != 3 || g.ndim() != 1 || g.dim(0) != x.dim(0))
        throw DimError("scale_channels: expected x[C,H,W] and g[C], got " + shape_str(x.shape()) +
                       " and " + shape_str(g.shape()));
    const int C = x.dim(0);
    const long long plane = (long long)x.dim(1) * x.dim(2);
    flops::add("mul", x.numel());
    if (flops::count_only()) return Tensor::shell(x.shape());
    std::vector<double> out(x.values().size());
    for (int c = 0; c < C; ++c) {
        const double s = g.values()[size_t(c)];
        const double* p = x.values().data() + c * plane;
        double* o = out.data() + c * plane;
        for (long long i = 0; i < plane; ++i) o[i] = p[i] * s;
    }
    auto xn = x.node();
    auto gn = g.node();
    return finish("scale_channels", x.shape(), std::move(out), {x, g},
                  [xn, gn, C, plane](TensorNode& self) {
                      if (xn->requires_grad) xn->ensure_grad();
                      if (gn->requires_grad) gn->ensure_grad();
                      for (int c = 0; c < C; ++c) {
                          const double s = gn->values[size_t(c)];
                          const double* go = self.grad.data() + c * plane;
                          if (xn->requires_grad) {
                              double* dx = xn->grad.data() + c * plane;
                              for (long long i = 0; i < plane; ++i) dx[i] += go[i] * s;
                          }
                          if (gn->requires_grad) {
                              const double* xp = xn->values.data() + c * plane;
                              double acc = 0.0;
                              for (long long i = 0; i < plane; ++i) acc += go[i] * xp[i];
                              gn->grad[size_t(c)] += acc;
                          }
                      }
                  });
}

Tensor max_all_detached(const Tensor& a) {
    flops::add("max", a.numel());
    if (flops::count_only()) return Tensor::shell({1});
    double mx = a.values().empty() ? 0.0 : a.values()[0];
    for (double v : a.values()) mx = std::max(mx, v);
    return finish("max_all", {1}, {mx}, {}, nullptr);
}

Tensor detach(const Tensor& a) {
    if (flops::count_only()) return Tensor::shell(a.shape());
    return finish("detach", a.shape(), a.values(), {}, nullptr);
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    if (flops::count_only()) return Tensor::shell(shape);
    auto an = a.node();
    return finish("reshape", std::move(shape), a.values(), {a}, [an](TensorNode& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    if (int(perm.size()) != a.ndim())
        throw DimError("permute: rank mismatch for " + shape_str(a.shape()));
    std::vector<bool> used(perm.size(), false);
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) {
        const int p = perm[i];
        if (p < 0 || p >= a.ndim() || used[size_t(p)]) throw DimError("permute: invalid permutation");
        used[size_t(p)] = true;
        out_shape[i] = a.dim(p);
    }
    if (flops::count_only()) return Tensor::shell(out_shape);

    const auto in_st = strides_of(a.shape());
    const auto out_st = strides_of(out_shape);
    const long long total = a.numel();
    const int nd = a.ndim();
    auto gather = std::vector<long long>(size_t(nd)); // stride in input for each output axis
    for (int i = 0; i < nd; ++i) gather[size_t(i)] = in_st[size_t(perm[size_t(i)])];

    auto out = std::vector<double>(size_t(total));
    auto src_index = std::vector<long long>(size_t(total));
    std::vector<int> idx(size_t(nd), 0);
    long long src = 0;
    for (long long o = 0; o < total; ++o) {
        out[size_t(o)] = a.values()[size_t(src)];
        src_index[size_t(o)] = src;
        for (int ax = nd - 1; ax >= 0; --ax) {
            if (++idx[size_t(ax)] < out_shape[size_t(ax)]) {
                src += gather[size_t(ax)];
                break;
            }
            idx[size_t(ax)] = 0;
            src -= gather[size_t(ax)] * (out_shape[size_t(ax)] - 1);
        }
    }
    auto an = a.node();
    return finish("permute", out_shape, std::move(out), {a},
                  [an, src_index = std::move(src_index)](TensorNode& self) {
                      an->ensure_grad();
                      for (size_t o = 0; o < self.grad.size(); ++o)
                          an->grad[size_t(src_index[o])] += self.grad[o];
                  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimError("concat: no inputs");
    const Tensor& first = parts[0];
    if (axis < 0 || axis >= first.ndim())
        throw DimError("concat: axis " + std::to_string(axis) + " invalid for " +
                       shape_str(first.shape()));
    Shape out_shape = first.shape();
    for (size_t i = 1; i < parts.size(); ++i) {
        const auto& s = parts[i].shape();
        if (int(s.size()) != first.ndim())
            throw DimError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(first.shape()));
        for (int d = 0; d < first.ndim(); ++d)
            if (d != axis && s[size_t(d)] != first.dim(d))
                throw DimError("concat: extent mismatch " + shape_str(s) + " vs " +
                               shape_str(first.shape()));
        out_shape[size_t(axis)] += s[size_t(axis)];
    }
    if (flops::count_only()) return Tensor::shell(out_shape);

    long long outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= first.dim(d);
    for (int d = axis + 1; d < first.ndim(); ++d) inner *= first.dim(d);
    const long long out_axis = out_shape[size_t(axis)];

    std::vector<double> out(size_t(shape_numel(out_shape)));
    long long offset = 0;
    for (const auto& p : parts) {
        const long long n_axis = p.dim(axis);
        for (long long o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * out_axis + offset) * inner,
                        p.values().data() + o * n_axis * inner, sizeof(double) * size_t(n_axis * inner));
        offset += n_axis;
    }

    std::vector<long long> axis_sizes;
    for (const auto& p : parts) axis_sizes.push_back(p.dim(axis));
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return finish("concat", out_shape, std::move(out), parts,
                  [nodes, axis_sizes, outer, inner, out_axis](TensorNode& self) {
                      long long offset = 0;
                      for (size_t pi = 0; pi < nodes.size(); ++pi) {
                          auto& pn = nodes[pi];
                          const long long n_axis = axis_sizes[pi];
                          if (pn->requires_grad) {
                              pn->ensure_grad();
                              for (long long o = 0; o < outer; ++o) {
                                  const double* g = self.grad.data() + (o * out_axis + offset) * inner;
                                  double* d = pn->grad.data() + o * n_axis * inner;
                                  for (long long i = 0; i < n_axis * inner; ++i) d[i] += g[i];
                              }
                          }
                          offset += n_axis;
                      }
                  });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
    if (axis < 0 || axis >= a.ndim())
        throw DimError("slice: axis " + std::to_string(axis) + " invalid for " + shape_str(a.shape()));
    if (start < 0 || len <= 0 || start + len > a.dim(axis))
        throw DimError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                       ") invalid for axis extent " + std::to_string(a.dim(axis)));
    Shape out_shape = a.shape();
    out_shape[size_t(axis)] = len;
    if (flops::count_only()) return Tensor::shell(out_shape);

    long long outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= a.dim(d);
    for (int d = axis + 1; d < a.ndim(); ++d) inner *= a.dim(d);
    const long long in_axis = a.dim(axis);

    std::vector<double> out(size_t(shape_numel(out_shape)));
    for (long long o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, a.values().data() + (o * in_axis + start) * inner,
                    sizeof(double) * size_t(len * inner));
    auto an = a.node();
    return finish("slice", out_shape, std::move(out), {a},
                  [an, outer, inner, in_axis, start, len](TensorNode& self) {
                      an->ensure_grad();
                      for (long long o = 0; o < outer; ++o) {
                          const double* g = self.grad.data() + o * len * inner;
                          double* d = an->grad.data() + (o * in_axis + start) * inner;
                          for (long long i = 0; i < (long long)len * inner; ++i) d[i] += g[i];
                      }
                  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    const int n = x.dim(x.ndim() - 1);
    if (b.ndim() != 1 || b.dim(0) != n)
        throw DimError("add_rowvec: bias " + shape_str(b.shape()) + " does not match last axis of " +
                       shape_str(x.shape()));
    flops::add("add", x.numel());
    if (flops::count_only()) return Tensor::shell(x.shape());
    const long long rows = x.numel() / n;
    std::vector<double> out(x.values().size());
    for (long long r = 0; r < rows; ++r)
        for (int i = 0; i < n; ++i)
            out[size_t(r * n + i)] = x.values()[size_t(r * n + i)] + b.values()[size_t(i)];
    auto xn = x.node();
    auto bn = b.node();
    return finish("add_rowvec", x.shape(), std::move(out), {x, b}, [xn, bn, rows, n](TensorNode& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (long long r = 0; r < rows; ++r)
                for (int i = 0; i < n; ++i) bn->grad[size_t(i)] += self.grad[size_t(r * n + i)];
        }
    });
}

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
    if (x.ndim() != 3) throw DimError("upsample_bilinear: expected [C,H,W], got " + shape_str(x.shape()));
    if (out_h < 1 || out_w < 1) throw DimError("upsample_bilinear: non-positive output size");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Shape out_shape{C, out_h, out_w};
    flops::add("upsample", 8LL * C * out_h * out_w);
    if (flops::count_only()) return Tensor::shell(out_shape);

    struct Tap {
        int i0, i1;
        double w1; // weight of i1; i0 gets 1-w1
    };
    auto make_taps = [](int in, int out) {
        auto taps = std::vector<Tap>(size_t(out));
        const double scale = double(in) / double(out);
        for (int o = 0; o < out; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            if (src > in - 1) src = in - 1;
            const int i0 = int(src);
            const int i1 = std::min(i0 + 1, in - 1);
            taps[size_t(o)] = {i0, i1, src - i0};
        }
        return taps;
    };
    const auto ty = make_taps(H, out_h);
    const auto tx = make_taps(W, out_w);

    std::vector<double> out(size_t(C) * out_h * out_w);
    for (int c = 0; c < C; ++c) {
        const double* xp = x.values().data() + (long long)c * H * W;
        double* op = out.data() + (long long)c * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const Tap& y = ty[size_t(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const Tap& t = tx[size_t(ox)];
                const double v00 = xp[(long long)y.i0 * W + t.i0];
                const double v01 = xp[(long long)y.i0 * W + t.i1];
                const double v10 = xp[(long long)y.i1 * W + t.i0];
                const double v11 = xp[(long long)y.i1 * W + t.i1];
                op[(long long)oy * out_w + ox] = (1 - y.w1) * ((1 - t.w1) * v00 + t.w1 * v01) +
                                                 y.w1 * ((1 - t.w1) * v10 + t.w1 * v11);
            }
        }
    }
    auto xn = x.node();
    return finish("upsample_bilinear", out_shape, std::move(out), {x},
                  [xn, ty, tx, C, H, W, out_h, out_w](TensorNode& self) {
                      xn->ensure_grad();
                      for (int c = 0; c < C; ++c) {
                          double* dx = xn->grad.data() + (long long)c * H * W;
                          const double* g = self.grad.data() + (long long)c * out_h * out_w;
                          for (int oy = 0; oy < out_h; ++oy) {
                              const Tap& y = ty[size_t(oy)];
                              for (int ox = 0; ox < out_w; ++ox) {
                                  const Tap& t = tx[size_t(ox)];
                                  const double gv = g[(long long)oy * out_w + ox];
                                  dx[(long long)y.i0 * W + t.i0] += gv * (1 - y.w1) * (1 - t.w1);
                                  dx[(long long)y.i0 * W + t.i1] += gv * (1 - y.w1) * t.w1;
                                  dx[(long long)y.i1 * W + t.i0] += gv * y.w1 * (1 - t.w1);
                                  dx[(long long)y.i1 * W + t.i1] += gv * y.w1 * t.w1;
                              }
                          }
                      }
                  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, int ignore_index) {
    if (logits.ndim() != 3)
        throw DimError("cross_entropy: expected logits [K,H,W], got " + shape_str(logits.shape()));
    const int K = logits.dim(0);
    const long long P = (long long)logits.dim(1) * logits.dim(2);
    if ((long long)labels.size() != P)
        throw DimError("cross_entropy: label count " + std::to_string(labels.size()) +
                       " does not match " + std::to_string(P) + " pixels");
    flops::add("cross_entropy", 7 * logits.numel() + P);
    if (flops::count_only()) return Tensor::shell({1});

    long long count = 0;
    double total = 0.0;
    std::vector<double> probs(logits.values().size());
    for (long long p = 0; p < P; ++p) {
        const int y = labels[size_t(p)];
        if (y == ignore_index) continue;
        if (y < 0 || y >= K)
            throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                            std::to_string(K) + ")");
        double mx = logits.values()[size_t(p)];
        for (int k = 1; k < K; ++k) mx = std::max(mx, logits.values()[size_t(k * P + p)]);
        double denom = 0.0;
        for (int k = 0; k < K; ++k) denom += std::exp(logits.values()[size_t(k * P + p)] - mx);
        const double lse = mx + std::log(denom);
        for (int k = 0; k < K; ++k)
            probs[size_t(k * P + p)] = std::exp(logits.values()[size_t(k * P + p)] - lse);
        total += lse - logits.values()[size_t(y * P + p)];
        ++count;
    }
    if (count == 0) throw DataError("cross_entropy: degenerate batch, all pixels ignored");

    auto ln = logits.node();
    auto labels_copy = labels;
    return finish("cross_entropy", {1}, {total / double(count)}, {logits},
                  [ln, probs = std::move(probs), labels_copy = std::move(labels_copy), K, P, count,
                   ignore_index](TensorNode& self) {
                      ln->ensure_grad();
                      const double g = self.grad[0] / double(count);
                      for (long long p = 0; p < P; ++p) {
                          const int y = labels_copy[size_t(p)];
                          if (y == ignore_index) continue;
                          for (int k = 0; k < K; ++k)
                              ln->grad[size_t(k * P + p)] +=
                                  g * (probs[size_t(k * P + p)] - (k == y ? 1.0 : 0.0));
                      }
                  });
}

} // namespace oaf
