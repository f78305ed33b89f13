#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "oaf/tensor.hpp"

using namespace oaf;
using namespace oaf::testing;

TEST_SUITE("matmul") {
    TEST_CASE("identity") {
        Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
        Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
        Tensor c = matmul(eye, b);
        for (int i = 0; i < 4; ++i) CHECK(c.values()[size_t(i)] == b.values()[size_t(i)]);
    }
    TEST_CASE("hand arithmetic and flop tally") {
        FlopCounter counter;
        flops::CountGuard guard(&counter);
        Tensor a = Tensor::from({1, 2}, {1, 2});
        Tensor b = Tensor::from({2, 1}, {3, 4});
        Tensor c = matmul(a, b);
        CHECK(c.item() == doctest::Approx(11.0));
        CHECK(counter.total() == 4);
    }
    TEST_CASE("batched against per-slice products") {
        Rng rng(3);
        Tensor a = rand_tensor({3, 2, 4}, rng);
        Tensor b = rand_tensor({3, 4, 5}, rng);
        Tensor c = matmul(a, b);
        for (int s = 0; s < 3; ++s) {
            Tensor as = reshape(slice(a, 0, s, 1), {2, 4});
            Tensor bs = reshape(slice(b, 0, s, 1), {4, 5});
            Tensor cs = matmul(as, bs);
            for (int i = 0; i < 10; ++i)
                CHECK(c.values()[size_t(s * 10 + i)] ==
                      doctest::Approx(cs.values()[size_t(i)]).epsilon(1e-12));
        }
    }
    TEST_CASE("gradient vs finite differences") {
        Rng rng(7);
        Tensor a = rand_tensor({3, 5}, rng);
        Tensor b = rand_tensor({5, 2}, rng);
        Rng wr(11);
        auto fwd = [&] {
            Rng w = wr;
            return weighted_sum(matmul(a, b), w);
        };
        CHECK(gradcheck(fwd, {a, b}) <= 1e-6);
    }
    TEST_CASE("batched gradient with a shared operand") {
        Rng rng(77);
        Tensor a = rand_tensor({2, 3, 4}, rng);
        Tensor b = rand_tensor({4, 2}, rng);
        Rng wr(79);
        auto fwd = [&] {
            Rng w = wr;
            return weighted_sum(matmul(a, b), w);
        };
        CHECK(gradcheck(fwd, {a, b}) <= 1e-6);
    }
    TEST_CASE("shape mismatch names both shapes") {
        Tensor a = Tensor::zeros({2, 3});
        Tensor b = Tensor::zeros({4, 2});
        try {
            matmul(a, b);
            FAIL("expected DimError");
        } catch (const DimError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("[2,3]") != std::string::npos);
            CHECK(msg.find("[4,2]") != std::string::npos);
        }
    }
}

TEST_SUITE("conv2d") {
    TEST_CASE("all ones") {
        Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
        Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
        Tensor y = conv2d(x, w, Tensor(), 1, 0);
        CHECK(shape_eq(y.shape(), {1, 1, 1, 1}));
        CHECK(y.values()[0] == doctest::Approx(9.0));
    }
    TEST_CASE("shape and flop formula") {
        FlopCounter counter;
        flops::CountGuard guard(&counter);
        Rng rng(1);
        Tensor x = rand_tensor({1, 3, 8, 8}, rng, -1, 1, false);
        Tensor w = rand_tensor({4, 3, 3, 3}, rng, -1, 1, false);
        Tensor b = rand_tensor({4}, rng, -1, 1, false);
        Tensor y = conv2d(x, w, b, 2, 1);
        CHECK(shape_eq(y.shape(), {1, 4, 4, 4}));
        // 2*B*Cout*H'*W'*Cin*k^2 plus one add per output element for the bias
        CHECK(counter.total() == 3456 + 64);
    }
    TEST_CASE("matches the nested-loop reference") {
        Rng rng(5);
        for (int trial = 0; trial < 8; ++trial) {
            const int B = 1 + int(rng.uniform_int(2));
            const int Cin = 1 + int(rng.uniform_int(3));
            const int Cout = 1 + int(rng.uniform_int(3));
            const int H = 3 + int(rng.uniform_int(5)); // up to 7
            const int W = 3 + int(rng.uniform_int(5));
            const int k = 1 + 2 * int(rng.uniform_int(2)); // 1 or 3
            const int stride = 1 + int(rng.uniform_int(2));
            const int pad = int(rng.uniform_int(2));
            Tensor x = rand_tensor({B, Cin, H, W}, rng, -2, 2, false);
            Tensor w = rand_tensor({Cout, Cin, k, k}, rng, -2, 2, false);
            Tensor b = rand_tensor({Cout}, rng, -2, 2, false);
            int OH, OW;
            auto ref = naive_conv2d(x.values(), B, Cin, H, W, w.values(), Cout, k, b.values(),
                                    stride, pad, OH, OW);
            Tensor y = conv2d(x, w, b, stride, pad);
            REQUIRE(shape_eq(y.shape(), {B, Cout, OH, OW}));
            for (size_t i = 0; i < ref.size(); ++i)
                CHECK(std::fabs(y.values()[i] - ref[i]) <= 1e-10);
        }
    }
    TEST_CASE("gradient vs finite differences") {
        Rng rng(9);
        Tensor x = rand_tensor({1, 2, 5, 5}, rng);
        Tensor w = rand_tensor({3, 2, 3, 3}, rng);
        Tensor b = rand_tensor({3}, rng);
        Rng wr(13);
        auto fwd = [&] {
            Rng wcopy = wr;
            return weighted_sum(conv2d(x, w, b, 2, 1), wcopy);
        };
        CHECK(gradcheck(fwd, {x, w, b}) <= 1e-5);
    }
    TEST_CASE("depthwise gradient vs finite differences") {
        Rng rng(10);
        Tensor x = rand_tensor({1, 3, 4, 4}, rng);
        Tensor w = rand_tensor({3, 3, 3}, rng);
        Tensor b = rand_tensor({3}, rng);
        Rng wr(15);
        auto fwd = [&] {
            Rng wcopy = wr;
            return weighted_sum(dwconv2d(x, w, b, 1, 1), wcopy);
        };
        CHECK(gradcheck(fwd, {x, w, b}) <= 1e-5);
    }
    TEST_CASE("non-positive output extent") {
        Tensor x = Tensor::zeros({1, 1, 2, 2});
        Tensor w = Tensor::zeros({1, 1, 5, 5});
        CHECK_THROWS_AS(conv2d(x, w, Tensor(), 1, 0), DimError);
    }
}

TEST_SUITE("conv3d") {
    TEST_CASE("delta kernel is identity") {
        Rng rng(2);
        const int C = 2, D = 2, H = 3, W = 3;
        Tensor x = rand_tensor({1, C, D, H, W}, rng, -1, 1, false);
        std::vector<double> wv(size_t(C) * C * 27, 0.0);
        for (int c = 0; c < C; ++c)
            wv[(((size_t(c) * C + size_t(c)) * 3 + 1) * 3 + 1) * 3 + 1] = 1.0;
        Tensor w = Tensor::from({C, C, 3, 3, 3}, std::move(wv));
        Tensor y = conv3d(x, w, Tensor());
        for (size_t i = 0; i < x.values().size(); ++i)
            CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-14));
    }
    TEST_CASE("all-ones kernel counts in-bounds neighbours") {
        Tensor x = Tensor::full({1, 1, 2, 2, 2}, 1.0);
        Tensor w = Tensor::full({1, 1, 3, 3, 3}, 1.0);
        Tensor y = conv3d(x, w, Tensor());
        // every voxel of a 2x2x2 cube has exactly 8 in-bounds neighbours
        for (double v : y.values()) CHECK(v == doctest::Approx(8.0));
    }
    TEST_CASE("matches the nested-loop reference") {
        Rng rng(6);
        for (int trial = 0; trial < 4; ++trial) {
            const int C = 1 + int(rng.uniform_int(3));
            const int D = 2 + int(rng.uniform_int(2));
            const int H = 2 + int(rng.uniform_int(4));
            const int W = 2 + int(rng.uniform_int(4));
            Tensor x = rand_tensor({1, C, D, H, W}, rng, -2, 2, false);
            Tensor w = rand_tensor({C, C, 3, 3, 3}, rng, -2, 2, false);
            Tensor b = rand_tensor({C}, rng, -2, 2, false);
            auto ref = naive_conv3d(x.values(), 1, C, D, H, W, w.values(), 3, b.values());
            Tensor y = conv3d(x, w, b);
            for (size_t i = 0; i < ref.size(); ++i)
                CHECK(std::fabs(y.values()[i] - ref[i]) <= 1e-10);
        }
    }
    TEST_CASE("flop formula") {
        FlopCounter counter;
        flops::CountGuard guard(&counter);
        Tensor x = Tensor::zeros({1, 2, 2, 3, 3});
        Tensor w = Tensor::zeros({2, 2, 3, 3, 3});
        conv3d(x, w, Tensor());
        CHECK(counter.total() == 2LL * 1 * 2 * (2 * 3 * 3) * 2 * 27);
    }
    TEST_CASE("gradient vs finite differences") {
        Rng rng(8);
        Tensor x = rand_tensor({1, 2, 2, 3, 3}, rng);
        Tensor w = rand_tensor({2, 2, 3, 3, 3}, rng, -0.5, 0.5);
        Tensor b = rand_tensor({2}, rng);
        Rng wr(17);
        auto fwd = [&] {
            Rng wcopy = wr;
            return weighted_sum(conv3d(x, w, b), wcopy);
        };
        CHECK(gradcheck(fwd, {x, w, b}) <= 1e-5);
    }
    TEST_CASE("even kernel rejected") {
        Tensor x = Tensor::zeros({1, 1, 2, 2, 2});
        Tensor w = Tensor::zeros({1, 1, 2, 2, 2});
        CHECK_THROWS_AS(conv3d(x, w, Tensor()), ConfigError);
    }
}

TEST_SUITE("softmax") {
    TEST_CASE("symmetry") {
        Tensor y = softmax(Tensor::from({3}, {0, 0, 0}), 0);
        for (double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3));
    }
    TEST_CASE("stable under large inputs") {
        Tensor y = softmax(Tensor::from({2}, {1000, 1000}), 0);
        CHECK(y.values()[0] == doctest::Approx(0.5));
        CHECK(y.values()[1] == doctest::Approx(0.5));
    }
    TEST_CASE("closed form") {
        Tensor y = softmax(Tensor::from({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}), 0);
        CHECK(y.values()[0] == doctest::Approx(1.0 / 6).epsilon(1e-12));
        CHECK(y.values()[1] == doctest::Approx(2.0 / 6).epsilon(1e-12));
        CHECK(y.values()[2] == doctest::Approx(3.0 / 6).epsilon(1e-12));
    }
    TEST_CASE("sums to one along the axis within 1e-12") {
        Rng rng(4);
        Tensor x = rand_tensor({3, 5, 4}, rng, -30, 30, false);
        for (int axis = 0; axis < 3; ++axis) {
            Tensor y = softmax(x, axis);
            const auto& s = y.shape();
            const int n = s[size_t(axis)];
            long long outer = 1, inner = 1;
            for (int d = 0; d < axis; ++d) outer *= s[size_t(d)];
            for (int d = axis + 1; d < 3; ++d) inner *= s[size_t(d)];
            for (long long o = 0; o < outer; ++o)
                for (long long in = 0; in < inner; ++in) {
                    double acc = 0;
                    for (int i = 0; i < n; ++i) acc += y.values()[size_t((o * n + i) * inner + in)];
                    CHECK(std::fabs(acc - 1.0) <= 1e-12);
                }
        }
    }
    TEST_CASE("gradient vs finite differences") {
        Rng rng(12);
        Tensor x = rand_tensor({2, 4}, rng, -2, 2);
        Rng wr(19);
        auto fwd = [&] {
            Rng wcopy = wr;
            return weighted_sum(softmax(x, 1), wcopy);
        };
        CHECK(gradcheck(fwd, {x}) <= 1e-5);
    }
}

TEST_SUITE("layer_norm") {
    TEST_CASE("constant token collapses to beta") {
        Tensor y = layer_norm(Tensor::from({3}, {5, 5, 5}), Tensor::full({3}, 1.0),
                              Tensor::full({3}, 0.0));
        for (double v : y.values()) CHECK(std::fabs(v) <= 1e-9);
    }
    TEST_CASE("two-point analytic case") {
        Tensor y = layer_norm(Tensor::from({2}, {1, 3}), Tensor::full({2}, 1.0),
                              Tensor::full({2}, 0.0));
        CHECK(y.values()[0] == doctest::Approx(-1.0).epsilon(1e-5));
        CHECK(y.values()[1] == doctest::Approx(1.0).epsilon(1e-5));
    }
    TEST_CASE("affine collapse") {
        Rng rng(3);
        Tensor x = rand_tensor({4, 3}, rng, -5, 5, false);
        Tensor y = layer_norm(x, Tensor::full({3}, 0.0), Tensor::full({3}, 7.0));
        for (double v : y.values()) CHECK(v == doctest::Approx(7.0));
    }
    TEST_CASE("gradient vs finite differences") {
        Rng rng(14);
        Tensor x = rand_tensor({3, 4}, rng, -2, 2);
        Tensor g = rand_tensor({4}, rng, 0.5, 1.5);
        Tensor b = rand_tensor({4}, rng, -0.5, 0.5);
        Rng wr(23);
        auto fwd = [&] {
            Rng wcopy = wr;
            return weighted_sum(layer_norm(x, g, b), wcopy);
        };
        CHECK(gradcheck(fwd, {x, g, b}) <= 1e-5);
    }
}

TEST_SUITE("backward") {
    TEST_CASE("sum gives ones") {
        Tensor x = Tensor::from({3}, {1, 2, 3}, true);
        backward(sum_all(x));
        for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
    }
    TEST_CASE("quadratic derivative") {
        Tensor x = Tensor::from({3}, {1, 2, 3}, true);
        backward(sum_all(mul(x, x)));
        CHECK(x.grad()[0] == doctest::Approx(2.0));
        CHECK(x.grad()[1] == doctest::Approx(4.0));
        CHECK(x.grad()[2] == doctest::Approx(6.0));
    }
    TEST_CASE("repeated calls accumulate until cleared") {
        Tensor x = Tensor::from({2}, {1, 1}, true);
        Tensor l = sum_all(x);
        backward(l);
        backward(l);
        CHECK(x.grad()[0] == doctest::Approx(2.0));
        x.zero_grad();
        backward(l);
        CHECK(x.grad()[0] == doctest::Approx(1.0));
    }
    TEST_CASE("non-scalar loss rejected") {
        Tensor x = Tensor::zeros({2, 2}, true);
        CHECK_THROWS_AS(backward(add(x, x)), UsageError);
    }
}

TEST_SUITE("elementwise and shape ops") {
    TEST_CASE("unary gradients vs finite differences") {
        Rng rng(21);
        Tensor x = rand_tensor({2, 3}, rng, 0.2, 2.0); // away from abs/clamp kinks
        Rng wr(29);
        auto check_unary = [&](Tensor (*op)(const Tensor&)) {
            auto fwd = [&] {
                Rng wcopy = wr;
                return weighted_sum(op(x), wcopy);
            };
            return gradcheck(fwd, {x});
        };
        CHECK(check_unary(+[](const Tensor& t) { return abs_val(t); }) <= 1e-5);
        CHECK(check_unary(+[](const Tensor& t) { return square(t); }) <= 1e-5);
        CHECK(check_unary(+[](const Tensor& t) { return gelu(t); }) <= 1e-5);
        CHECK(check_unary(+[](const Tensor& t) { return sigmoid(t); }) <= 1e-5);
        CHECK(check_unary(+[](const Tensor& t) { return leaky_relu(t, 0.01); }) <= 1e-5);
        CHECK(check_unary(+[](const Tensor& t) { return mul_scalar(t, 0.37); }) <= 1e-5);
        CHECK(check_unary(+[](const Tensor& t) { return add_scalar(t, -1.2); }) <= 1e-5);
    }
    TEST_CASE("binary gradients vs finite differences") {
        Rng rng(22);
        Tensor x = rand_tensor({2, 3}, rng);
        Tensor y = rand_tensor({2, 3}, rng);
        Rng wr(30);
        auto fwd = [&] {
            Rng wcopy = wr;
            return weighted_sum(mul(sub(x, y), add(x, y)), wcopy);
        };
        CHECK(gradcheck(fwd, {x, y}) <= 1e-5);
    }
    TEST_CASE("permute, concat, slice gradients") {
        Rng rng(31);
        Tensor a = rand_tensor({2, 3, 4}, rng);
        Tensor b = rand_tensor({2, 1, 4}, rng);
        Rng wr(37);
        auto fwd = [&] {
            Rng wcopy = wr;
            Tensor cat = concat({a, b}, 1);
            Tensor p = permute(cat, {2, 0, 1});
            Tensor s = slice(p, 0, 1, 2);
            return weighted_sum(s, wcopy);
        };
        CHECK(gradcheck(fwd, {a, b}) <= 1e-5);
    }
    TEST_CASE("upsample and channel ops gradients") {
        Rng rng(41);
        Tensor x = rand_tensor({2, 3, 3}, rng);
        Tensor g = rand_tensor({2}, rng, 0.5, 1.5);
        Rng wr(43);
        auto fwd = [&] {
            Rng wcopy = wr;
            Tensor up = upsample_bilinear(x, 5, 7);
            return weighted_sum(scale_channels(up, g), wcopy);
        };
        CHECK(gradcheck(fwd, {x, g}) <= 1e-5);
        auto fwd2 = [&] {
            Rng wcopy = wr;
            return weighted_sum(mean_spatial(x), wcopy);
        };
        CHECK(gradcheck(fwd2, {x}) <= 1e-5);
        Tensor b = rand_tensor({3}, rng);
        auto fwd3 = [&] {
            Rng wcopy = wr;
            return weighted_sum(add_rowvec(reshape(x, {6, 3}), b), wcopy);
        };
        CHECK(gradcheck(fwd3, {x, b}) <= 1e-5);
    }
    TEST_CASE("constant input upsampling stays constant") {
        Tensor x = Tensor::full({2, 3, 3}, 1.75);
        Tensor y = upsample_bilinear(x, 8, 5);
        for (double v : y.values()) CHECK(v == doctest::Approx(1.75).epsilon(1e-14));
    }
    TEST_CASE("clamp01 passes gradient only strictly inside") {
        Tensor x = Tensor::from({3}, {-0.5, 0.5, 1.5}, true);
        backward(sum_all(clamp01(x)));
        CHECK(x.grad()[0] == 0.0);
        CHECK(x.grad()[1] == 1.0);
        CHECK(x.grad()[2] == 0.0);
    }
    TEST_CASE("overflow is an error, not silent") {
        Tensor w = Tensor::from({1}, {1e308});
        CHECK_THROWS_AS(mul(w, w), NumericError);
        // stable ops survive extreme but finite inputs
        CHECK_NOTHROW(sigmoid(Tensor::from({1}, {710.0})));
    }
}

TEST_SUITE("cross_entropy") {
    TEST_CASE("uniform logits give ln K") {
        Tensor logits = Tensor::zeros({4, 2, 2});
        std::vector<int> labels{0, 1, 2, 3};
        CHECK(cross_entropy(logits, labels).item() == doctest::Approx(std::log(4.0)));
    }
    TEST_CASE("perfect margin drives loss to zero monotonically") {
        std::vector<int> labels{1};
        double prev = 1e9;
        for (double m : {1.0, 4.0, 16.0, 64.0}) {
            Tensor logits = Tensor::from({2, 1, 1}, {0.0, m});
            const double l = cross_entropy(logits, labels).item();
            CHECK(l < prev);
            prev = l;
        }
        CHECK(prev <= 1e-20);
    }
    TEST_CASE("matches a scalar loop oracle") {
        Rng rng(51);
        Tensor logits = rand_tensor({3, 4, 4}, rng, -3, 3, false);
        std::vector<int> labels(16);
        for (auto& l : labels) l = int(rng.uniform_int(4)) == 3 ? 255 : int(rng.uniform_int(3));
        double expected = 0;
        long long count = 0;
        const long long P = 16;
        for (long long p = 0; p < P; ++p) {
            if (labels[size_t(p)] == 255) continue;
            double denom = 0;
            for (int k = 0; k < 3; ++k) denom += std::exp(logits.values()[size_t(k * P + p)]);
            expected += std::log(denom) - logits.values()[size_t(labels[size_t(p)] * P + p)];
            ++count;
        }
        expected /= double(count);
        CHECK(std::fabs(cross_entropy(logits, labels).item() - expected) <= 1e-10);
    }
    TEST_CASE("gradient vs finite differences") {
        Rng rng(53);
        Tensor logits = rand_tensor({3, 2, 2}, rng, -2, 2);
        std::vector<int> labels{0, 2, 255, 1};
        auto fwd = [&] { return cross_entropy(logits, labels); };
        CHECK(gradcheck(fwd, {logits}) <= 1e-5);
    }
    TEST_CASE("all-ignored batch rejected") {
        Tensor logits = Tensor::zeros({2, 1, 2});
        std::vector<int> labels{255, 255};
        CHECK_THROWS_AS(cross_entropy(logits, labels), DataError);
    }
}

TEST_SUITE("flop accounting") {
    TEST_CASE("empty trace totals zero") {
        FlopCounter counter;
        CHECK(flop_report(counter).total == 0);
    }
    TEST_CASE("single matmul") {
        FlopCounter counter;
        {
            flops::CountGuard guard(&counter);
            matmul(Tensor::zeros({2, 3}), Tensor::zeros({3, 4}));
        }
        FlopReport report = flop_report(counter);
        CHECK(report.total == 48);
        REQUIRE(report.rows.size() == 1);
        CHECK(report.rows[0].label == "matmul");
    }
    TEST_CASE("deterministic, additive, value independent") {
        auto trace = [&](double scale) {
            FlopCounter counter;
            flops::CountGuard guard(&counter);
            Rng local(99);
            Tensor x = rand_tensor({2, 3, 6, 6}, local, -scale, scale, false);
            Tensor w = rand_tensor({4, 3, 3, 3}, local, -scale, scale, false);
            Tensor y = conv2d(x, w, Tensor(), 1, 1);
            softmax(reshape(y, {4, 72}), 1);
            return counter;
        };
        FlopCounter a = trace(1.0);
        FlopCounter b = trace(123.0);
        CHECK(a.total() == b.total());
        CHECK(a.per_op() == b.per_op());

        FlopCounter c;
        {
            flops::CountGuard guard(&c);
            matmul(Tensor::zeros({2, 3}), Tensor::zeros({3, 4}));
        }
        const long long first = c.total();
        {
            flops::CountGuard guard(&c);
            matmul(Tensor::zeros({5, 3}), Tensor::zeros({3, 2}));
        }
        CHECK(c.total() == first + 60);
    }
    TEST_CASE("count-only shells record the same tallies") {
        auto run = [&](bool shells) {
            FlopCounter counter;
            flops::CountGuard guard(&counter, shells);
            Tensor x = shells ? Tensor::shell({1, 2, 6, 6}) : Tensor::zeros({1, 2, 6, 6});
            Tensor w = shells ? Tensor::shell({3, 2, 3, 3}) : Tensor::zeros({3, 2, 3, 3});
            Tensor y = conv2d(x, w, Tensor(), 2, 1);
            softmax(reshape(y, {3, 9}), 1);
            return counter;
        };
        FlopCounter a = run(false);
        FlopCounter b = run(true);
        CHECK(a.total() == b.total());
        CHECK(a.per_op() == b.per_op());
    }
    TEST_CASE("scope labels compose") {
        FlopCounter counter;
        {
            flops::CountGuard guard(&counter);
            flops::Scope s1("safm.s1");
            matmul(Tensor::zeros({2, 2}), Tensor::zeros({2, 2}));
        }
        CHECK(counter.per_op().count("safm.s1.matmul") == 1);
    }
}
