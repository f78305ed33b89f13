#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "oaf/safm.hpp"

using namespace oaf;
using namespace oaf::safm;
using namespace oaf::testing;

namespace {

StageParams stage1_params(Rng& rng, int channels = 8) {
    StageParams p;
    p.center_w = rand_tensor({channels, 3, 7, 7}, rng, -0.2, 0.2);
    p.center_b = rand_tensor({channels}, rng, -0.1, 0.1);
    p.center_stride = 4;
    p.center_pad = 3;
    p.sai_w = rand_tensor({channels, 3, 7, 7}, rng, -0.2, 0.2);
    p.sai_b = rand_tensor({channels}, rng, -0.1, 0.1);
    p.sai_stride = 4;
    p.sai_pad = 3;
    return p;
}

} // namespace

TEST_SUITE("safm embeddings") {
    TEST_CASE("stage-1 stem maps 3x64x64 to Cx16x16") {
        Rng rng(1);
        StageParams p = stage1_params(rng, 64);
        Tensor x = rand_tensor({3, 64, 64}, rng, 0, 1, false);
        Tensor f = embed_center(x, p);
        CHECK(shape_eq(f.shape(), {64, 16, 16}));
        CHECK(shape_eq(embed_sai(x, p).shape(), {64, 16, 16}));
    }
    TEST_CASE("zero input and zero bias give zero output") {
        Rng rng(2);
        StageParams p = stage1_params(rng);
        p.center_b = Tensor::zeros({8}, true);
        Tensor f = embed_center(Tensor::zeros({3, 16, 16}), p);
        for (double v : f.values()) CHECK(v == 0.0);
    }
    TEST_CASE("per-view stem cost follows the analytic conv formula") {
        Rng rng(3);
        StageParams p = stage1_params(rng);
        Tensor x = rand_tensor({3, 32, 32}, rng, 0, 1, false);
        FlopCounter counter;
        {
            flops::CountGuard guard(&counter);
            embed_sai(x, p);
        }
        // 2*C*H'*W'*3*7^2 + bias C*H'*W' at H'=W'=8, C=8
        CHECK(counter.total() == 2LL * 8 * 8 * 8 * 3 * 49 + 8LL * 8 * 8);
    }
    TEST_CASE("identical SAIs share one stem and embed bit-identically") {
        Rng rng(4);
        StageParams p = stage1_params(rng);
        Tensor a = rand_tensor({3, 16, 16}, rng, 0, 1, false);
        Tensor b = Tensor::from(a.shape(), a.values());
        CHECK(embed_sai(a, p).values() == embed_sai(b, p).values());
    }
    TEST_CASE("channel mismatch is a dimension error") {
        Rng rng(5);
        StageParams p = stage1_params(rng);
        CHECK_THROWS_AS(embed_center(Tensor::zeros({4, 16, 16}), p), DimError);
    }
}

TEST_SUITE("pixel and mask scores") {
    TEST_CASE("identical features score zero") {
        Rng rng(6);
        Tensor f = rand_tensor({4, 3, 3}, rng);
        Tensor e = pixel_score(f, f);
        for (double v : e.values()) CHECK(v == 0.0);
    }
    TEST_CASE("hand arithmetic and symmetry") {
        Tensor a = Tensor::from({2}, {1, -2});
        Tensor b = Tensor::from({2}, {3, 1});
        Tensor e = pixel_score(a, b);
        CHECK(e.values()[0] == doctest::Approx(2.0));
        CHECK(e.values()[1] == doctest::Approx(3.0));
        CHECK(pixel_score(b, a).values() == e.values());
    }
    TEST_CASE("zero distance maps to full weight") {
        Tensor t = mask_score(Tensor::zeros({3, 2, 2}));
        for (double v : t.values()) CHECK(v == doctest::Approx(1.0));
    }
    TEST_CASE("closed form of the max-normalized inversion") {
        const double m = 2.5, eps = 1e-6;
        Tensor t = mask_score(Tensor::from({2}, {0.0, m}), eps);
        const double t0 = std::pow(1.0 - 0.0 / (m + eps), 2.0);
        const double t1 = std::pow(1.0 - m / (m + eps), 2.0);
        CHECK(t.values()[0] == doctest::Approx(t0).epsilon(1e-12));
        CHECK(t.values()[1] == doctest::Approx(t1).epsilon(1e-12));
        CHECK(t.values()[0] > 0.999999);
        CHECK(t.values()[1] < 1e-10);
    }
    TEST_CASE("scores always land in [0,1]") {
        Rng rng(7);
        for (int trial = 0; trial < 20; ++trial) {
            Tensor e = abs_val(rand_tensor({3, 4, 4}, rng, -5, 5, false));
            Tensor t = mask_score(e);
            for (double v : t.values()) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
    }
    TEST_CASE("novelty direction inverts the weighting") {
        Tensor e = Tensor::from({2}, {0.0, 2.0});
        Tensor t = mask_score(e, 1e-6, /*trust=*/false);
        CHECK(t.values()[0] == doctest::Approx(0.0));
        CHECK(t.values()[1] > 0.999);
    }
    TEST_CASE("negative pixel score is an internal invariant violation") {
        CHECK_THROWS_AS(mask_score(Tensor::from({2}, {-1.0, 0.5})), NumericError);
    }
    TEST_CASE("monotone attenuation at the maximal deviation") {
        // growing one view's deviation never raises its mask weight at the arg-max
        Rng rng(8);
        Tensor base = abs_val(rand_tensor({2, 3, 3}, rng, 0.1, 1.0, false));
        double prev = 2.0;
        for (double scale : {1.0, 1.5, 2.5, 4.0}) {
            Tensor e = mul_scalar(base, scale);
            size_t argmax = 0;
            for (size_t i = 0; i < e.values().size(); ++i)
                if (e.values()[i] > e.values()[argmax]) argmax = i;
            const double t = mask_score(e).values()[argmax];
            CHECK(t <= prev + 1e-12);
            prev = t;
        }
    }
    TEST_CASE("gradient flows through everything except the detached max") {
        Rng rng(9);
        Tensor center = rand_tensor({2, 3, 3}, rng);
        Tensor sai = rand_tensor({2, 3, 3}, rng);
        Rng wr(10);
        auto fwd = [&] {
            Rng wcopy = wr;
            Tensor e = pixel_score(center, sai);
            Tensor t = mask_score(e);
            return weighted_sum(aggregate_angular(center, {sai}, {t}), wcopy);
        };
        center.zero_grad();
        sai.zero_grad();
        Tensor l = fwd();
        backward(l);
        std::vector<double> ana_c = center.grad(), ana_s = sai.grad();
        // arg-max of |center - sai| carries the detached normalizer
        size_t argmax = 0;
        {
            Tensor e = pixel_score(center, sai);
            for (size_t i = 0; i < e.values().size(); ++i)
                if (e.values()[i] > e.values()[argmax]) argmax = i;
        }
        auto probe = [&](Tensor& t, const std::vector<double>& analytic) {
            auto& vals = t.mutable_values();
            for (size_t i = 0; i < vals.size(); ++i) {
                if (i == argmax) continue;
                const double orig = vals[i];
                const double h = 1e-6 * std::max(1.0, std::fabs(orig));
                double fp, fm;
                {
                    NoGradGuard ng;
                    vals[i] = orig + h;
                    fp = fwd().item();
                    vals[i] = orig - h;
                    fm = fwd().item();
                    vals[i] = orig;
                }
                const double numeric = (fp - fm) / (2 * h);
                CHECK(std::fabs(numeric - analytic[i]) /
                          std::max({std::fabs(numeric), std::fabs(analytic[i]), 1e-6}) <=
                      1e-4);
            }
        };
        probe(center, ana_c);
        probe(sai, ana_s);
    }
}

TEST_SUITE("angular aggregation") {
    TEST_CASE("empty view set returns the center feature") {
        Rng rng(11);
        Tensor center = rand_tensor({4, 2, 2}, rng, -1, 1, false);
        Tensor out = aggregate_angular(center, {}, {});
        CHECK(out.values() == center.values());
    }
    TEST_CASE("identical views with unit scores give (N+1) times the center") {
        Rng rng(12);
        Tensor center = rand_tensor({4, 2, 2}, rng, -1, 1, false);
        std::vector<Tensor> sais(3, Tensor::from(center.shape(), center.values()));
        std::vector<Tensor> scores(3, Tensor::full(center.shape(), 1.0));
        Tensor out = aggregate_angular(center, sais, scores);
        for (size_t i = 0; i < out.values().size(); ++i)
            CHECK(out.values()[i] == doctest::Approx(4.0 * center.values()[i]).epsilon(1e-12));
    }
    TEST_CASE("matches a scalar loop oracle") {
        Rng rng(13);
        Tensor center = rand_tensor({3, 4, 4}, rng, -1, 1, false);
        std::vector<Tensor> sais, scores;
        for (int i = 0; i < 3; ++i) {
            sais.push_back(rand_tensor({3, 4, 4}, rng, -1, 1, false));
            scores.push_back(rand_tensor({3, 4, 4}, rng, 0, 1, false));
        }
        Tensor out = aggregate_angular(center, sais, scores);
        for (size_t j = 0; j < out.values().size(); ++j) {
            double expected = center.values()[j];
            for (int i = 0; i < 3; ++i) expected += scores[size_t(i)].values()[j] * sais[size_t(i)].values()[j];
            CHECK(std::fabs(out.values()[j] - expected) <= 1e-10);
        }
    }
    TEST_CASE("length mismatch rejected") {
        Tensor center = Tensor::zeros({2, 2, 2});
        CHECK_THROWS_AS(aggregate_angular(center, {center}, {}), DimError);
    }
}

TEST_SUITE("safm forward") {
    TEST_CASE("identical stems and identical views collapse to (N+1) x stem(center)") {
        Rng rng(14);
        StageParams p = stage1_params(rng);
        // test-harness-identical center/SAI stems
        p.center_w = Tensor::from(p.sai_w.shape(), p.sai_w.values(), true);
        p.center_b = Tensor::from(p.sai_b.shape(), p.sai_b.values(), true);
        Tensor img = rand_tensor({3, 32, 32}, rng, 0, 1, false);
        std::vector<Tensor> sais(5, Tensor::from(img.shape(), img.values()));
        auto [f_spl, f_agl] = safm_forward(img, sais, p);
        for (size_t i = 0; i < f_agl.values().size(); ++i)
            CHECK(std::fabs(f_agl.values()[i] - 6.0 * f_spl.values()[i]) <= 1e-10);
    }
    TEST_CASE("marginal per-view cost is constant in N") {
        Rng rng(15);
        StageParams p = stage1_params(rng);
        Tensor img = rand_tensor({3, 32, 32}, rng, 0, 1, false);
        auto cost = [&](int n) {
            FlopCounter counter;
            flops::CountGuard guard(&counter);
            std::vector<Tensor> sais;
            for (int i = 0; i < n; ++i) sais.push_back(Tensor::from(img.shape(), img.values()));
            safm_forward(img, sais, p);
            return counter.total();
        };
        const long long c0 = cost(0), c1 = cost(1), c4 = cost(4), c8 = cost(8);
        const long long marginal = c1 - c0;
        CHECK(c4 - c0 == 4 * marginal);
        CHECK(c8 - c0 == 8 * marginal);
    }
    TEST_CASE("stem comparison mode scores against the raw-center stem") {
        Rng rng(16);
        StageParams p = stage1_params(rng);
        p.compare_deep = false;
        Tensor img = rand_tensor({3, 32, 32}, rng, 0, 1, false);
        std::vector<Tensor> sais{Tensor::from(img.shape(), img.values())};
        // identical raw images through the shared stem -> e == 0 -> t == 1
        auto [f_spl, f_agl] = safm_forward(img, sais, p, img);
        Tensor stem = embed_sai(img, p);
        for (size_t i = 0; i < f_agl.values().size(); ++i)
            CHECK(std::fabs(f_agl.values()[i] - (f_spl.values()[i] + stem.values()[i])) <= 1e-12);
        CHECK_THROWS_AS(safm_forward(img, sais, p), ConfigError); // raw center missing
    }
}
