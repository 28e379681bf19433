#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "porl/grad_check.hpp"
#include "porl/optim.hpp"
#include "porl/rng.hpp"
#include "porl/tensor.hpp"

using namespace porl;
using ad::Tensor;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values()) v = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("matmul forward") {
    SECTION("identity times M returns M") {
        Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
        Tensor m = Tensor::from({2, 2}, {3.5, -1, 2, 7});
        Tensor c = ad::matmul(id, m);
        for (std::size_t i = 0; i < 4; ++i) REQUIRE(c.values()[i] == m.values()[i]);
    }
    SECTION("hand-checked 2x2 by 2x1") {
        Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
        Tensor b = Tensor::from({2, 1}, {1, 1});
        Tensor c = ad::matmul(a, b);
        REQUIRE(c.at(0, 0) == 3.0);
        REQUIRE(c.at(1, 0) == 7.0);
    }
    SECTION("shape mismatch names both shapes") {
        Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
        Tensor b = Tensor::from({2, 2}, {1, 2, 3, 4});
        REQUIRE_THROWS_WITH(ad::matmul(a, b),
                            Catch::Matchers::ContainsSubstring("[2x3]") &&
                                Catch::Matchers::ContainsSubstring("[2x2]"));
    }
}

TEST_CASE("matmul gradients match finite differences") {
    Rng rng(11);
    Tensor b = random_tensor({3, 4}, rng);
    auto f = [&](const Tensor& a) { return ad::sum(ad::matmul(a, b)); };
    Tensor a = random_tensor({2, 3}, rng);
    REQUIRE(ad::grad_check(f, a, 1e-5) < 1e-6);

    Tensor a2 = random_tensor({2, 3}, rng);
    auto g = [&](const Tensor& bb) { return ad::sum(ad::matmul(a2, bb)); };
    REQUIRE(ad::grad_check(g, random_tensor({3, 4}, rng), 1e-5) < 1e-6);

    auto h = [&](const Tensor& x) { return ad::sum(ad::matmul_nt(x, random_tensor({5, 3}, rng))); };
    // matmul_nt with a fixed right operand
    Tensor fixed = random_tensor({5, 3}, rng);
    auto h2 = [&](const Tensor& x) { return ad::sum(ad::matmul_nt(x, fixed)); };
    REQUIRE(ad::grad_check(h2, random_tensor({2, 3}, rng), 1e-5) < 1e-6);
}

TEST_CASE("elementwise basics") {
    SECTION("tanh at zero") {
        Tensor x = Tensor::scalar(0.0);
        REQUIRE(ad::tanh(x).value() == 0.0);
        auto f = [](const Tensor& t) { return ad::sum(ad::tanh(t)); };
        ad::Tape tape;
        ad::TapeScope scope(tape);
        Tensor xx = Tensor::scalar(0.0);
        xx.set_requires_grad(true);
        tape.backward(f(xx));
        REQUIRE(xx.grad()[0] == 1.0);
    }
    SECTION("sigmoid at zero") { REQUIRE(ad::sigmoid(Tensor::scalar(0.0)).value() == 0.5); }
    SECTION("tanh gradient vs finite differences") {
        Rng rng(3);
        auto f = [](const Tensor& t) { return ad::sum(ad::tanh(t)); };
        REQUIRE(ad::grad_check(f, random_tensor({4, 4}, rng), 1e-5) < 1e-6);
    }
    SECTION("log rejects the nonpositive domain") {
        REQUIRE_THROWS_AS(ad::log(Tensor::scalar(-1.0)), std::domain_error);
        REQUIRE_THROWS_AS(ad::log(Tensor::scalar(0.0)), std::domain_error);
    }
    SECTION("exp overflow is a numeric-domain error") {
        REQUIRE_THROWS_AS(ad::exp(Tensor::scalar(1e6)), std::domain_error);
    }
    SECTION("scalar broadcasting") {
        Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
        Tensor s = Tensor::scalar(10.0);
        Tensor c = ad::mul(a, s);
        REQUIRE(c.at(1, 1) == 40.0);
        Tensor d = ad::add(s, a);
        REQUIRE(d.at(0, 0) == 11.0);
    }
}

TEST_CASE("masked_softmax") {
    SECTION("symmetric logits, none invalid") {
        Tensor out = ad::masked_softmax(Tensor::from({2}, {5, 5}), {0, 0});
        REQUIRE(out.values()[0] == Catch::Approx(0.5).margin(1e-15));
        REQUIRE(out.values()[1] == Catch::Approx(0.5).margin(1e-15));
    }
    SECTION("single valid position wins regardless of logits") {
        Tensor out = ad::masked_softmax(Tensor::from({2}, {0, 100}), {0, 1});
        REQUIRE(out.values()[0] == 1.0);
        REQUIRE(out.values()[1] == 0.0);
    }
    SECTION("matches direct exp/normalize to 1e-12") {
        Tensor out = ad::masked_softmax(Tensor::from({3}, {1, 2, 3}), {0, 0, 0});
        double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
        for (int i = 0; i < 3; ++i)
            REQUIRE(out.values()[i] == Catch::Approx(std::exp(i + 1.0) / z).margin(1e-12));
    }
    SECTION("valid outputs sum to one within 1e-12, invalid are exactly zero") {
        Rng rng(17);
        for (int trial = 0; trial < 50; ++trial) {
            std::size_t n = 1 + rng.below(8);
            Tensor logits = random_tensor({n}, rng, 3.0);
            std::vector<std::uint8_t> invalid(n, 1);
            invalid[rng.below(n)] = 0;
            for (auto& b : invalid)
                if (rng.uniform01() < 0.5) b = 0;
            Tensor out = ad::masked_softmax(logits, invalid);
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (invalid[i])
                    REQUIRE(out.values()[i] == 0.0);
                else
                    s += out.values()[i];
            }
            REQUIRE(std::abs(s - 1.0) < 1e-12);
        }
    }
    SECTION("all positions invalid is an error") {
        REQUIRE_THROWS_WITH(ad::masked_softmax(Tensor::from({2}, {0, 0}), {1, 1}),
                            Catch::Matchers::ContainsSubstring("empty context"));
    }
    SECTION("gradient vs finite differences") {
        Rng rng(23);
        std::vector<std::uint8_t> invalid = {0, 1, 0, 0, 1};
        auto f = [&](const Tensor& t) {
            Tensor sm = ad::masked_softmax(t, invalid);
            // weighted sum keeps the reduction non-trivial
            return ad::sum(ad::mul(sm, sm));
        };
        REQUIRE(ad::grad_check(f, random_tensor({5}, rng), 1e-5) < 1e-6);
    }
}

TEST_CASE("grad_check itself") {
    SECTION("closed-form quadratic") {
        auto f = [](const Tensor& x) { return ad::sum(ad::mul(x, x)); };
        Tensor x = Tensor::from({2}, {1, 2});
        // analytic gradient is [2, 4]
        ad::Tape tape;
        {
            ad::TapeScope scope(tape);
            x.set_requires_grad(true);
            tape.backward(f(x));
        }
        REQUIRE(x.grad()[0] == Catch::Approx(2.0).margin(1e-12));
        REQUIRE(x.grad()[1] == Catch::Approx(4.0).margin(1e-12));
        x.set_requires_grad(false);
        REQUIRE(ad::grad_check(f, x, 1e-5) < 1e-8);
    }
    SECTION("constant function has zero error") {
        auto f = [](const Tensor&) { return Tensor::scalar(3.0); };
        REQUIRE(ad::grad_check(f, Tensor::from({3}, {1, 2, 3}), 1e-5) == 0.0);
    }
    SECTION("eps outside the allowed range") {
        auto f = [](const Tensor& x) { return ad::sum(x); };
        REQUIRE_THROWS_AS(ad::grad_check(f, Tensor::scalar(1.0), 1e-2), std::invalid_argument);
    }
}

TEST_CASE("random ops pass grad_check at 1e-5") {
    Rng rng(101);
    int trials = 0;
    while (trials < 100) {
        std::size_t r = 1 + rng.below(8), c = 1 + rng.below(8);
        Tensor x = random_tensor({r, c}, rng);
        int which = static_cast<int>(rng.below(6));
        std::function<Tensor(const Tensor&)> f;
        switch (which) {
            case 0: f = [](const Tensor& t) { return ad::sum(ad::tanh(t)); }; break;
            case 1: f = [](const Tensor& t) { return ad::sum(ad::sigmoid(t)); }; break;
            case 2:
                // keep away from the relu kink
                for (auto& v : x.values())
                    if (std::abs(v) < 1e-2) v += 0.1;
                f = [](const Tensor& t) { return ad::sum(ad::relu(t)); };
                break;
            case 3:
                f = [](const Tensor& t) { return ad::sum(ad::exp(ad::scale(t, 0.3))); };
                break;
            case 4:
                for (auto& v : x.values()) v = std::abs(v) + 0.5;
                f = [](const Tensor& t) { return ad::sum(ad::log(t)); };
                break;
            default: {
                Tensor w = random_tensor({c, 3}, rng);
                f = [w](const Tensor& t) { return ad::sum(ad::tanh(ad::matmul(t, w))); };
            }
        }
        REQUIRE(ad::grad_check(f, x, 1e-5) < 1e-5);
        ++trials;
    }
}

TEST_CASE("three-layer composition gradients") {
    Rng rng(55);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor w1 = random_tensor({4, 6}, rng);
        Tensor w2 = random_tensor({6, 5}, rng);
        Tensor w3 = random_tensor({5, 2}, rng);
        auto f = [&](const Tensor& x) {
            Tensor h1 = ad::tanh(ad::matmul(x, w1));
            Tensor h2 = ad::sigmoid(ad::matmul(h1, w2));
            return ad::sum(ad::matmul(h2, w3));
        };
        REQUIRE(ad::grad_check(f, random_tensor({3, 4}, rng), 1e-5) < 1e-5);
    }
}

TEST_CASE("broadcast and structural ops gradients") {
    Rng rng(77);
    Tensor m = random_tensor({4, 5}, rng);
    Tensor v = random_tensor({5}, rng);
    Tensor cv = random_tensor({4}, rng);

    auto f1 = [&](const Tensor& t) { return ad::sum(ad::mul(ad::add_rowvec(t, v), t)); };
    REQUIRE(ad::grad_check(f1, m, 1e-5) < 1e-6);

    auto f2 = [&](const Tensor& t) { return ad::sum(ad::mul_rowvec(m, t)); };
    REQUIRE(ad::grad_check(f2, v, 1e-5) < 1e-6);

    auto f3 = [&](const Tensor& t) { return ad::sum(ad::tanh(ad::mul_colvec(t, cv))); };
    REQUIRE(ad::grad_check(f3, m, 1e-5) < 1e-6);

    auto f4 = [&](const Tensor& t) { return ad::sum(ad::mul(ad::sum_rows(t), ad::sum_rows(t))); };
    REQUIRE(ad::grad_check(f4, m, 1e-5) < 1e-6);

    Tensor gain = random_tensor({5}, rng);
    Tensor bias = random_tensor({5}, rng);
    auto f5 = [&](const Tensor& t) {
        return ad::sum(ad::mul(ad::layer_norm(t, gain, bias), m));
    };
    REQUIRE(ad::grad_check(f5, random_tensor({4, 5}, rng), 1e-5) < 1e-5);

    auto f6 = [&](const Tensor& t) {
        return ad::sum(ad::mul(ad::log_softmax_rows(t), m));
    };
    REQUIRE(ad::grad_check(f6, random_tensor({4, 5}, rng), 1e-5) < 1e-5);

    std::vector<int> idx = {1, 0, 3, 2};
    auto f7 = [&](const Tensor& t) { return ad::sum(ad::gather_cols(ad::tanh(t), idx)); };
    REQUIRE(ad::grad_check(f7, random_tensor({4, 5}, rng), 1e-5) < 1e-6);

    auto f8 = [&](const Tensor& t) {
        return ad::sum(ad::minimum(t, ad::scale(t, 0.5)));
    };
    REQUIRE(ad::grad_check(f8, random_tensor({4, 5}, rng), 1e-5) < 1e-6);

    auto f9 = [&](const Tensor& t) {
        Tensor a = ad::tanh(t);
        Tensor b = ad::sigmoid(t);
        return ad::sum(ad::mul(ad::stack_rows({a, b}), ad::stack_rows({m, m})));
    };
    REQUIRE(ad::grad_check(f9, random_tensor({4, 5}, rng), 1e-5) < 1e-5);
}

TEST_CASE("fused attention ops gradients") {
    Rng rng(99);
    const std::size_t L = 4, d = 6, B = 2;
    std::vector<std::uint8_t> invalid(B * L, 0);
    invalid[2] = invalid[3] = 1;  // pad the first window's tail
    Tensor k = random_tensor({B * L, d}, rng);
    Tensor v = random_tensor({B * L, d}, rng);
    Tensor probe = random_tensor({B * L, d}, rng);

    auto fq = [&](const Tensor& q) {
        return ad::sum(ad::mul(ad::masked_attention(q, k, v, L, 2, invalid), probe));
    };
    REQUIRE(ad::grad_check(fq, random_tensor({B * L, d}, rng), 1e-5) < 1e-5);

    Tensor q2 = random_tensor({B * L, d}, rng);
    auto fk = [&](const Tensor& kk) {
        return ad::sum(ad::mul(ad::masked_attention(q2, kk, v, L, 2, invalid), probe));
    };
    REQUIRE(ad::grad_check(fk, random_tensor({B * L, d}, rng), 1e-5) < 1e-5);

    auto fv = [&](const Tensor& vv) {
        return ad::sum(ad::mul(ad::masked_attention(q2, k, vv, L, 2, invalid), probe));
    };
    REQUIRE(ad::grad_check(fv, random_tensor({B * L, d}, rng), 1e-5) < 1e-5);

    Tensor pool_probe = random_tensor({B, d}, rng);
    Tensor h = random_tensor({B * L, d}, rng);
    Tensor e = random_tensor({B * L, 1}, rng);
    auto fh = [&](const Tensor& hh) {
        return ad::sum(ad::mul(ad::attention_pool(hh, e, L, invalid), pool_probe));
    };
    REQUIRE(ad::grad_check(fh, h, 1e-5) < 1e-5);
    auto fe = [&](const Tensor& ee) {
        return ad::sum(ad::mul(ad::attention_pool(h, ee, L, invalid), pool_probe));
    };
    REQUIRE(ad::grad_check(fe, e, 1e-5) < 1e-5);
}

TEST_CASE("adam_step") {
    AdamConfig cfg;
    cfg.lr = 0.1;
    SECTION("zero gradient leaves parameters unchanged") {
        std::vector<double> p = {1.0, -2.0}, g = {0.0, 0.0}, m(2, 0.0), v(2, 0.0);
        adam_step(p, g, m, v, cfg, 1, "p");
        REQUIRE(p[0] == 1.0);
        REQUIRE(p[1] == -2.0);
    }
    SECTION("hand-evaluated first step") {
        std::vector<double> p = {0.5}, g = {1.0}, m(1, 0.0), v(1, 0.0);
        adam_step(p, g, m, v, cfg, 1, "p");
        // bias-corrected mhat = 1, vhat = 1 at t=1, so delta = lr/(1+eps)
        const double expected = 0.5 - 0.1 * (1.0 / (1.0 + cfg.eps));
        REQUIRE(p[0] == Catch::Approx(expected).margin(1e-12));
    }
    SECTION("second identical gradient moves less than lr") {
        std::vector<double> p = {0.0}, g = {1.0}, m(1, 0.0), v(1, 0.0);
        adam_step(p, g, m, v, cfg, 1, "p");
        const double step1 = std::abs(p[0]);
        const double before = p[0];
        adam_step(p, g, m, v, cfg, 2, "p");
        const double step2 = std::abs(p[0] - before);
        REQUIRE(step1 <= cfg.lr + 1e-12);
        REQUIRE(step2 < cfg.lr);
    }
    SECTION("non-finite gradient is rejected with the parameter name") {
        std::vector<double> p = {0.0}, g = {std::nan("")}, m(1, 0.0), v(1, 0.0);
        REQUIRE_THROWS_WITH(adam_step(p, g, m, v, cfg, 1, "actor.w"),
                            Catch::Matchers::ContainsSubstring("actor.w"));
    }
}

TEST_CASE("clip_global_norm") {
    auto make_params = [](std::vector<double> g1) {
        std::vector<NamedTensor> ps;
        Tensor t = Tensor::zeros({g1.size()}, true);
        t.grad() = g1;
        ps.push_back({"p", t});
        return ps;
    };
    SECTION("below threshold is untouched") {
        auto ps = make_params({0.15, 0.2});
        clip_global_norm(ps, 0.5);
        REQUIRE(ps[0].tensor.grad()[0] == 0.15);
        REQUIRE(ps[0].tensor.grad()[1] == 0.2);
    }
    SECTION("hand-checked rescale") {
        auto ps = make_params({3.0, 4.0});
        const double norm = clip_global_norm(ps, 0.5);
        REQUIRE(norm == Catch::Approx(5.0));
        REQUIRE(ps[0].tensor.grad()[0] == Catch::Approx(0.3).margin(1e-12));
        REQUIRE(ps[0].tensor.grad()[1] == Catch::Approx(0.4).margin(1e-12));
    }
    SECTION("post-clip norm never exceeds the bound") {
        Rng rng(5);
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<double> g(1 + rng.below(6));
            for (auto& x : g) x = rng.normal(0, 3);
            auto ps = make_params(g);
            clip_global_norm(ps, 0.5);
            double sq = 0.0;
            for (double x : ps[0].tensor.grad()) sq += x * x;
            REQUIRE(std::sqrt(sq) <= 0.5 + 1e-12);
        }
    }
}

TEST_CASE("tape replay and determinism") {
    SECTION("backward visits each record once and accumulates into leaves") {
        ad::Tape tape;
        Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
        {
            ad::TapeScope scope(tape);
            Tensor y = ad::mul(x, x);
            Tensor z = ad::add(y, x);
            tape.backward(ad::sum(z));
        }
        // d/dx (x^2 + x) = 2x + 1
        REQUIRE(x.grad()[0] == Catch::Approx(3.0));
        REQUIRE(x.grad()[1] == Catch::Approx(5.0));
    }
    SECTION("no recording without an active tape") {
        Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
        Tensor y = ad::mul(x, x);
        REQUIRE_FALSE(y.requires_grad());
    }
    SECTION("dropout is reproducible from its seed") {
        Tensor x = Tensor::full({64}, 1.0);
        Rng r1(42), r2(42);
        Tensor a = ad::dropout(x, 0.3, r1, true);
        Tensor b = ad::dropout(x, 0.3, r2, true);
        REQUIRE(a.values() == b.values());
        Rng r3(43);
        Tensor c = ad::dropout(x, 0.3, r3, false);
        REQUIRE(c.values() == x.values());
    }
}
