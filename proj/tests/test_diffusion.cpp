#include <doctest.h>

#include <cmath>

#include "pivm/diffusion.hpp"
#include "support.hpp"

using namespace pivm;
using namespace pivm::diffusion;
using testing::kind_of;

namespace {

Field constant(int w, int h, float v) { return Field(w, h, v); }

Conditioning label_only(int w, int h) { return Conditioning{Field(w, h, 0.0f), std::nullopt, std::nullopt}; }

struct ZeroModel final : EpsModel {
    Field predict(const Field& x, int, const Conditioning&) const override { return Field(x.width, x.height, 0.0f); }
    Recorded record(const Field& x, int t, const Conditioning& c) const override { return {predict(x, t, c), {}}; }
};

struct NanModel final : EpsModel {
    Field predict(const Field& x, int, const Conditioning&) const override { return Field(x.width, x.height, NAN); }
    Recorded record(const Field& x, int t, const Conditioning& c) const override { return {predict(x, t, c), {}}; }
};

// Knows the clean signal, so it can return the exact injected noise.
struct OracleModel final : EpsModel {
    Field x0;
    const NoiseSchedule* s = nullptr;
    Field predict(const Field& x, int t, const Conditioning&) const override {
        Field e(x.width, x.height);
        for (std::size_t i = 0; i < x.size(); ++i)
            e[i] = static_cast<float>((x[i] - s->sqrt_alpha_bar[t] * x0[i]) / s->sqrt_one_minus_alpha_bar[t]);
        return e;
    }
    Recorded record(const Field& x, int t, const Conditioning& c) const override { return {predict(x, t, c), {}}; }
};

// E[eps | x_t] when every pixel of x0 is N(m, v).
struct GaussianOptimal final : EpsModel {
    double m = 0, v = 1;
    const NoiseSchedule* s = nullptr;
    Field predict(const Field& x, int t, const Conditioning&) const override {
        const double a = s->sqrt_alpha_bar[t], b = s->sqrt_one_minus_alpha_bar[t];
        Field e(x.width, x.height);
        for (std::size_t i = 0; i < x.size(); ++i) e[i] = static_cast<float>(b * (x[i] - a * m) / (a * a * v + b * b));
        return e;
    }
    Recorded record(const Field& x, int t, const Conditioning& c) const override { return {predict(x, t, c), {}}; }
};

// eps_hat = a * x + b * label + c, with analytic parameter gradients.
struct MicroNet final : EpsModel {
    nn::ParamSet<float> p;
    MicroNet(float a, float b, float c) {
        p.names = {"a", "b", "c"};
        for (float v : {a, b, c}) p.tensors.push_back(nn::Tensor<float>(1, 1, 1, v));
    }
    float at(int i) const { return p.tensors[static_cast<std::size_t>(i)].data[0]; }
    Field predict(const Field& x, int, const Conditioning& c) const override {
        Field e(x.width, x.height);
        for (std::size_t i = 0; i < x.size(); ++i)
            e[i] = static_cast<float>(static_cast<double>(at(0)) * x[i] + static_cast<double>(at(1)) * c.label[i] + at(2));
        return e;
    }
    Recorded record(const Field& x, int t, const Conditioning& c) const override {
        Recorded r{predict(x, t, c), {}};
        r.backward = [this, x, label = c.label](const Field& g) {
            auto out = p.zeros_like();
            double ga = 0, gb = 0, gc = 0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga += static_cast<double>(g[i]) * x[i];
                gb += static_cast<double>(g[i]) * label[i];
                gc += g[i];
            }
            out.tensors[0].data[0] = static_cast<float>(ga);
            out.tensors[1].data[0] = static_cast<float>(gb);
            out.tensors[2].data[0] = static_cast<float>(gc);
            return out;
        };
        return r;
    }
};

}  // namespace

TEST_CASE("schedule hand examples") {
    const auto one = linear_schedule(1, 1e-4, 0.02);
    CHECK(one.beta[1] == 1e-4);
    CHECK(one.alpha_bar[1] == 1.0 - 1e-4);
    CHECK(one.alpha_bar[0] == 1.0);

    const auto two = linear_schedule(2, 0.1, 0.2);
    CHECK(two.beta[1] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(two.beta[2] == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(two.alpha_bar[1] == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(two.alpha_bar[2] == doctest::Approx(0.72).epsilon(1e-15));
    CHECK(two.posterior_variance[2] == doctest::Approx(0.2 * 0.1 / 0.28).epsilon(1e-14));
}

TEST_CASE("default schedule matches a log-domain recomputation") {
    const auto s = linear_schedule(200);
    double log_sum = 0;
    for (int t = 1; t <= 200; ++t) {
        const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 199.0;
        CHECK(s.beta[t] == doctest::Approx(beta).epsilon(1e-14));
        log_sum += std::log1p(-beta);
    }
    CHECK(std::abs(s.alpha_bar[200] - std::exp(log_sum)) <= 1e-10 * std::exp(log_sum));
    for (int t = 1; t <= 200; ++t) {
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        CHECK(s.beta[t] >= s.beta[t - 1]);
        CHECK(s.posterior_variance[t] >= 0.0);
        CHECK(std::isfinite(s.sqrt_one_minus_alpha_bar[t]));
    }
}

TEST_CASE("schedule bounds are validated") {
    CHECK(kind_of([] { linear_schedule(0); }) == ErrorKind::config);
    CHECK(kind_of([] { linear_schedule(10, 0.0, 0.02); }) == ErrorKind::config);
    CHECK(kind_of([] { linear_schedule(10, 0.03, 0.02); }) == ErrorKind::config);
    CHECK(kind_of([] { linear_schedule(10, 0.1, 1.0); }) == ErrorKind::config);
}

TEST_CASE("forward sample closed form") {
    const auto s = linear_schedule(50);
    Field x0(8, 8);
    for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = static_cast<float>(i) / 10.0f - 3.0f;
    const auto eps = standard_normal_field(8, 8, {1, 2});
    CHECK(forward_sample(x0, 0, eps, s) == x0);
    const auto z = forward_sample(x0, 17, constant(8, 8, 0.0f), s);
    for (std::size_t i = 0; i < x0.size(); ++i) CHECK(z[i] == static_cast<float>(s.sqrt_alpha_bar[17] * x0[i]));
    CHECK(kind_of([&] { forward_sample(x0, 51, eps, s); }) == ErrorKind::config);
    CHECK(kind_of([&] { forward_sample(x0, -1, eps, s); }) == ErrorKind::config);
    CHECK(kind_of([&] { forward_sample(x0, 3, Field(8, 7), s); }) == ErrorKind::shape);
}

TEST_CASE("forward sample Monte Carlo moments") {
    const auto s = linear_schedule(200);
    const int t = 60, n = 100;
    const Field x0 = constant(n, n, 0.7f);
    const auto x = forward_sample(x0, t, standard_normal_field(n, n, {3, 3}), s);
    double m = 0, v = 0;
    for (float e : x.data) m += e;
    m /= x.size();
    for (float e : x.data) v += (e - m) * (e - m);
    v /= (x.size() - 1);
    const double var = 1.0 - s.alpha_bar[t];
    const double N = static_cast<double>(x.size());
    CHECK(std::abs(m - s.sqrt_alpha_bar[t] * 0.7) < 3.0 * std::sqrt(var / N));
    CHECK(std::abs(v - var) < 3.0 * var * std::sqrt(2.0 / (N - 1)));
}

TEST_CASE("reverse step: t = 1 adds no noise and t > 1 requires it") {
    const auto s = linear_schedule(5);
    const auto x = standard_normal_field(4, 4, {1, 1});
    const auto e = standard_normal_field(4, 4, {1, 2});
    const auto z = standard_normal_field(4, 4, {1, 3});
    CHECK(reverse_step(x, 1, e, s, nullptr) == reverse_step(x, 1, e, s, &z));
    CHECK(kind_of([&] { reverse_step(x, 2, e, s, nullptr); }) == ErrorKind::config);
    CHECK(kind_of([&] { reverse_step(x, 0, e, s, &z); }) == ErrorKind::config);
}

TEST_CASE("scalar two-step reverse matches a hand calculation") {
    const auto s = linear_schedule(2, 0.1, 0.2);
    const float x2 = 0.8f, eh = -0.3f, zz = 1.25f;
    const double beta = 0.2, alpha = 0.8, abar2 = 0.72, abar1 = 0.9;
    const double sigma = std::sqrt(beta * (1 - abar1) / (1 - abar2));
    const double expect = (x2 - beta / std::sqrt(1 - abar2) * eh) / std::sqrt(alpha) + sigma * zz;
    const Field z = constant(1, 1, zz);
    const float got = reverse_step(constant(1, 1, x2), 2, constant(1, 1, eh), s, &z)[0];
    // Exact up to the final rounding of the float32 output.
    CHECK(std::abs(got - expect) <= 1e-12 + std::abs(expect) * 0x1p-24);
    CHECK(static_cast<float>(expect) == got);
}

TEST_CASE("reversing a recorded four-step forward chain recovers x0") {
    const auto s = linear_schedule(4, 0.05, 0.3);
    const int w = 6, h = 5;
    Field x0(w, h);
    Rng rng(4, 4);
    for (auto& v : x0.data) v = static_cast<float>(rng.normal(0, 2));

    // Forward chain x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) n_t, in double.
    std::vector<std::vector<double>> chain(5, std::vector<double>(x0.size()));
    for (std::size_t i = 0; i < x0.size(); ++i) chain[0][i] = x0[i];
    for (int t = 1; t <= 4; ++t)
        for (std::size_t i = 0; i < x0.size(); ++i)
            chain[t][i] = std::sqrt(s.alpha[t]) * chain[t - 1][i] + std::sqrt(s.beta[t]) * rng.normal();

    Field x(w, h);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(chain[4][i]);
    for (int t = 4; t >= 1; --t) {
        // True eps given x0, and the z that moves the posterior mean onto the recorded x_{t-1}.
        Field eps(w, h), z(w, h);
        const double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1];
        for (std::size_t i = 0; i < x.size(); ++i) {
            eps[i] = static_cast<float>((x[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1 - ab));
            const double mean = std::sqrt(abp) * s.beta[t] / (1 - ab) * x0[i] +
                                std::sqrt(s.alpha[t]) * (1 - abp) / (1 - ab) * x[i];
            const double sigma = std::sqrt(s.beta[t] * (1 - abp) / (1 - ab));
            z[i] = t > 1 ? static_cast<float>((chain[t - 1][i] - mean) / sigma) : 0.0f;
        }
        x = reverse_step(x, t, eps, s, t > 1 ? &z : nullptr);
    }
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(x[i] - x0[i]) <= 1e-3);
}

TEST_CASE("training loss oracles") {
    const auto s = linear_schedule(200, 5e-4, 0.1);
    std::vector<TrainingExample> batch;
    Rng rng(2, 2);
    for (int b = 0; b < 4; ++b) {
        Field x0(32, 32);
        for (auto& v : x0.data) v = static_cast<float>(rng.normal());
        batch.push_back({x0, label_only(32, 32)});
    }
    const auto zero = training_loss(ZeroModel{}, batch, s, {1, 1});
    CHECK(std::abs(zero.loss - 1.0) < 4.0 * std::sqrt(2.0 / (4 * 32 * 32)));
    CHECK(zero.grads.size() == 0);

    for (std::size_t b = 0; b < batch.size(); ++b) {
        OracleModel m;
        m.x0 = batch[b].target;
        m.s = &s;
        const auto r = training_loss(m, std::span(batch).subspan(b, 1), s, StreamKey{1, 1}.child(b));
        CHECK(r.loss < 1e-8);
    }
    CHECK(kind_of([&] { training_loss(NanModel{}, batch, s, {1, 1}); }) == ErrorKind::divergence);
    CHECK(kind_of([&] { training_loss(ZeroModel{}, {}, s, {1, 1}); }) == ErrorKind::config);
    auto mixed = batch;
    mixed[1].target = Field(16, 16);
    mixed[1].cond = label_only(16, 16);
    CHECK(kind_of([&] { training_loss(ZeroModel{}, mixed, s, {1, 1}); }) == ErrorKind::shape);
}

TEST_CASE("training loss gradient matches central differences on a micro-net") {
    const auto s = linear_schedule(50, 1e-3, 0.2);
    std::vector<TrainingExample> batch;
    Rng rng(6, 6);
    for (int b = 0; b < 3; ++b) {
        Field x0(8, 8), lab(8, 8);
        for (auto& v : x0.data) v = static_cast<float>(rng.normal());
        for (auto& v : lab.data) v = static_cast<float>(rng.below(9)) / 9.0f;
        batch.push_back({x0, Conditioning{lab, std::nullopt, std::nullopt}});
    }
    const float base[3] = {0.3f, -0.5f, 0.2f};
    const StreamKey key{8, 8};
    const auto r = training_loss(MicroNet(base[0], base[1], base[2]), batch, s, key);
    REQUIRE(r.grads.size() == 3);
    for (int i = 0; i < 3; ++i) {
        const float h = 1e-3f;
        float up[3] = {base[0], base[1], base[2]}, dn[3] = {base[0], base[1], base[2]};
        up[i] += h;
        dn[i] -= h;
        const double lp = training_loss(MicroNet(up[0], up[1], up[2]), batch, s, key).loss;
        const double lm = training_loss(MicroNet(dn[0], dn[1], dn[2]), batch, s, key).loss;
        const double fd = (lp - lm) / (static_cast<double>(up[i]) - dn[i]);
        const double g = r.grads.tensors[static_cast<std::size_t>(i)].data[0];
        CHECK(std::abs(fd - g) <= 1e-3 * std::max(std::abs(g), 1e-3));
    }
    // Thread count does not change the reduction.
    const auto r4 = training_loss(MicroNet(base[0], base[1], base[2]), batch, s, key, 4);
    CHECK(r4.loss == r.loss);
    for (int i = 0; i < 3; ++i) CHECK(r4.grads.tensors[i].data == r.grads.tensors[i].data);
}

TEST_CASE("sampling with a zero model and T = 1 rescales the initial noise") {
    const auto s = linear_schedule(1, 0.02, 0.02);
    const StreamKey key{5, 5};
    const auto out = sample(ZeroModel{}, label_only(8, 8), s, key);
    const auto xT = standard_normal_field(8, 8, key.child(tag("x_T")));
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == static_cast<float>(xT[i] / std::sqrt(0.98)));
    SampleOptions half;
    half.initial_noise_scale = 0.5;
    const auto out2 = sample(ZeroModel{}, label_only(8, 8), s, key, half);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out2[i] == static_cast<float>(static_cast<float>(xT[i] * 0.5) / std::sqrt(0.98)));
}

TEST_CASE("sampling is deterministic and surfaces divergence") {
    const auto s = linear_schedule(20);
    CHECK(sample(ZeroModel{}, label_only(8, 8), s, {1, 9}) == sample(ZeroModel{}, label_only(8, 8), s, {1, 9}));
    CHECK(!(sample(ZeroModel{}, label_only(8, 8), s, {1, 9}) == sample(ZeroModel{}, label_only(8, 8), s, {1, 10})));
    try {
        sample(NanModel{}, label_only(8, 8), s, {1, 9});
        FAIL("expected divergence");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::divergence);
        CHECK(std::string(e.what()).find("step 20") != std::string::npos);
    }
}

TEST_CASE("optimal Gaussian denoiser samples the data mean") {
    const auto s = linear_schedule(200, 5e-4, 0.1);
    GaussianOptimal g;
    g.m = 0.6;
    g.v = 0.25;
    g.s = &s;
    const auto out = sample(g, label_only(25, 20), s, {7, 7});
    double m = 0, v = 0;
    for (float x : out.data) m += x;
    m /= out.size();
    for (float x : out.data) v += (x - m) * (x - m);
    v /= (out.size() - 1);
    CHECK(std::abs(m - g.m) < 3.0 * std::sqrt(g.v / out.size()));
    CHECK(std::abs(v - g.v) < 4.0 * g.v * std::sqrt(2.0 / (out.size() - 1)));
}

TEST_CASE("x0 clipping keeps clean estimates in range") {
    const auto s = linear_schedule(10, 0.01, 0.2);
    const auto x = standard_normal_field(6, 6, {1, 1});
    Field e(6, 6, 0.0f);
    const int t = 4;
    const auto c = clip_eps(x, t, e, s, -0.5, 0.5);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = (x[i] - s.sqrt_one_minus_alpha_bar[t] * c[i]) / s.sqrt_alpha_bar[t];
        CHECK(x0 >= -0.5 - 1e-5);
        CHECK(x0 <= 0.5 + 1e-5);
        const double raw = x[i] / s.sqrt_alpha_bar[t];
        if (raw >= -0.5 && raw <= 0.5) CHECK(c[i] == 0.0f);
    }
}

TEST_CASE("full-image mode against a zero prior is the variation computation") {
    SignalCodec var{Mode::variation, 400.0, 400.0}, full{Mode::full_image, 150.0, 400.0};
    HuImage x(8, 8);
    Rng rng(1, 2);
    for (auto& v : x.data) v = static_cast<float>(rng.normal(0, 300));
    const PriorMap zero(8, 8, 0.0f);
    const auto a = var.encode(x, zero), b = full.encode(x, zero);
    CHECK(a == b);
    CHECK(var.decode(a, zero) == full.decode(b, zero));
    const auto s = linear_schedule(30);
    const std::vector<TrainingExample> ba{{a, label_only(8, 8)}}, bb{{b, label_only(8, 8)}};
    const MicroNet net(0.1f, 0.2f, 0.3f);
    const auto la = training_loss(net, ba, s, {3, 3}), lb = training_loss(net, bb, s, {3, 3});
    CHECK(la.loss == lb.loss);
    for (int i = 0; i < 3; ++i) CHECK(la.grads.tensors[i].data == lb.grads.tensors[i].data);
}

TEST_CASE("codec round trip and conditioning channels") {
    SignalCodec var{Mode::variation, 150.0, 400.0};
    HuImage x(4, 4, -1000.0f);
    x[3] = 120.0f;
    PriorMap p(4, 4, 0.0f);
    p[3] = 100.0f;
    const auto f = var.encode(x, p);
    CHECK(f[3] == static_cast<float>(20.0 / 150.0));
    CHECK(f[0] == static_cast<float>(-1000.0 / 150.0));
    const auto back = var.decode(f, p);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(back[i] - x[i]) <= 1e-4);

    LabelMap l(4, 4, 0);
    l[3] = 4;
    ConditioningSpec spec{Mode::variation, 9, 400.0, true};
    const auto c = make_conditioning(spec, l, p, nullptr);
    CHECK(c.channels() == 3);
    CHECK(c.label[3] == static_cast<float>(4.0 / 9.0));
    CHECK((*c.prior)[3] == static_cast<float>(100.0 / 400.0));
    for (float v : c.previous->data) CHECK(v == 0.0f);
    const auto c2 = make_conditioning(spec, l, p, &x);
    CHECK((*c2.previous)[0] == static_cast<float>(-1000.0 / 400.0));
    spec.mode = Mode::full_image;
    spec.previous_slice = false;
    CHECK(make_conditioning(spec, l, p, nullptr).channels() == 1);
    l[0] = 9;
    CHECK(kind_of([&] { make_conditioning(spec, l, p, nullptr); }) == ErrorKind::config);
    CHECK(parse_mode("pivm") == Mode::variation);
    CHECK(parse_mode("cddpm") == Mode::full_image);
    CHECK(kind_of([] { parse_mode("latent"); }) == ErrorKind::config);
}
