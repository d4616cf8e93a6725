#include "pivm/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "pivm/parallel.hpp"

namespace pivm {

void Conditioning::validate(int w, int h) const {
    auto check = [&](const Field& f, const char* name) {
        require(f.width == w && f.height == h, ErrorKind::shape,
                std::string("conditioning channel '") + name + "' is " + std::to_string(f.width) + "x" +
                    std::to_string(f.height) + ", expected " + std::to_string(w) + "x" + std::to_string(h));
        for (float v : f.data)
            require(std::isfinite(v), ErrorKind::config, std::string("non-finite value in conditioning channel '") +
                                                             name + "'");
    };
    check(label, "label");
    if (prior) check(*prior, "prior");
    if (previous) check(*previous, "previous");
}

}  // namespace pivm

namespace pivm::diffusion {

Mode parse_mode(const std::string& s) {
    if (s == "variation" || s == "pivm") return Mode::variation;
    if (s == "full_image" || s == "full-image" || s == "cddpm") return Mode::full_image;
    fail(ErrorKind::config, "unknown mode '" + s + "' (expected variation or full_image)");
}

const char* to_string(Mode m) { return m == Mode::variation ? "variation" : "full_image"; }

NoiseSchedule linear_schedule(int T, double beta_start, double beta_end) {
    require(T >= 1, ErrorKind::config, "diffusion steps T must be >= 1");
    require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end, ErrorKind::config,
            "betas must satisfy 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    const auto n = static_cast<std::size_t>(T) + 1;
    s.beta.assign(n, 0.0);
    s.alpha.assign(n, 1.0);
    s.alpha_bar.assign(n, 1.0);
    s.sqrt_alpha_bar.assign(n, 1.0);
    s.sqrt_one_minus_alpha_bar.assign(n, 0.0);
    s.posterior_variance.assign(n, 0.0);
    for (int t = 1; t <= T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
        s.beta[t] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[t] = 1.0 - s.beta[t];
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
        s.sqrt_alpha_bar[t] = std::sqrt(s.alpha_bar[t]);
        s.sqrt_one_minus_alpha_bar[t] = std::sqrt(1.0 - s.alpha_bar[t]);
        s.posterior_variance[t] = s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]);
    }
    return s;
}

static void check_step(int t, const NoiseSchedule& s, int lo) {
    require(t >= lo && t <= s.T, ErrorKind::config,
            "timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " + std::to_string(s.T) + "]");
}

Field forward_sample(const Field& x0, int t, const Field& eps, const NoiseSchedule& s) {
    check_step(t, s, 0);
    require_same_shape(x0, eps, "forward_sample");
    const double a = s.sqrt_alpha_bar[t], b = s.sqrt_one_minus_alpha_bar[t];
    Field out(x0.width, x0.height);
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = static_cast<float>(a * x0[i] + b * eps[i]);
    return out;
}

Field reverse_step(const Field& x_t, int t, const Field& eps_hat, const NoiseSchedule& s, const Field* z) {
    check_step(t, s, 1);
    require_same_shape(x_t, eps_hat, "reverse_step");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[t]);
    const double coef = s.beta[t] / s.sqrt_one_minus_alpha_bar[t];
    const double sigma = t > 1 ? std::sqrt(s.posterior_variance[t]) : 0.0;
    if (t > 1) {
        require(z != nullptr, ErrorKind::config, "reverse_step needs noise for t > 1");
        require_same_shape(x_t, *z, "reverse_step");
    }
    Field out(x_t.width, x_t.height);
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        double v = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]);
        if (t > 1) v += sigma * (*z)[i];
        out[i] = static_cast<float>(v);
    }
    return out;
}

Field standard_normal_field(int w, int h, StreamKey key) {
    Field f(w, h);
    Rng rng = key.rng();
    for (auto& v : f.data) v = static_cast<float>(rng.normal());
    return f;
}

namespace {

struct ExampleResult {
    double sq_error = 0.0;
    nn::ParamSet<float> grads;
};

ExampleResult example_loss(const EpsModel& model, const TrainingExample& ex, const NoiseSchedule& s, StreamKey key,
                           double norm) {
    Rng rng = key.rng();
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint32_t>(s.T)));
    Field eps(ex.target.width, ex.target.height);
    for (auto& v : eps.data) v = static_cast<float>(rng.normal());
    const Field noisy = forward_sample(ex.target, t, eps, s);
    Recorded rec = model.record(noisy, t, ex.cond);
    require_same_shape(rec.output, eps, "denoiser output");

    ExampleResult r;
    Field dout(eps.width, eps.height);
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double d = static_cast<double>(rec.output[i]) - eps[i];
        r.sq_error += d * d;
        dout[i] = static_cast<float>(2.0 * d * norm);
    }
    if (rec.backward) r.grads = rec.backward(dout);
    return r;
}

}  // namespace

LossResult training_loss(const EpsModel& model, std::span<const TrainingExample> batch, const NoiseSchedule& s,
                         StreamKey key, int threads) {
    require(!batch.empty(), ErrorKind::config, "empty training batch");
    const std::size_t pixels = batch.front().target.size();
    for (const auto& ex : batch) {
        require(ex.target.size() == pixels && ex.target.same_shape(batch.front().target), ErrorKind::shape,
                "training batch mixes image sizes");
        ex.cond.validate(ex.target.width, ex.target.height);
    }
    const double norm = 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(pixels));

    std::vector<ExampleResult> results(batch.size());
    parallel_for(batch.size(), threads,
                 [&](std::size_t i) { results[i] = example_loss(model, batch[i], s, key.child(i), norm); });

    LossResult out;
    double sq = 0.0;
    for (auto& r : results) {
        sq += r.sq_error;
        if (out.grads.size() == 0)
            out.grads = std::move(r.grads);
        else
            out.grads.accumulate(r.grads);
    }
    out.loss = sq * norm;
    require(std::isfinite(out.loss), ErrorKind::divergence, "training loss is not finite");
    return out;
}

Field clip_eps(const Field& x_t, int t, const Field& eps_hat, const NoiseSchedule& s, double lo, double hi) {
    check_step(t, s, 1);
    require_same_shape(x_t, eps_hat, "clip_eps");
    const double a = s.sqrt_alpha_bar[t], b = s.sqrt_one_minus_alpha_bar[t];
    Field out = eps_hat;
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        const double x0 = (x_t[i] - b * eps_hat[i]) / a;
        if (x0 < lo || x0 > hi) out[i] = static_cast<float>((x_t[i] - a * std::clamp(x0, lo, hi)) / b);
    }
    return out;
}

Field sample(const EpsModel& model, const Conditioning& cond, const NoiseSchedule& s, StreamKey key,
             const SampleOptions& options) {
    const int w = cond.label.width, h = cond.label.height;
    cond.validate(w, h);
    require(!options.clip_x0 || options.clip_lo < options.clip_hi, ErrorKind::config, "sample: empty clip range");
    Field x = standard_normal_field(w, h, key.child(tag("x_T")));
    for (auto& v : x.data) v = static_cast<float>(v * options.initial_noise_scale);
    for (int t = s.T; t >= 1; --t) {
        Field eps_hat = model.predict(x, t, cond);
        if (options.clip_x0) eps_hat = clip_eps(x, t, eps_hat, s, options.clip_lo, options.clip_hi);
        if (t > 1) {
            const Field z = standard_normal_field(w, h, key.child({tag("z"), static_cast<std::uint64_t>(t)}));
            x = reverse_step(x, t, eps_hat, s, &z);
        } else {
            x = reverse_step(x, t, eps_hat, s, nullptr);
        }
        for (float v : x.data)
            require(std::isfinite(v), ErrorKind::divergence,
                    "sampling produced a non-finite value at step " + std::to_string(t));
    }
    return x;
}

Field SignalCodec::encode(const HuImage& image, const PriorMap& prior) const {
    Field out(image.width, image.height);
    if (mode == Mode::variation) {
        require_same_shape(image, prior, "encode");
        for (std::size_t i = 0; i < image.size(); ++i)
            out[i] = static_cast<float>((static_cast<double>(image[i]) - prior[i]) / variation_scale);
    } else {
        for (std::size_t i = 0; i < image.size(); ++i)
            out[i] = static_cast<float>(static_cast<double>(image[i]) / image_scale);
    }
    return out;
}

HuImage SignalCodec::decode(const Field& signal, const PriorMap& prior) const {
    HuImage out(signal.width, signal.height);
    if (mode == Mode::variation) {
        require_same_shape(signal, prior, "decode");
        for (std::size_t i = 0; i < signal.size(); ++i)
            out[i] = static_cast<float>(static_cast<double>(prior[i]) + static_cast<double>(signal[i]) * variation_scale);
    } else {
        for (std::size_t i = 0; i < signal.size(); ++i)
            out[i] = static_cast<float>(static_cast<double>(signal[i]) * image_scale);
    }
    return out;
}

Conditioning make_conditioning(const ConditioningSpec& spec, const LabelMap& labels, const PriorMap& prior,
                               const HuImage* previous) {
    require(spec.n_classes >= 1, ErrorKind::config, "n_classes must be >= 1");
    Conditioning c;
    c.label = Field(labels.width, labels.height);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] < spec.n_classes, ErrorKind::config,
                "label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(spec.n_classes) + ")");
        c.label[i] = static_cast<float>(static_cast<double>(labels[i]) / spec.n_classes);
    }
    if (spec.mode == Mode::variation) {
        require_same_shape(labels, prior, "conditioning prior");
        Field p(prior.width, prior.height);
        for (std::size_t i = 0; i < prior.size(); ++i) p[i] = static_cast<float>(prior[i] / spec.image_scale);
        c.prior = std::move(p);
    }
    if (spec.previous_slice) {
        Field p(labels.width, labels.height);
        if (previous) {
            require_same_shape(labels, *previous, "previous slice");
            for (std::size_t i = 0; i < previous->size(); ++i)
                p[i] = static_cast<float>((*previous)[i] / spec.image_scale);
        }
        c.previous = std::move(p);
    }
    return c;
}

}  // namespace pivm::diffusion
