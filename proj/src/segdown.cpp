#include "pivm/segdown.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "pivm/metrics.hpp"
#include "pivm/parallel.hpp"

namespace pivm::segdown {

void SegConfig::validate() const {
    require(n_classes >= 2, ErrorKind::config, "seg.n_classes must be >= 2");
    require(epochs >= 0 && batch_size >= 1 && threads >= 1, ErrorKind::config,
            "seg: epochs >= 0, batch_size >= 1 and threads >= 1 required");
    require(input_scale > 0.0, ErrorKind::config, "seg.input_scale must be positive");
}

nn::UNetConfig segmenter_config(int n_classes) {
    nn::UNetConfig c;
    c.in_channels = 1;
    c.out_channels = n_classes;
    c.time_embedding = false;
    return c;
}

Segmenter init_segmenter(const SegConfig& config) {
    config.validate();
    Segmenter s;
    s.config = segmenter_config(config.n_classes);
    s.params = nn::init_params<float>(s.config, config.seed);
    s.input_scale = config.input_scale;
    return s;
}

namespace {

nn::Tensor<float> to_input(const HuImage& image, double scale) {
    nn::Tensor<float> x(1, image.height, image.width);
    for (std::size_t i = 0; i < image.size(); ++i) x.data[i] = static_cast<float>(image[i] / scale);
    return x;
}

}  // namespace

nn::Tensor<float> logits(const Segmenter& seg, const HuImage& image) {
    nn::Tape<float> tape(false);
    const auto g = nn::build_unet(tape, seg.config, seg.params, to_input(image, seg.input_scale), std::nullopt);
    return tape.value(g.output);
}

LabelMap argmax(const nn::Tensor<float>& logits) {
    require(logits.c >= 1, ErrorKind::shape, "argmax: no classes");
    LabelMap out(logits.w, logits.h, 0);
    const std::size_t plane = logits.plane();
    for (std::size_t p = 0; p < plane; ++p) {
        int best = 0;
        float v = logits.data[p];
        for (int k = 1; k < logits.c; ++k) {
            const float u = logits.data[static_cast<std::size_t>(k) * plane + p];
            if (u > v) {
                v = u;
                best = k;
            }
        }
        out[p] = static_cast<std::uint16_t>(best);
    }
    return out;
}

LabelMap predict(const Segmenter& seg, const HuImage& image) { return argmax(logits(seg, image)); }

CrossEntropy cross_entropy(const nn::Tensor<float>& logits, const LabelMap& labels, double weight) {
    require(logits.h == labels.height && logits.w == labels.width, ErrorKind::shape, "cross_entropy: shape mismatch");
    const std::size_t plane = logits.plane();
    CrossEntropy ce;
    ce.grad = nn::Tensor<float>(logits.c, logits.h, logits.w);
    std::vector<double> e(static_cast<std::size_t>(logits.c));
    double total = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
        const int y = labels[p];
        require(y < logits.c, ErrorKind::config, "cross_entropy: label " + std::to_string(y) + " >= class count");
        double mx = -INFINITY;
        for (int k = 0; k < logits.c; ++k) mx = std::max(mx, static_cast<double>(logits.data[k * plane + p]));
        double z = 0.0;
        for (int k = 0; k < logits.c; ++k) {
            e[static_cast<std::size_t>(k)] = std::exp(logits.data[k * plane + p] - mx);
            z += e[static_cast<std::size_t>(k)];
        }
        total += std::log(z) + mx - logits.data[static_cast<std::size_t>(y) * plane + p];
        const double scale = weight / static_cast<double>(plane);
        for (int k = 0; k < logits.c; ++k)
            ce.grad.data[k * plane + p] =
                static_cast<float>((e[static_cast<std::size_t>(k)] / z - (k == y ? 1.0 : 0.0)) * scale);
    }
    ce.loss = total / static_cast<double>(plane);
    return ce;
}

Segmenter train_segmenter(std::span<const phantom::SlicePair> data, const SegConfig& config,
                          std::vector<double>* epoch_losses) {
    config.validate();
    require(!data.empty(), ErrorKind::config, "train_segmenter: empty dataset");
    Segmenter seg = init_segmenter(config);
    auto adam = nn::make_adam(seg.params, config.adam);
    const StreamKey root{config.seed, tag("segment")};

    struct Item {
        double loss = 0.0;
        nn::ParamSet<float> grads;
    };
    for (int e = 0; e < config.epochs; ++e) {
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle = root.child({tag("shuffle"), static_cast<std::uint64_t>(e)}).rng();
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.below(static_cast<std::uint32_t>(i))]);

        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const double weight = 1.0 / static_cast<double>(end - start);
            std::vector<Item> items(end - start);
            parallel_for(items.size(), config.threads, [&](std::size_t j) {
                const auto& s = data[order[start + j]];
                nn::Tape<float> tape(true);
                const auto g = nn::build_unet(tape, seg.config, seg.params, to_input(s.image, seg.input_scale),
                                              std::nullopt);
                auto ce = cross_entropy(tape.value(g.output), s.labels, weight);
                tape.backward(g.output, ce.grad);
                items[j].loss = ce.loss * weight;
                items[j].grads = nn::collect_grads(tape, g, seg.params);
            });
            nn::ParamSet<float> grads = std::move(items.front().grads);
            double loss = items.front().loss;
            for (std::size_t j = 1; j < items.size(); ++j) {
                grads.accumulate(items[j].grads);
                loss += items[j].loss;
            }
            require(std::isfinite(loss), ErrorKind::divergence,
                    "segmenter loss is not finite (epoch " + std::to_string(e + 1) + ", step " +
                        std::to_string(steps + 1) + ")");
            nn::adam_step(seg.params, grads, adam, e);
            loss_sum += loss;
            ++steps;
        }
        if (epoch_losses) epoch_losses->push_back(loss_sum / static_cast<double>(steps));
    }
    return seg;
}

SegScores evaluate(const Segmenter& seg, std::span<const phantom::SlicePair> eval, int n_classes) {
    require(!eval.empty(), ErrorKind::config, "evaluate: empty evaluation set");
    SegScores s;
    double hd = 0.0, asd = 0.0;
    for (const auto& sp : eval) {
        const LabelMap pred = predict(seg, sp.image);
        s.dice += metrics::mean_dice(pred, sp.labels, n_classes);
        s.miou += metrics::miou(pred, sp.labels, n_classes);
        for (int k = 1; k < n_classes; ++k) {
            const auto gt = metrics::mask_of(sp.labels, k);
            if (std::none_of(gt.data.begin(), gt.data.end(), [](std::uint8_t v) { return v != 0; })) continue;
            const auto pm = metrics::mask_of(pred, k);
            const auto h = metrics::hausdorff(pm, gt);
            const auto a = metrics::avg_surface_distance(pm, gt);
            if (!h || !a) {
                ++s.undefined_pairs;
                continue;
            }
            hd += *h;
            asd += *a;
            ++s.defined_pairs;
        }
    }
    s.dice /= static_cast<double>(eval.size());
    s.miou /= static_cast<double>(eval.size());
    if (s.defined_pairs > 0) {
        s.hd = hd / s.defined_pairs;
        s.asd = asd / s.defined_pairs;
    }
    return s;
}

Source parse_source(const std::string& s) {
    if (s == "original") return Source::original;
    if (s == "generated") return Source::generated;
    if (s == "combined") return Source::combined;
    fail(ErrorKind::config, "unknown segmentation source '" + s + "' (expected original, generated or combined)");
}

const char* to_string(Source s) {
    switch (s) {
        case Source::original: return "original";
        case Source::generated: return "generated";
        case Source::combined: return "combined";
    }
    return "?";
}

ExperimentResult run_experiment(const SegExperiment& experiment, const ExperimentData& data) {
    const std::set<int> eval_ids(data.eval_volumes.begin(), data.eval_volumes.end());
    auto check_disjoint = [&](const std::vector<int>& ids, const char* what) {
        for (int v : ids)
            require(!eval_ids.count(v), ErrorKind::config,
                    std::string("evaluation volume ") + std::to_string(v) + " also appears in the " + what +
                        " training data");
    };
    std::vector<phantom::SlicePair> train;
    const bool use_original = experiment.source != Source::generated;
    const bool use_generated = experiment.source != Source::original;
    if (use_original) {
        check_disjoint(data.original_volumes, "original");
        train.insert(train.end(), data.original.begin(), data.original.end());
    }
    if (use_generated) {
        require(!data.generated.empty(), ErrorKind::config,
                std::string("source '") + to_string(experiment.source) + "' needs generated slices");
        check_disjoint(data.generated_volumes, "generated");
        train.insert(train.end(), data.generated.begin(), data.generated.end());
    }
    ExperimentResult r;
    r.source = experiment.source;
    r.method = experiment.method;
    r.train_slices = train.size();
    const Segmenter seg = train_segmenter(train, experiment.config);
    r.scores = evaluate(seg, data.eval, experiment.config.n_classes);
    return r;
}

std::string report_csv(std::span<const ExperimentResult> results) {
    std::string s = "method,source,metric,value\n";
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    for (const auto& r : results) {
        const std::string prefix = r.method + "," + to_string(r.source) + ",";
        s += prefix + "dice," + num(r.scores.dice) + "\n";
        s += prefix + "miou," + num(r.scores.miou) + "\n";
        s += prefix + "hd," + (r.scores.hd ? num(*r.scores.hd) : "undefined-metric") + "\n";
        s += prefix + "asd," + (r.scores.asd ? num(*r.scores.asd) : "undefined-metric") + "\n";
    }
    return s;
}

}  // namespace pivm::segdown
