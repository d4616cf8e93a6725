#include "pivm/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "pivm/parallel.hpp"
#include "pivm/volume.hpp"

namespace pivm::experiments {

phantom::PhantomConfig phantom_config(const config::RunConfig& cfg) {
    phantom::PhantomConfig p;
    p.image_size = static_cast<int>(cfg.get_int("phantom.image_size"));
    p.n_organs = static_cast<int>(cfg.get_int("phantom.n_organs"));
    p.organ_mean_lo = cfg.get_double("phantom.organ_mean_lo");
    p.organ_mean_hi = cfg.get_double("phantom.organ_mean_hi");
    p.organ_texture_sd = cfg.get_double("phantom.organ_texture_sd");
    p.background_hu = cfg.get_double("phantom.background_hu");
    p.air_hu = cfg.get_double("phantom.air_hu");
    p.slice_drift = cfg.get_double("phantom.slice_drift");
    p.seed = static_cast<std::uint64_t>(cfg.get_int("run.seed"));
    p.validate();
    return p;
}

phantom::PhantomDataset make_dataset(const config::RunConfig& cfg) {
    const auto p = phantom_config(cfg);
    return phantom::make_dataset(p, static_cast<int>(cfg.get_int("phantom.volumes")),
                                 static_cast<int>(cfg.get_int("phantom.slices_per_volume")),
                                 cfg.get_double("phantom.train_fraction"), StreamKey{p.seed, tag("dataset")});
}

pipeline::GeneratorConfig generator_config(const config::RunConfig& cfg) {
    pipeline::GeneratorConfig g;
    g.mode = diffusion::parse_mode(cfg.get_string("diffusion.mode"));
    g.n_organs = static_cast<int>(cfg.get_int("phantom.n_organs"));
    g.label_organs = static_cast<int>(cfg.get_int("priors.label_organs"));
    g.volume = cfg.get_bool("denoiser.volume_mode");
    g.T = static_cast<int>(cfg.get_int("diffusion.T"));
    g.beta_start = cfg.get_double("diffusion.beta_start");
    g.beta_end = cfg.get_double("diffusion.beta_end");
    g.clip_x0 = cfg.get_bool("diffusion.clip_x0");
    g.clip_lo = cfg.get_double("priors.clip_lo");
    g.clip_hi = cfg.get_double("priors.clip_hi");
    g.variation_scale = cfg.get_double("priors.variation_scale");
    g.image_scale = cfg.get_double("priors.image_scale");
    g.train.epochs = static_cast<int>(cfg.get_int("denoiser.epochs"));
    g.train.batch_size = static_cast<int>(cfg.get_int("denoiser.batch_size"));
    g.train.adam.lr = cfg.get_double("denoiser.lr");
    g.train.adam.beta1 = cfg.get_double("denoiser.beta1");
    g.train.adam.beta2 = cfg.get_double("denoiser.beta2");
    g.train.adam.halving_epochs = static_cast<int>(cfg.get_int("denoiser.halving_epochs"));
    g.train.seed = static_cast<std::uint64_t>(cfg.get_int("run.seed"));
    g.train.threads = static_cast<int>(cfg.get_int("run.threads"));
    g.validate();
    return g;
}

segdown::SegConfig seg_config(const config::RunConfig& cfg) {
    segdown::SegConfig s;
    s.n_classes = static_cast<int>(cfg.get_int("phantom.n_organs")) + 1;
    s.epochs = static_cast<int>(cfg.get_int("seg.epochs"));
    s.batch_size = static_cast<int>(cfg.get_int("seg.batch_size"));
    s.adam.lr = cfg.get_double("seg.lr");
    s.adam.halving_epochs = static_cast<int>(cfg.get_int("seg.halving_epochs"));
    s.seed = static_cast<std::uint64_t>(cfg.get_int("run.seed"));
    s.threads = static_cast<int>(cfg.get_int("run.threads"));
    s.input_scale = cfg.get_double("priors.image_scale");
    s.validate();
    return s;
}

std::vector<int> test_volumes(const phantom::PhantomDataset& ds, int limit) {
    auto ids = ds.volume_ids(phantom::Split::test);
    if (limit > 0 && static_cast<std::size_t>(limit) < ids.size()) ids.resize(static_cast<std::size_t>(limit));
    require(!ids.empty(), ErrorKind::config, "dataset has no test volumes");
    return ids;
}

std::vector<VolumeFidelity> fidelity(const pipeline::Generator& g, const phantom::PhantomDataset& ds,
                                     std::span<const int> volumes, StreamKey key,
                                     const metrics::FeatureExtractor& fx, int threads) {
    std::vector<VolumeFidelity> out;
    for (int v : volumes) {
        const auto idx = ds.volume_slices(v);
        require(idx.size() >= 2, ErrorKind::config, "fidelity needs volumes with at least 2 slices");
        VolumeFidelity r;
        r.volume = v;
        r.generated.resize(idx.size());
        const StreamKey vk = key.child(static_cast<std::uint64_t>(v));
        parallel_for(idx.size(), threads, [&](std::size_t i) {
            r.generated[i] = g.generate(ds.slices[idx[i]].labels, volume::sample_key(vk, i));
        });
        std::vector<std::vector<double>> fr, fg;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto& real = ds.slices[idx[i]].image;
            r.ssim += metrics::ssim(r.generated[i], real);
            fr.push_back(fx.features(real));
            fg.push_back(fx.features(r.generated[i]));
        }
        r.ssim /= static_cast<double>(idx.size());
        r.fd = metrics::frechet_distance(fg, fr);
        out.push_back(std::move(r));
    }
    return out;
}

std::string fidelity_csv(std::span<const std::string> methods, std::span<const std::vector<VolumeFidelity>> results) {
    require(methods.size() == results.size(), ErrorKind::internal, "fidelity_csv: method count mismatch");
    std::string s = "volume,metric,method,value\n";
    char buf[64];
    for (std::size_t m = 0; m < methods.size(); ++m)
        for (const auto& r : results[m]) {
            std::snprintf(buf, sizeof buf, "%.6f", r.ssim);
            s += std::to_string(r.volume) + ",ssim," + methods[m] + "," + buf + "\n";
            std::snprintf(buf, sizeof buf, "%.6f", r.fd);
            s += std::to_string(r.volume) + ",fd_r," + methods[m] + "," + buf + "\n";
        }
    return s;
}

std::vector<segdown::ExperimentResult> segmentation(const phantom::PhantomDataset& ds,
                                                    std::span<const NamedGenerator> generators, const SegSetup& setup) {
    require(setup.budget >= 1, ErrorKind::config, "seg.budget must be >= 1");
    segdown::ExperimentData data;
    auto train_idx = ds.split_slices(phantom::Split::train);
    if (train_idx.size() > static_cast<std::size_t>(setup.budget)) train_idx.resize(static_cast<std::size_t>(setup.budget));
    for (auto i : train_idx) data.original.push_back(ds.slices[i]);
    for (auto i : train_idx)
        if (data.original_volumes.empty() || data.original_volumes.back() != ds.manifest[i].volume)
            data.original_volumes.push_back(ds.manifest[i].volume);
    data.generated_volumes = data.original_volumes;
    data.eval_volumes = test_volumes(ds, setup.eval_volumes);
    for (int v : data.eval_volumes)
        for (auto i : ds.volume_slices(v)) data.eval.push_back(ds.slices[i]);

    std::vector<segdown::ExperimentResult> results;
    segdown::SegExperiment base{segdown::Source::original, "real", setup.config};
    results.push_back(segdown::run_experiment(base, data));
    for (const auto& ng : generators) {
        data.generated = pipeline::synthesize(*ng.generator, data.original, setup.key.child(tag(ng.name)), setup.threads);
        for (auto src : {segdown::Source::generated, segdown::Source::combined})
            results.push_back(segdown::run_experiment({src, ng.name, setup.config}, data));
    }
    return results;
}

namespace {

double mae(const HuImage& a, const HuImage& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
    return s / static_cast<double>(a.size());
}

double chain_mae(const std::vector<HuImage>& v, std::span<const std::size_t> order) {
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < order.size(); ++i) s += mae(v[order[i]], v[order[i + 1]]);
    return s / static_cast<double>(order.size() - 1);
}

// One-sided 95% quantiles of Student's t for 1..30 degrees of freedom.
constexpr double kT95[] = {6.314, 2.920, 2.353, 2.132, 2.015, 1.943, 1.895, 1.860, 1.833, 1.812,
                           1.796, 1.782, 1.771, 1.761, 1.753, 1.746, 1.740, 1.734, 1.729, 1.725,
                           1.721, 1.717, 1.714, 1.711, 1.708, 1.706, 1.703, 1.701, 1.699, 1.697};

double t95(std::size_t dof) {
    if (dof <= 30) return kT95[dof - 1];
    if (dof <= 60) return 1.671;
    if (dof <= 120) return 1.658;
    return 1.645;
}

}  // namespace

Continuity continuity(const std::vector<HuImage>& volume, StreamKey key) {
    require(volume.size() >= 3, ErrorKind::config, "continuity needs at least 3 slices");
    std::vector<std::size_t> order(volume.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Continuity c;
    c.adjacent = chain_mae(volume, order);
    Rng rng = key.rng();
    for (std::size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[rng.below(static_cast<std::uint32_t>(i + 1))]);
    c.permuted = chain_mae(volume, order);
    return c;
}

PairedTest paired_greater(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size() && a.size() >= 2, ErrorKind::config, "paired test needs two equal samples of size >= 2");
    PairedTest r;
    r.n = a.size();
    std::vector<double> d(r.n);
    for (std::size_t i = 0; i < r.n; ++i) d[i] = b[i] - a[i];
    r.mean_diff = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(r.n);
    double ss = 0.0;
    for (double x : d) ss += (x - r.mean_diff) * (x - r.mean_diff);
    const double se = std::sqrt(ss / static_cast<double>(r.n - 1) / static_cast<double>(r.n));
    r.t = se > 0.0 ? r.mean_diff / se : (r.mean_diff > 0.0 ? INFINITY : 0.0);
    r.critical = t95(r.n - 1);
    r.significant = r.t > r.critical;
    return r;
}

}  // namespace pivm::experiments
