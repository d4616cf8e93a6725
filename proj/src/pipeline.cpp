#include "pivm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "pivm/parallel.hpp"
#include "pivm/volume.hpp"

namespace pivm::pipeline {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double num(const storage::Record& r, const std::string& key) {
    const auto& s = storage::get(r, key);
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::corruption, "generator manifest: bad value for " + key);
}

std::uint64_t unum(const storage::Record& r, const std::string& key) {
    const auto& s = storage::get(r, key);
    try {
        std::size_t pos = 0;
        const auto v = std::stoull(s, &pos);
        if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::corruption, "manifest: bad integer for " + key);
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const phantom::PhantomDataset& ds, const storage::Record& extra) {
    require(!ds.slices.empty(), ErrorKind::config, "write_dataset: empty dataset");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
    const auto n = static_cast<std::uint32_t>(ds.slices.size());
    const auto h = static_cast<std::uint32_t>(ds.slices.front().image.height);
    const auto w = static_cast<std::uint32_t>(ds.slices.front().image.width);
    std::vector<float> images;
    std::vector<std::uint16_t> labels;
    images.reserve(static_cast<std::size_t>(n) * h * w);
    labels.reserve(images.capacity());
    for (const auto& s : ds.slices) {
        require(s.image.width == static_cast<int>(w) && s.image.height == static_cast<int>(h), ErrorKind::shape,
                "write_dataset: slices differ in size");
        require_same_shape(s.image, s.labels, "write_dataset");
        images.insert(images.end(), s.image.data.begin(), s.image.data.end());
        labels.insert(labels.end(), s.labels.data.begin(), s.labels.data.end());
    }
    storage::write_tensor(dir / "images.tns", {n, h, w}, images);
    storage::write_tensor(dir / "labels.tns", {n, h, w}, labels);

    const auto& c = ds.config;
    storage::Manifest m;
    auto& head = m.add_record();
    head.emplace_back("kind", "phantom-dataset");
    head.emplace_back("slices", std::to_string(n));
    head.emplace_back("phantom.image_size", std::to_string(c.image_size));
    head.emplace_back("phantom.n_organs", std::to_string(c.n_organs));
    head.emplace_back("phantom.organ_mean_lo", fmt(c.organ_mean_lo));
    head.emplace_back("phantom.organ_mean_hi", fmt(c.organ_mean_hi));
    head.emplace_back("phantom.organ_texture_sd", fmt(c.organ_texture_sd));
    head.emplace_back("phantom.background_hu", fmt(c.background_hu));
    head.emplace_back("phantom.air_hu", fmt(c.air_hu));
    head.emplace_back("phantom.slice_drift", fmt(c.slice_drift));
    head.emplace_back("phantom.seed", std::to_string(c.seed));
    head.insert(head.end(), extra.begin(), extra.end());
    for (const auto& rec : ds.manifest) {
        auto& r = m.add_record();
        r.emplace_back("volume", std::to_string(rec.volume));
        r.emplace_back("slice", std::to_string(rec.slice));
        r.emplace_back("split", phantom::to_string(rec.split));
        r.emplace_back("key.seed", std::to_string(rec.key.seed));
        r.emplace_back("key.stream", std::to_string(rec.key.stream));
    }
    m.write(dir / "manifest.txt");
}

phantom::PhantomDataset read_dataset(const std::filesystem::path& dir) {
    const auto m = storage::Manifest::read(dir / "manifest.txt");
    require(!m.records.empty() && storage::has(m.records.front(), "kind") &&
                storage::get(m.records.front(), "kind") == "phantom-dataset",
            ErrorKind::corruption, "not a phantom dataset: " + dir.string());
    const auto& head = m.records.front();
    phantom::PhantomDataset ds;
    auto& c = ds.config;
    c.image_size = static_cast<int>(unum(head, "phantom.image_size"));
    c.n_organs = static_cast<int>(unum(head, "phantom.n_organs"));
    c.organ_mean_lo = num(head, "phantom.organ_mean_lo");
    c.organ_mean_hi = num(head, "phantom.organ_mean_hi");
    c.organ_texture_sd = num(head, "phantom.organ_texture_sd");
    c.background_hu = num(head, "phantom.background_hu");
    c.air_hu = num(head, "phantom.air_hu");
    c.slice_drift = num(head, "phantom.slice_drift");
    c.seed = unum(head, "phantom.seed");
    const auto n = unum(head, "slices");
    require(m.records.size() == n + 1, ErrorKind::corruption, "dataset manifest slice count mismatch");

    const auto images = storage::read_tensor(dir / "images.tns");
    const auto labels = storage::read_tensor(dir / "labels.tns");
    const auto side = static_cast<std::uint32_t>(c.image_size);
    const std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(n), side, side};
    require(images.dtype == storage::DType::f32 && images.dims == dims, ErrorKind::corruption,
            "images.tns does not match the dataset manifest");
    require(labels.dtype == storage::DType::u16 && labels.dims == dims, ErrorKind::corruption,
            "labels.tns does not match the dataset manifest");
    const std::size_t plane = static_cast<std::size_t>(side) * side;
    for (std::size_t i = 0; i < n; ++i) {
        phantom::SlicePair sp{HuImage(c.image_size, c.image_size), LabelMap(c.image_size, c.image_size)};
        std::copy_n(images.f32.begin() + static_cast<std::ptrdiff_t>(i * plane), plane, sp.image.data.begin());
        std::copy_n(labels.u16.begin() + static_cast<std::ptrdiff_t>(i * plane), plane, sp.labels.data.begin());
        for (auto k : sp.labels.data)
            require(k <= c.n_organs, ErrorKind::corruption, "label id exceeds n_organs in " + dir.string());
        ds.slices.push_back(std::move(sp));
        const auto& r = m.records[i + 1];
        const auto& split = storage::get(r, "split");
        require(split == "train" || split == "test", ErrorKind::corruption, "bad split tag '" + split + "'");
        ds.manifest.push_back({static_cast<int>(unum(r, "volume")), static_cast<int>(unum(r, "slice")),
                               split == "train" ? phantom::Split::train : phantom::Split::test,
                               StreamKey{unum(r, "key.seed"), unum(r, "key.stream")}});
    }
    return ds;
}

LabelMap coarsen_labels(const LabelMap& labels, int n_organs, int target) {
    require(n_organs >= 1 && target >= 1 && target <= n_organs, ErrorKind::config,
            "label granularity must satisfy 1 <= label_organs <= n_organs");
    if (target == n_organs) return labels;
    LabelMap out(labels.width, labels.height);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int k = labels[i];
        require(k <= n_organs, ErrorKind::config, "label " + std::to_string(k) + " exceeds n_organs");
        out[i] = static_cast<std::uint16_t>(k == 0 ? 0 : (k * target + n_organs - 1) / n_organs);
    }
    return out;
}

void GeneratorConfig::validate() const {
    require(n_organs >= 1 && label_organs >= 1 && label_organs <= n_organs, ErrorKind::config,
            "label_organs must be in [1, n_organs]");
    require(variation_scale > 0.0 && image_scale > 0.0, ErrorKind::config, "signal scales must be positive");
    require(clip_lo < clip_hi, ErrorKind::config, "prior clip window is empty");
}

diffusion::SignalCodec Generator::codec() const {
    return diffusion::SignalCodec{config.mode, config.variation_scale, config.image_scale};
}

diffusion::ConditioningSpec Generator::conditioning() const {
    return diffusion::ConditioningSpec{config.mode, config.label_organs + 1, config.image_scale, config.volume};
}

diffusion::SampleOptions Generator::sampling() const {
    diffusion::SampleOptions o;
    o.clip_x0 = config.clip_x0;
    o.clip_lo = x0_lo;
    o.clip_hi = x0_hi;
    return o;
}

LabelMap Generator::condition_labels(const LabelMap& labels) const {
    return coarsen_labels(labels, config.n_organs, config.label_organs);
}

PriorMap Generator::prior(const LabelMap& labels) const {
    // Full-image mode has no prior; a zero map keeps the codec total.
    if (config.mode == diffusion::Mode::full_image) return PriorMap(labels.width, labels.height, 0.0f);
    return priors::build_prior_map(condition_labels(labels), table);
}

HuImage Generator::generate(const LabelMap& labels, StreamKey key, const HuImage* previous) const {
    const LabelMap cl = condition_labels(labels);
    const PriorMap p = prior(labels);
    const auto cond = diffusion::make_conditioning(conditioning(), cl, p, previous);
    return codec().decode(diffusion::sample(state.model, cond, schedule, key, sampling()), p);
}

std::vector<HuImage> Generator::generate_volume(const std::vector<LabelMap>& labels, StreamKey key,
                                                bool noise_scale) const {
    volume::VolumeRequest req;
    for (const auto& l : labels) {
        req.labels.push_back(condition_labels(l));
        req.priors.push_back(prior(l));
    }
    req.key = key;
    req.noise_scale = noise_scale;
    return volume::generate_volume(state.model, req, schedule, volume::VolumeSettings{codec(), conditioning(), sampling()});
}

priors::OrganMeanTable train_table(const phantom::PhantomDataset& ds, const GeneratorConfig& config) {
    config.validate();
    std::vector<phantom::SlicePair> train;
    for (auto i : ds.split_slices(phantom::Split::train))
        train.push_back({ds.slices[i].image, coarsen_labels(ds.slices[i].labels, config.n_organs, config.label_organs)});
    return priors::compute_organ_means(train, config.clip_lo, config.clip_hi);
}

std::vector<diffusion::TrainingExample> make_examples(const phantom::PhantomDataset& ds, const Generator& g) {
    std::vector<diffusion::TrainingExample> out;
    const auto spec = g.conditioning();
    const auto codec = g.codec();
    for (auto i : ds.split_slices(phantom::Split::train)) {
        const auto& s = ds.slices[i];
        const HuImage* previous = nullptr;
        if (g.config.volume && ds.manifest[i].slice > 1) {
            require(i > 0 && ds.manifest[i - 1].volume == ds.manifest[i].volume &&
                        ds.manifest[i - 1].slice == ds.manifest[i].slice - 1,
                    ErrorKind::corruption, "dataset slices are not stored in volume order");
            previous = &ds.slices[i - 1].image;
        }
        const LabelMap cl = g.condition_labels(s.labels);
        const PriorMap p = g.prior(s.labels);
        out.push_back({codec.encode(s.image, p), diffusion::make_conditioning(spec, cl, p, previous)});
    }
    require(!out.empty(), ErrorKind::config, "dataset has no training slices");
    return out;
}

Generator prepare_generator(const phantom::PhantomDataset& ds, const GeneratorConfig& config,
                            const priors::OrganMeanTable* table) {
    config.validate();
    require(ds.config.n_organs == config.n_organs, ErrorKind::config,
            "generator n_organs does not match the dataset");
    Generator g{config, table ? *table : train_table(ds, config),
                diffusion::linear_schedule(config.T, config.beta_start, config.beta_end),
                denoiser::start_training(denoiser::denoiser_config(1), config.train), -1.0, 1.0};
    require(g.table.n_classes() == config.label_organs + 1, ErrorKind::config,
            "prior table has " + std::to_string(g.table.n_classes() - 1) + " organ classes, expected " +
                std::to_string(config.label_organs));
    const auto examples = make_examples(ds, g);
    g.state = denoiser::start_training(denoiser::denoiser_config(examples.front().cond.channels()), config.train);
    // Clamp range: training-target extremes widened by a tenth of their span.
    float lo = examples.front().target[0], hi = lo;
    for (const auto& e : examples)
        for (float v : e.target.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const double pad = 0.1 * std::max(1e-3, static_cast<double>(hi - lo));
    g.x0_lo = lo - pad;
    g.x0_hi = hi + pad;
    return g;
}

void train_generator(Generator& g, const phantom::PhantomDataset& ds,
                     const std::function<void(const Generator&)>& on_epoch) {
    const auto examples = make_examples(ds, g);
    denoiser::train_until(g.state, examples, g.schedule, g.config.train, g.config.train.epochs,
                          [&](const denoiser::TrainState&) {
                              if (on_epoch) on_epoch(g);
                          });
}

void save_generator(const std::filesystem::path& dir, const Generator& g, const storage::Record& extra) {
    const auto& c = g.config;
    storage::Record r;
    r.emplace_back("generator.mode", diffusion::to_string(c.mode));
    r.emplace_back("generator.n_organs", std::to_string(c.n_organs));
    r.emplace_back("generator.label_organs", std::to_string(c.label_organs));
    r.emplace_back("generator.volume", c.volume ? "true" : "false");
    r.emplace_back("generator.T", std::to_string(c.T));
    r.emplace_back("generator.beta_start", fmt(c.beta_start));
    r.emplace_back("generator.beta_end", fmt(c.beta_end));
    r.emplace_back("generator.clip_x0", c.clip_x0 ? "true" : "false");
    r.emplace_back("generator.x0_lo", fmt(g.x0_lo));
    r.emplace_back("generator.x0_hi", fmt(g.x0_hi));
    r.emplace_back("generator.clip_lo", fmt(c.clip_lo));
    r.emplace_back("generator.clip_hi", fmt(c.clip_hi));
    r.emplace_back("generator.variation_scale", fmt(c.variation_scale));
    r.emplace_back("generator.image_scale", fmt(c.image_scale));
    r.emplace_back("generator.epochs", std::to_string(c.train.epochs));
    r.emplace_back("generator.batch_size", std::to_string(c.train.batch_size));
    r.emplace_back("generator.seed", std::to_string(c.train.seed));
    r.insert(r.end(), extra.begin(), extra.end());
    denoiser::save_checkpoint(dir, g.state, r);
    priors::write_table(dir / "priors", g.table);
}

Generator load_generator(const std::filesystem::path& dir) {
    auto ck = denoiser::load_checkpoint(dir);
    const auto& r = ck.extra;
    require(storage::has(r, "generator.mode"), ErrorKind::corruption, "checkpoint is not a generator: " + dir.string());
    GeneratorConfig c;
    c.mode = diffusion::parse_mode(storage::get(r, "generator.mode"));
    c.n_organs = static_cast<int>(num(r, "generator.n_organs"));
    c.label_organs = static_cast<int>(num(r, "generator.label_organs"));
    c.volume = storage::get(r, "generator.volume") == "true";
    c.T = static_cast<int>(num(r, "generator.T"));
    c.beta_start = num(r, "generator.beta_start");
    c.beta_end = num(r, "generator.beta_end");
    c.clip_x0 = storage::get(r, "generator.clip_x0") == "true";
    c.clip_lo = num(r, "generator.clip_lo");
    c.clip_hi = num(r, "generator.clip_hi");
    c.variation_scale = num(r, "generator.variation_scale");
    c.image_scale = num(r, "generator.image_scale");
    c.train.epochs = static_cast<int>(num(r, "generator.epochs"));
    c.train.batch_size = static_cast<int>(num(r, "generator.batch_size"));
    c.train.seed = static_cast<std::uint64_t>(std::stoull(storage::get(r, "generator.seed")));
    c.train.adam = ck.state.adam.hyper;
    Generator g{c, priors::read_table(dir / "priors"), diffusion::linear_schedule(c.T, c.beta_start, c.beta_end),
                std::move(ck.state), num(r, "generator.x0_lo"), num(r, "generator.x0_hi")};
    return g;
}

std::vector<phantom::SlicePair> synthesize(const Generator& g, std::span<const phantom::SlicePair> source,
                                           StreamKey key, int threads) {
    std::vector<phantom::SlicePair> out(source.size());
    parallel_for(source.size(), threads, [&](std::size_t i) {
        out[i] = {g.generate(source[i].labels, volume::sample_key(key, i)), source[i].labels};
    });
    return out;
}

}  // namespace pivm::pipeline
