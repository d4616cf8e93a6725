// pivm: command-line driver for the phantom / prior / diffusion pipeline.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pivm/error.hpp"
#include "pivm/experiments.hpp"
#include "pivm/storage.hpp"
#include "pivm/volume.hpp"

namespace fs = std::filesystem;
using namespace pivm;

namespace {

constexpr double kWindowCenter = 50.0;
constexpr double kWindowWidth = 500.0;

struct Options {
    std::string config_file;
    std::optional<long long> seed;
    std::optional<int> threads;
    std::string out;
    std::string mode;
    std::string data, priors, checkpoint;
    std::vector<std::string> sets;
};

// Precedence: defaults < --config file < PIVM_* environment < flags.
config::RunConfig resolve(const Options& o) {
    config::RunConfig cfg;
    if (!o.config_file.empty()) cfg.load_file(o.config_file);
    cfg.apply_env();
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        require(eq != std::string::npos, ErrorKind::config, "--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.seed) cfg.set("run.seed", std::to_string(*o.seed));
    if (o.threads) cfg.set("run.threads", std::to_string(*o.threads));
    if (!o.mode.empty()) cfg.set("diffusion.mode", diffusion::to_string(diffusion::parse_mode(o.mode)));
    if (!o.data.empty()) cfg.set("io.data", o.data);
    if (!o.priors.empty()) cfg.set("io.priors", o.priors);
    if (!o.checkpoint.empty()) cfg.set("io.checkpoint", o.checkpoint);
    return cfg;
}

class Run {
public:
    Run(std::string command, const Options& o) : command_(std::move(command)), cfg_(resolve(o)), out_(o.out) {
        require(!out_.empty(), ErrorKind::config, "--out is required");
        std::error_code ec;
        fs::create_directories(out_, ec);
        require(!ec, ErrorKind::io, "cannot create output directory " + out_.string());
    }

    const config::RunConfig& cfg() const { return cfg_; }
    const fs::path& out() const { return out_; }
    std::uint64_t seed() const { return static_cast<std::uint64_t>(cfg_.get_int("run.seed")); }
    int threads() const { return static_cast<int>(cfg_.get_int("run.threads")); }
    StreamKey key() const { return StreamKey{seed(), tag(command_)}; }

    fs::path input(const std::string& key) const {
        fs::path p = cfg_.get_string(key);
        require(fs::exists(p / "manifest.txt"), ErrorKind::io,
                key + ": no manifest.txt in '" + p.string() + "'");
        inputs_.emplace_back(key, p.string());
        return p;
    }

    void output(const std::string& name) { outputs_.push_back(name); }

    storage::Record header() const {
        return {{"command", command_}, {"config_hash", cfg_.hash()}, {"seed", std::to_string(seed())}};
    }

    void finish(const storage::Record& results = {}, bool manifest = true) const {
        storage::write_text(out_ / "config.txt", cfg_.snapshot());
        if (!manifest) return;
        storage::Manifest m;
        auto& r = m.add_record();
        r = header();
        for (const auto& [k, v] : inputs_) r.emplace_back("input." + k, v);
        for (std::size_t i = 0; i < outputs_.size(); ++i) r.emplace_back("output." + std::to_string(i), outputs_[i]);
        r.insert(r.end(), results.begin(), results.end());
        m.write(out_ / "manifest.txt");
    }

private:
    std::string command_;
    config::RunConfig cfg_;
    fs::path out_;
    mutable std::vector<std::pair<std::string, std::string>> inputs_;
    std::vector<std::string> outputs_;
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string pad(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03zu", i + 1);
    return buf;
}

std::string id3(int v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", v);
    return buf;
}

storage::Gray8 gray(const HuImage& img) { return storage::window_image(img, kWindowCenter, kWindowWidth); }

storage::Gray8 vstack(const std::vector<storage::Gray8>& rows, int gap = 2) {
    storage::Gray8 out;
    for (const auto& r : rows) out.width = std::max(out.width, r.width);
    for (std::size_t i = 0; i < rows.size(); ++i) out.height += rows[i].height + (i ? gap : 0);
    out.data.assign(static_cast<std::size_t>(out.width) * out.height, 0);
    int y0 = 0;
    for (const auto& r : rows) {
        for (int y = 0; y < r.height; ++y)
            std::copy_n(r.data.begin() + static_cast<std::ptrdiff_t>(y) * r.width, r.width,
                        out.data.begin() + static_cast<std::ptrdiff_t>(y0 + y) * out.width);
        y0 += r.height + gap;
    }
    return out;
}

void write_images(const fs::path& path, const std::vector<HuImage>& images) {
    require(!images.empty(), ErrorKind::internal, "no images to write");
    std::vector<float> flat;
    for (const auto& im : images) flat.insert(flat.end(), im.data.begin(), im.data.end());
    storage::write_tensor(path, {static_cast<std::uint32_t>(images.size()), static_cast<std::uint32_t>(images[0].height),
                                 static_cast<std::uint32_t>(images[0].width)},
                          std::span<const float>(flat));
}

std::string checkpoint_key(const config::RunConfig& cfg, diffusion::Mode mode) {
    if (cfg.has("io.checkpoint") && !cfg.get_string("io.checkpoint").empty() &&
        fs::exists(fs::path(cfg.get_string("io.checkpoint")) / "manifest.txt"))
        return "io.checkpoint";
    return mode == diffusion::Mode::variation ? "io.pivm_checkpoint" : "io.cddpm_checkpoint";
}

pipeline::Generator load_for_mode(Run& run, diffusion::Mode mode) {
    auto g = pipeline::load_generator(run.input(checkpoint_key(run.cfg(), mode)));
    require(g.config.mode == mode, ErrorKind::config,
            std::string("checkpoint was trained in mode ") + diffusion::to_string(g.config.mode) + ", requested " +
                diffusion::to_string(mode));
    return g;
}

// --- subcommands ---------------------------------------------------------

void gen_data(Run& run) {
    const auto ds = experiments::make_dataset(run.cfg());
    pipeline::write_dataset(run.out(), ds, run.header());
    run.finish({}, false);
}

void build_priors(Run& run) {
    const auto ds = pipeline::read_dataset(run.input("io.data"));
    const auto gc = experiments::generator_config(run.cfg());
    const auto table = pipeline::train_table(ds, gc);
    priors::write_table(run.out() / "table", table);
    run.output("table");

    const auto test = ds.split_slices(phantom::Split::test);
    const auto& ex = ds.slices[test.empty() ? 0 : test[0]];
    const auto prior = priors::build_prior_map(pipeline::coarsen_labels(ex.labels, gc.n_organs, gc.label_organs), table);
    storage::write_pgm(run.out() / "prior_example.pgm", storage::hstack({gray(ex.image), gray(retag<HuImage>(prior))}));
    run.output("prior_example.pgm");

    storage::Record res;
    for (int k = 0; k < table.n_classes(); ++k)
        if (table.present(k)) res.emplace_back("mean." + std::to_string(k), fmt(table.means[k]));
    run.finish(res);
}

void train(Run& run) {
    const auto ds = pipeline::read_dataset(run.input("io.data"));
    const auto gc = experiments::generator_config(run.cfg());
    const auto table = priors::read_table(run.input("io.priors") / "table");

    // A checkpoint in --out resumes when every key except the epoch budget matches.
    config::RunConfig base = run.cfg();
    base.set("denoiser.epochs", "0");
    const std::string resume_hash = base.hash();
    storage::Record extra = run.header();
    extra.emplace_back("resume_hash", resume_hash);

    std::optional<pipeline::Generator> g;
    if (fs::exists(run.out() / "manifest.txt")) {
        const auto m = storage::Manifest::read(run.out() / "manifest.txt");
        bool match = false;
        for (const auto& r : m.records)
            if (storage::has(r, "resume_hash") && storage::get(r, "resume_hash") == resume_hash) match = true;
        require(match, ErrorKind::config,
                "output directory holds a checkpoint from a different configuration: " + run.out().string());
        g = pipeline::load_generator(run.out());
        require(g->state.epochs_done <= gc.train.epochs, ErrorKind::config,
                "checkpoint is past denoiser.epochs (" + std::to_string(g->state.epochs_done) + ")");
        g->config.train = gc.train;
        std::fprintf(stderr, "resuming at epoch %d\n", g->state.epochs_done);
    } else {
        g = pipeline::prepare_generator(ds, gc, &table);
    }
    pipeline::train_generator(*g, ds, [&](const pipeline::Generator& cur) {
        const auto& log = cur.state.log.back();
        std::fprintf(stderr, "epoch %d loss %.6f lr %.3g\n", log.epoch, log.mean_loss, log.lr);
        pipeline::save_generator(run.out(), cur, extra);
    });
    if (g->state.log.empty()) pipeline::save_generator(run.out(), *g, extra);
    run.finish({}, false);
}

void sample(Run& run) {
    const auto mode = diffusion::parse_mode(run.cfg().get_string("diffusion.mode"));
    const auto ds = pipeline::read_dataset(run.input("io.data"));
    const auto g = load_for_mode(run, mode);
    auto idx = ds.split_slices(phantom::Split::test);
    const auto count = static_cast<std::size_t>(run.cfg().get_int("sample.count"));
    require(count >= 1, ErrorKind::config, "sample.count must be >= 1");
    require(!idx.empty(), ErrorKind::config, "dataset has no test slices");
    if (idx.size() > count) idx.resize(count);

    std::vector<phantom::SlicePair> src;
    for (auto i : idx) src.push_back(ds.slices[i]);
    const auto out = pipeline::synthesize(g, src, run.key(), run.threads());
    std::vector<HuImage> images;
    std::vector<std::uint16_t> labels;
    for (std::size_t i = 0; i < out.size(); ++i) {
        images.push_back(out[i].image);
        labels.insert(labels.end(), out[i].labels.data.begin(), out[i].labels.data.end());
        storage::write_pgm(run.out() / ("sample_" + pad(i) + ".pgm"), gray(out[i].image));
        run.output("sample_" + pad(i) + ".pgm");
    }
    write_images(run.out() / "samples.tns", images);
    storage::write_tensor(run.out() / "labels.tns",
                          {static_cast<std::uint32_t>(out.size()), static_cast<std::uint32_t>(images[0].height),
                           static_cast<std::uint32_t>(images[0].width)},
                          std::span<const std::uint16_t>(labels));
    run.output("samples.tns");
    run.output("labels.tns");
    storage::Record res{{"mode", diffusion::to_string(mode)}};
    for (std::size_t i = 0; i < idx.size(); ++i)
        res.emplace_back("source." + std::to_string(i),
                         std::to_string(ds.manifest[idx[i]].volume) + ":" + std::to_string(ds.manifest[idx[i]].slice));
    run.finish(res);
}

void gen_volume(Run& run) {
    const auto mode = diffusion::parse_mode(run.cfg().get_string("diffusion.mode"));
    const auto ds = pipeline::read_dataset(run.input("io.data"));
    const auto g = load_for_mode(run, mode);
    require(g.config.volume, ErrorKind::config, "gen-volume needs a checkpoint trained with denoiser.volume_mode = true");
    const auto vols = experiments::test_volumes(ds, static_cast<int>(run.cfg().get_int("volume.count")));
    const bool noise_scale = run.cfg().get_bool("volume.noise_scale");
    const auto plane_index = run.cfg().get_int("volume.plane_index");

    std::string csv = "volume,adjacent_mae,permuted_mae\n";
    std::vector<double> adj, perm;
    for (int v : vols) {
        std::vector<LabelMap> labels;
        for (auto i : ds.volume_slices(v)) labels.push_back(ds.slices[i].labels);
        const StreamKey vk = run.key().child(static_cast<std::uint64_t>(v));
        const auto vol = g.generate_volume(labels, vk, noise_scale);
        const std::string stem = "volume_" + id3(v);
        write_images(run.out() / (stem + ".tns"), vol);
        run.output(stem + ".tns");
        const int n = vol[0].width;
        const int index = plane_index < 0 ? n / 2 : static_cast<int>(plane_index);
        require(index < n, ErrorKind::config, "volume.plane_index is outside the image");
        for (auto plane : {volume::Plane::coronal, volume::Plane::sagittal}) {
            const std::string name = stem + (plane == volume::Plane::coronal ? "_coronal.pgm" : "_sagittal.pgm");
            storage::write_pgm(run.out() / name, gray(volume::reslice(vol, plane, index)));
            run.output(name);
        }
        const auto c = experiments::continuity(vol, vk.child(tag("permute")));
        adj.push_back(c.adjacent);
        perm.push_back(c.permuted);
        csv += std::to_string(v) + "," + fmt(c.adjacent) + "," + fmt(c.permuted) + "\n";
    }
    storage::write_text(run.out() / "continuity.csv", csv);
    run.output("continuity.csv");
    storage::Record res;
    if (vols.size() >= 2) {
        const auto t = experiments::paired_greater(adj, perm);
        res = {{"continuity.mean_diff", fmt(t.mean_diff)}, {"continuity.t", fmt(t.t)},
               {"continuity.significant", t.significant ? "true" : "false"}};
    }
    run.finish(res);
}

void eval_fidelity(Run& run) {
    const auto ds = pipeline::read_dataset(run.input("io.data"));
    const auto pivm = pipeline::load_generator(run.input("io.pivm_checkpoint"));
    const auto cddpm = pipeline::load_generator(run.input("io.cddpm_checkpoint"));
    require(pivm.config.mode == diffusion::Mode::variation && cddpm.config.mode == diffusion::Mode::full_image,
            ErrorKind::config, "io.pivm_checkpoint / io.cddpm_checkpoint hold the wrong modes");
    const auto vols = experiments::test_volumes(ds, static_cast<int>(run.cfg().get_int("eval.volumes")));
    const metrics::FeatureExtractor fx;
    const std::vector<std::string> names{"pivm", "cddpm"};
    std::vector<std::vector<experiments::VolumeFidelity>> res;
    for (const auto* g : {&pivm, &cddpm}) res.push_back(experiments::fidelity(*g, ds, vols, run.key(), fx, run.threads()));
    storage::write_text(run.out() / "fidelity.csv", experiments::fidelity_csv(names, res));
    run.output("fidelity.csv");

    std::string summary = "method,metric,mean,sd\n";
    storage::Record rec;
    for (std::size_t m = 0; m < names.size(); ++m)
        for (const char* metric : {"ssim", "fd_r"}) {
            std::vector<double> xs;
            for (const auto& r : res[m]) xs.push_back(metric[0] == 's' ? r.ssim : r.fd);
            double mean = 0.0, ss = 0.0;
            for (double x : xs) mean += x;
            mean /= static_cast<double>(xs.size());
            for (double x : xs) ss += (x - mean) * (x - mean);
            const double sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
            summary += names[m] + "," + metric + "," + fmt(mean) + "," + fmt(sd) + "\n";
            rec.emplace_back(names[m] + "." + metric, fmt(mean));
        }
    storage::write_text(run.out() / "summary.csv", summary);
    run.output("summary.csv");
    run.finish(rec);
}

void eval_seg(Run& run) {
    const auto ds = pipeline::read_dataset(run.input("io.data"));
    const auto pivm = pipeline::load_generator(run.input("io.pivm_checkpoint"));
    const auto cddpm = pipeline::load_generator(run.input("io.cddpm_checkpoint"));
    experiments::SegSetup setup;
    setup.config = experiments::seg_config(run.cfg());
    setup.budget = static_cast<int>(run.cfg().get_int("seg.budget"));
    setup.eval_volumes = static_cast<int>(run.cfg().get_int("eval.volumes"));
    setup.key = run.key();
    setup.threads = run.threads();
    const std::vector<experiments::NamedGenerator> gens{{"pivm", &pivm}, {"cddpm", &cddpm}};
    const auto results = experiments::segmentation(ds, gens, setup);

    std::vector<segdown::ExperimentResult> generated;
    for (const auto& r : results)
        if (r.source == segdown::Source::generated) generated.push_back(r);
    storage::write_text(run.out() / "generated.csv", segdown::report_csv(generated));
    storage::write_text(run.out() / "sources.csv", segdown::report_csv(results));
    run.output("generated.csv");
    run.output("sources.csv");
    storage::Record rec;
    for (const auto& r : results)
        rec.emplace_back(r.method + "." + segdown::to_string(r.source) + ".dice", fmt(r.scores.dice));
    run.finish(rec);
}

void ablate_labels(Run& run) {
    const auto ds = pipeline::read_dataset(run.input("io.data"));
    auto gc = experiments::generator_config(run.cfg());
    const int coarse = static_cast<int>(run.cfg().get_int("ablate.coarse_labels"));
    require(coarse >= 1 && coarse < gc.label_organs, ErrorKind::config,
            "ablate.coarse_labels must be in [1, priors.label_organs)");
    const auto vols = experiments::test_volumes(ds, static_cast<int>(run.cfg().get_int("eval.volumes")));
    const metrics::FeatureExtractor fx;

    std::vector<std::vector<experiments::VolumeFidelity>> res;
    std::vector<std::string> names;
    for (int labels : {coarse, gc.label_organs}) {
        gc.label_organs = labels;
        auto g = pipeline::prepare_generator(ds, gc);
        pipeline::train_generator(g, ds, [&](const pipeline::Generator& cur) {
            const auto& log = cur.state.log.back();
            std::fprintf(stderr, "labels %d epoch %d loss %.6f\n", labels, log.epoch, log.mean_loss);
        });
        const std::string name = "labels" + std::to_string(labels);
        pipeline::save_generator(run.out() / name, g, run.header());
        run.output(name);
        names.push_back(name);
        res.push_back(experiments::fidelity(g, ds, vols, run.key(), fx, run.threads()));
    }
    storage::write_text(run.out() / "ablation.csv", experiments::fidelity_csv(names, res));
    run.output("ablation.csv");

    std::size_t wins = 0;
    for (std::size_t i = 0; i < vols.size(); ++i) {
        if (res[1][i].ssim > res[0][i].ssim) ++wins;
        const auto idx = ds.volume_slices(vols[i]);
        const std::size_t mid = idx.size() / 2;
        const std::string name = "panel_volume_" + id3(vols[i]) + ".pgm";
        storage::write_pgm(run.out() / name, storage::hstack({gray(ds.slices[idx[mid]].image),
                                                              gray(res[0][i].generated[mid]),
                                                              gray(res[1][i].generated[mid])}));
        run.output(name);
    }
    run.finish({{"fine_wins", std::to_string(wins)}, {"volumes", std::to_string(vols.size())}});
}

void export_figure(Run& run) {
    const auto mode = diffusion::parse_mode(run.cfg().get_string("diffusion.mode"));
    const auto ds = pipeline::read_dataset(run.input("io.data"));
    const auto g = load_for_mode(run, mode);
    auto idx = ds.split_slices(phantom::Split::test);
    require(!idx.empty(), ErrorKind::config, "dataset has no test slices");
    const auto count = static_cast<std::size_t>(std::max<long long>(1, run.cfg().get_int("sample.count")));
    if (idx.size() > count) idx.resize(count);

    // Variation panels use a window centred on 0 spanning +-variation_scale.
    const double vwidth = 2.0 * g.config.variation_scale;
    std::vector<storage::Gray8> rows;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& s = ds.slices[idx[i]];
        const auto prior = g.prior(s.labels);
        const auto recon = g.generate(s.labels, volume::sample_key(run.key(), i));
        const auto v = priors::variation(recon, prior);
        auto row = storage::hstack({gray(s.image), gray(retag<HuImage>(prior)),
                                    storage::window_image(retag<HuImage>(v), 0.0, vwidth), gray(recon)});
        storage::write_pgm(run.out() / ("row_" + pad(i) + ".pgm"), row);
        run.output("row_" + pad(i) + ".pgm");
        rows.push_back(std::move(row));
    }
    storage::write_pgm(run.out() / "figure.pgm", vstack(rows));
    run.output("figure.pgm");
    run.finish({{"columns", "ground_truth,prior,variation,reconstruction"}});
}

// One line: error kind=<kind> code=<n> message="<text>".
void report(ErrorKind kind, std::string msg) {
    for (char& c : msg)
        if (c == '\n' || c == '\r') c = ' ';
        else if (c == '"') c = '\'';
    std::cerr << "error kind=" << to_string(kind) << " code=" << exit_code(kind) << " message=\"" << msg << "\"\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pivm: prior-integrated variation modeling on synthetic CT phantoms"};
    app.require_subcommand(1);
    Options o;

    struct Cmd {
        const char* name;
        const char* help;
        void (*fn)(Run&);
    };
    const Cmd cmds[] = {
        {"gen-data", "generate a phantom dataset", gen_data},
        {"build-priors", "compute organ-mean priors from the train split", build_priors},
        {"train", "train a denoiser (resumes a matching checkpoint in --out)", train},
        {"sample", "sample 2D slices for test label maps", sample},
        {"gen-volume", "generate volumes slice by slice", gen_volume},
        {"eval-fidelity", "per-volume SSIM and FD-r for both modes", eval_fidelity},
        {"eval-seg", "downstream segmentation on original / generated / combined data", eval_seg},
        {"ablate-labels", "train and compare coarse vs fine label conditioning", ablate_labels},
        {"export-figure", "ground truth / prior / variation / reconstruction panels", export_figure},
    };
    void (*chosen)(Run&) = nullptr;
    std::string chosen_name;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", o.config_file, "key = value config file")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "run.seed");
        sub->add_option("--threads", o.threads, "run.threads (1 = bit-exact path)")->check(CLI::PositiveNumber);
        sub->add_option("--out", o.out, "output directory")->required();
        sub->add_option("--mode", o.mode, "diffusion.mode: pivm or cddpm");
        sub->add_option("--data", o.data, "io.data");
        sub->add_option("--priors", o.priors, "io.priors");
        sub->add_option("--checkpoint", o.checkpoint, "io.checkpoint");
        sub->add_option("--set", o.sets, "override any key: --set key=value");
        sub->callback([&chosen, &chosen_name, c] {
            chosen = c.fn;
            chosen_name = c.name;
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        report(ErrorKind::config, e.what());
        return exit_code(ErrorKind::config);
    }

    try {
        Run run(chosen_name, o);
        chosen(run);
    } catch (const Error& e) {
        report(e.kind(), e.what());
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        report(ErrorKind::internal, e.what());
        return exit_code(ErrorKind::internal);
    }
    return 0;
}
