#include "pivm/denoiser.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <sstream>

namespace pivm::denoiser {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::corruption, "checkpoint: bad number for " + what + ": '" + s + "'");
}

long long parse_int(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::corruption, "checkpoint: bad integer for " + what + ": '" + s + "'");
}

}  // namespace

Denoiser::Denoiser(nn::UNetConfig config, nn::ParamSet<float> params)
    : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    const auto ref = nn::init_params<float>(config_, 0);
    require(ref.size() == params_.size(), ErrorKind::shape, "denoiser: parameter count does not match architecture");
    for (std::size_t i = 0; i < ref.size(); ++i)
        require(ref.tensors[i].same_shape(params_.tensors[i]) && ref.names[i] == params_.names[i], ErrorKind::shape,
                "denoiser: parameter '" + ref.names[i] + "' has the wrong shape");
}

Denoiser Denoiser::initialize(const nn::UNetConfig& config, std::uint64_t seed) {
    return Denoiser(config, nn::init_params<float>(config, seed));
}

nn::Tensor<float> Denoiser::assemble(const Field& noisy, const Conditioning& cond) const {
    cond.validate(noisy.width, noisy.height);
    require(1 + cond.channels() == config_.in_channels, ErrorKind::shape,
            "denoiser expects " + std::to_string(config_.in_channels - 1) + " conditioning channels, got " +
                std::to_string(cond.channels()));
    nn::Tensor<float> x(config_.in_channels, noisy.height, noisy.width);
    int k = 0;
    auto put = [&](const Field& f) { std::copy(f.data.begin(), f.data.end(), x.channel(k++)); };
    put(noisy);
    put(cond.label);
    if (cond.prior) put(*cond.prior);
    if (cond.previous) put(*cond.previous);
    return x;
}

static Field to_field(const nn::Tensor<float>& t) {
    Field f(t.w, t.h);
    std::copy(t.data.begin(), t.data.begin() + static_cast<std::ptrdiff_t>(t.plane()), f.data.begin());
    return f;
}

Field Denoiser::predict(const Field& noisy, int t, const Conditioning& cond) const {
    nn::Tape<float> tape(false);
    const auto g = nn::build_unet(tape, config_, params_, assemble(noisy, cond),
                                  config_.time_embedding ? std::optional<int>(t) : std::nullopt);
    return to_field(tape.value(g.output));
}

Recorded Denoiser::record(const Field& noisy, int t, const Conditioning& cond) const {
    auto tape = std::make_shared<nn::Tape<float>>(true);
    const auto g = nn::build_unet(*tape, config_, params_, assemble(noisy, cond),
                                  config_.time_embedding ? std::optional<int>(t) : std::nullopt);
    Recorded r;
    r.output = to_field(tape->value(g.output));
    r.backward = [tape, g, this](const Field& dout) {
        const auto& out = tape->value(g.output);
        require(dout.width == out.w && dout.height == out.h, ErrorKind::shape, "denoiser: output gradient shape");
        nn::Tensor<float> grad(1, out.h, out.w);
        grad.data = dout.data;
        tape->backward(g.output, grad);
        return nn::collect_grads(*tape, g, params_);
    };
    return r;
}

nn::UNetConfig denoiser_config(int conditioning_channels) {
    nn::UNetConfig c;
    c.in_channels = 1 + conditioning_channels;
    c.out_channels = 1;
    return c;
}

TrainState start_training(const nn::UNetConfig& config, const TrainConfig& train) {
    require(train.epochs >= 0 && train.batch_size >= 1 && train.threads >= 1, ErrorKind::config,
            "train: epochs >= 0, batch_size >= 1 and threads >= 1 required");
    Denoiser model = Denoiser::initialize(config, train.seed);
    nn::AdamState adam = nn::make_adam(model.params(), train.adam);
    return TrainState{std::move(model), std::move(adam), 0, {}};
}

void train_until(TrainState& state, std::span<const diffusion::TrainingExample> data,
                 const diffusion::NoiseSchedule& schedule, const TrainConfig& train, int until_epoch,
                 const std::function<void(const TrainState&)>& on_epoch) {
    require(!data.empty(), ErrorKind::config, "train: empty dataset");
    require(train.batch_size >= 1 && train.threads >= 1, ErrorKind::config, "train: bad batch size or threads");
    const int last = std::min(until_epoch, train.epochs);
    const StreamKey root{train.seed, tag("train")};
    std::vector<diffusion::TrainingExample> batch;
    while (state.epochs_done < last) {
        const int e = state.epochs_done;
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle = root.child({tag("shuffle"), static_cast<std::uint64_t>(e)}).rng();
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.below(static_cast<std::uint32_t>(i))]);

        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(train.batch_size));
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);
            const StreamKey key = root.child({tag("step"), static_cast<std::uint64_t>(e), steps});
            try {
                auto res = diffusion::training_loss(state.model, batch, schedule, key, train.threads);
                nn::adam_step(state.model.params(), res.grads, state.adam, e);
                loss_sum += res.loss;
            } catch (const Error& err) {
                if (err.kind() != ErrorKind::divergence) throw;
                fail(ErrorKind::divergence, std::string(err.what()) + " (epoch " + std::to_string(e + 1) + ", step " +
                                                std::to_string(steps + 1) + ")");
            }
            ++steps;
        }
        state.log.push_back({e + 1, loss_sum / static_cast<double>(steps), train.adam.lr_at(e)});
        state.epochs_done = e + 1;
        if (on_epoch) on_epoch(state);
    }
}

TrainState train(std::span<const diffusion::TrainingExample> data, const diffusion::NoiseSchedule& schedule,
                 const nn::UNetConfig& config, const TrainConfig& train) {
    TrainState state = start_training(config, train);
    train_until(state, data, schedule, train, train.epochs);
    return state;
}

std::string log_csv(const std::vector<EpochLog>& log) {
    std::string s = "epoch,mean_loss,lr\n";
    for (const auto& e : log) s += std::to_string(e.epoch) + "," + fmt_double(e.mean_loss) + "," + fmt_double(e.lr) + "\n";
    return s;
}

void save_checkpoint(const std::filesystem::path& dir, const TrainState& state, const storage::Record& extra) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create checkpoint directory " + dir.string() + ": " + ec.message());

    const auto& cfg = state.model.config();
    const auto& p = state.model.params();
    storage::Manifest m;
    auto& r = m.add_record();
    const std::string arch = cfg.describe();
    r.emplace_back("format", "pivm-checkpoint-1");
    r.emplace_back("arch", arch);
    r.emplace_back("arch_hash", storage::hex64(storage::fnv1a64(arch)));
    r.emplace_back("in_channels", std::to_string(cfg.in_channels));
    r.emplace_back("out_channels", std::to_string(cfg.out_channels));
    r.emplace_back("widths", std::to_string(cfg.widths[0]) + "," + std::to_string(cfg.widths[1]) + "," +
                                 std::to_string(cfg.widths[2]));
    r.emplace_back("groups", std::to_string(cfg.groups));
    r.emplace_back("time_dim", std::to_string(cfg.time_embedding ? cfg.time_dim : 0));
    r.emplace_back("param_count", std::to_string(p.count()));
    r.emplace_back("epoch", std::to_string(state.epochs_done));
    r.emplace_back("adam.step", std::to_string(state.adam.step));
    r.emplace_back("adam.lr", fmt_double(state.adam.hyper.lr));
    r.emplace_back("adam.beta1", fmt_double(state.adam.hyper.beta1));
    r.emplace_back("adam.beta2", fmt_double(state.adam.hyper.beta2));
    r.emplace_back("adam.eps", fmt_double(state.adam.hyper.eps));
    r.emplace_back("adam.halving_epochs", std::to_string(state.adam.hyper.halving_epochs));
    for (const auto& e : state.log) {
        r.emplace_back("loss." + std::to_string(e.epoch), fmt_double(e.mean_loss));
        r.emplace_back("lr." + std::to_string(e.epoch), fmt_double(e.lr));
    }
    if (!extra.empty()) m.records.push_back(extra);

    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto& t = p.tensors[i];
        const std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(t.c), static_cast<std::uint32_t>(t.h),
                                              static_cast<std::uint32_t>(t.w)};
        storage::write_tensor(dir / ("param." + p.names[i] + ".tns"), dims, t.data);
        storage::write_tensor(dir / ("adam_m." + p.names[i] + ".tns"), dims, state.adam.m[i]);
        storage::write_tensor(dir / ("adam_v." + p.names[i] + ".tns"), dims, state.adam.v[i]);
    }
    storage::write_text(dir / "log.csv", log_csv(state.log));
    m.write(dir / "manifest.txt");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const auto m = storage::Manifest::read(dir / "manifest.txt");
    require(!m.records.empty(), ErrorKind::corruption, "checkpoint manifest is empty");
    const auto& r = m.records.front();
    require(storage::get(r, "format") == "pivm-checkpoint-1", ErrorKind::corruption, "not a pivm checkpoint");

    nn::UNetConfig cfg;
    cfg.in_channels = static_cast<int>(parse_int(storage::get(r, "in_channels"), "in_channels"));
    cfg.out_channels = static_cast<int>(parse_int(storage::get(r, "out_channels"), "out_channels"));
    {
        std::istringstream ws(storage::get(r, "widths"));
        std::string part;
        for (int i = 0; i < 3; ++i) {
            require(static_cast<bool>(std::getline(ws, part, ',')), ErrorKind::corruption, "checkpoint: bad widths");
            cfg.widths[static_cast<std::size_t>(i)] = static_cast<int>(parse_int(part, "widths"));
        }
    }
    cfg.groups = static_cast<int>(parse_int(storage::get(r, "groups"), "groups"));
    const int time_dim = static_cast<int>(parse_int(storage::get(r, "time_dim"), "time_dim"));
    cfg.time_embedding = time_dim > 0;
    if (time_dim > 0) cfg.time_dim = time_dim;
    try {
        cfg.validate();
    } catch (const Error& e) {
        fail(ErrorKind::corruption, std::string("checkpoint architecture invalid: ") + e.what());
    }
    require(storage::get(r, "arch_hash") == storage::hex64(storage::fnv1a64(cfg.describe())), ErrorKind::corruption,
            "checkpoint architecture hash mismatch");

    nn::AdamHyper hyper;
    hyper.lr = parse_double(storage::get(r, "adam.lr"), "adam.lr");
    hyper.beta1 = parse_double(storage::get(r, "adam.beta1"), "adam.beta1");
    hyper.beta2 = parse_double(storage::get(r, "adam.beta2"), "adam.beta2");
    hyper.eps = parse_double(storage::get(r, "adam.eps"), "adam.eps");
    hyper.halving_epochs = static_cast<int>(parse_int(storage::get(r, "adam.halving_epochs"), "adam.halving_epochs"));

    auto params = nn::init_params<float>(cfg, 0);
    nn::AdamState adam = nn::make_adam(params, hyper);
    adam.step = parse_int(storage::get(r, "adam.step"), "adam.step");
    auto load = [&](const std::string& file, const nn::Tensor<float>& like) {
        const auto t = storage::read_tensor(dir / file);
        require(t.dtype == storage::DType::f32 && t.dims.size() == 3 && t.dims[0] == static_cast<std::uint32_t>(like.c) &&
                    t.dims[1] == static_cast<std::uint32_t>(like.h) && t.dims[2] == static_cast<std::uint32_t>(like.w),
                ErrorKind::corruption, "checkpoint tensor " + file + " has the wrong shape");
        return t.f32;
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& name = params.names[i];
        params.tensors[i].data = load("param." + name + ".tns", params.tensors[i]);
        adam.m[i] = load("adam_m." + name + ".tns", params.tensors[i]);
        adam.v[i] = load("adam_v." + name + ".tns", params.tensors[i]);
    }

    Checkpoint ck{TrainState{Denoiser(cfg, std::move(params)), std::move(adam), 0, {}}, {}};
    ck.state.epochs_done = static_cast<int>(parse_int(storage::get(r, "epoch"), "epoch"));
    for (int e = 1; e <= ck.state.epochs_done; ++e) {
        const std::string k = std::to_string(e);
        ck.state.log.push_back({e, parse_double(storage::get(r, "loss." + k), "loss"),
                                parse_double(storage::get(r, "lr." + k), "lr")});
    }
    if (m.records.size() > 1) ck.extra = m.records[1];
    return ck;
}

}  // namespace pivm::denoiser
