#include <doctest.h>

#include <cmath>

#include "pivm/denoiser.hpp"
#include "support.hpp"

using namespace pivm;
using namespace pivm::denoiser;
using testing::kind_of;

namespace {

nn::UNetConfig small_config(int conditioning) {
    auto c = denoiser_config(conditioning);
    c.widths = {8, 16, 16};
    return c;
}

std::vector<diffusion::TrainingExample> toy_data(int n, int size, std::uint64_t seed) {
    std::vector<diffusion::TrainingExample> out;
    for (int k = 0; k < n; ++k) {
        Field x0(size, size), lab(size, size);
        Rng rng(seed, static_cast<std::uint64_t>(k));
        const int cx = 4 + static_cast<int>(rng.below(static_cast<std::uint32_t>(size - 8)));
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const bool in = std::abs(x - cx) + std::abs(y - size / 2) < size / 4;
                lab.at(x, y) = in ? 0.5f : 0.0f;
                x0.at(x, y) = in ? 0.8f : -0.4f;
            }
        out.push_back({x0, Conditioning{lab, std::nullopt, std::nullopt}});
    }
    return out;
}

}  // namespace

TEST_CASE("zero input with a zeroed final layer gives zero output") {
    auto d = Denoiser::initialize(small_config(1), 3);
    auto& p = d.params();
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p.names[i].starts_with("out.")) std::fill(p.tensors[i].data.begin(), p.tensors[i].data.end(), 0.0f);
    const auto y = d.predict(Field(16, 16, 0.0f), 5, Conditioning{Field(16, 16, 0.0f), std::nullopt, std::nullopt});
    for (float v : y.data) CHECK(v == 0.0f);
}

TEST_CASE("previous-slice channel is live and predictions are deterministic") {
    const auto d = Denoiser::initialize(small_config(3), 8);
    const auto noisy = diffusion::standard_normal_field(16, 16, {1, 1});
    Conditioning c{Field(16, 16, 0.25f), Field(16, 16, 0.1f), Field(16, 16, 0.0f)};
    const auto a = d.predict(noisy, 12, c);
    CHECK(d.predict(noisy, 12, c) == a);
    c.previous = diffusion::standard_normal_field(16, 16, {1, 2});
    const auto b = d.predict(noisy, 12, c);
    double delta = 0;
    for (std::size_t i = 0; i < a.size(); ++i) delta += std::abs(a[i] - b[i]);
    CHECK(delta > 1e-3);
    CHECK(d.record(noisy, 12, c).output == b);
    c.previous.reset();
    CHECK(kind_of([&] { d.predict(noisy, 12, c); }) == ErrorKind::shape);
}

TEST_CASE("parameter shapes are validated") {
    auto p = nn::init_params<float>(small_config(1), 1);
    p.tensors[0] = nn::Tensor<float>(1, 1, 1);
    CHECK(kind_of([&] { Denoiser(small_config(1), p); }) == ErrorKind::shape);
}

TEST_CASE("one-sample dataset is memorized within 200 steps") {
    const auto data = toy_data(1, 16, 4);
    const auto s = diffusion::linear_schedule(100, 5e-4, 0.1);
    TrainConfig tc;
    tc.epochs = 200;
    tc.batch_size = 1;
    tc.adam.lr = 1e-2;
    tc.adam.halving_epochs = 0;
    const auto st = train(data, s, denoiser_config(1), tc);
    REQUIRE(st.log.size() == 200);
    double tail = 0;
    for (std::size_t i = 180; i < 200; ++i) tail += st.log[i].mean_loss;
    tail /= 20;
    MESSAGE("first loss " << st.log.front().mean_loss << ", mean of last 20 " << tail);
    CHECK(tail < 0.05);
}

TEST_CASE("resumed training matches uninterrupted training") {
    const auto data = toy_data(6, 16, 5);
    const auto s = diffusion::linear_schedule(50, 5e-4, 0.1);
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 4;
    tc.adam.lr = 1e-3;
    tc.adam.halving_epochs = 2;
    tc.seed = 9;
    const auto full = train(data, s, small_config(1), tc);

    const auto dir = testing::scratch("resume");
    auto part = start_training(small_config(1), tc);
    train_until(part, data, s, tc, 2);
    save_checkpoint(dir, part, {{"note", "x"}});
    auto loaded = load_checkpoint(dir);
    CHECK(storage::get(loaded.extra, "note") == "x");
    CHECK(loaded.state.epochs_done == 2);
    train_until(loaded.state, data, s, tc, 4);
    REQUIRE(loaded.state.log.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(loaded.state.log[i].mean_loss == doctest::Approx(full.log[i].mean_loss).epsilon(1e-12));
    for (std::size_t i = 2; i < 4; ++i) CHECK(loaded.state.log[i].mean_loss == full.log[i].mean_loss);
    CHECK(loaded.state.model.params().tensors == full.model.params().tensors);
    CHECK(loaded.state.adam.step == full.adam.step);
    CHECK(full.log[1].lr == 1e-3);
    CHECK(full.log[2].lr == 5e-4);

    tc.threads = 3;
    CHECK(train(data, s, small_config(1), tc).model.params().tensors == full.model.params().tensors);
}

TEST_CASE("training loss falls over epochs") {
    const auto data = toy_data(16, 16, 6);
    const auto s = diffusion::linear_schedule(50, 5e-4, 0.1);
    TrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 4;
    tc.adam.lr = 2e-3;
    const auto st = train(data, s, small_config(1), tc);
    CHECK(st.log.back().mean_loss < st.log.front().mean_loss);
    const auto csv = log_csv(st.log);
    CHECK(csv.starts_with("epoch,mean_loss,lr\n1,"));
}

TEST_CASE("checkpoint corruption is detected") {
    TrainConfig tc;
    const auto st = start_training(small_config(2), tc);
    const auto dir = testing::scratch("ckpt");
    save_checkpoint(dir, st);
    const auto back = load_checkpoint(dir);
    CHECK(back.state.model.params().tensors == st.model.params().tensors);
    CHECK(back.state.model.config().describe() == st.model.config().describe());

    auto text = storage::read_text(dir / "manifest.txt");
    const auto at = text.find("\ngroups=4");
    REQUIRE(at != std::string::npos);
    auto bad = text;
    bad.replace(at, 9, "\ngroups=8");
    storage::write_text(dir / "manifest.txt", bad);
    CHECK(kind_of([&] { load_checkpoint(dir); }) == ErrorKind::corruption);

    storage::write_text(dir / "manifest.txt", text);
    std::filesystem::remove(dir / "param.out.bias.tns");
    CHECK(kind_of([&] { load_checkpoint(dir); }) != ErrorKind::internal);
    CHECK(kind_of([&] { load_checkpoint(testing::scratch("none")); }) == ErrorKind::io);
}

TEST_CASE("divergence reports the failing step") {
    auto data = toy_data(2, 16, 7);
    data[1].target[5] = NAN;
    const auto s = diffusion::linear_schedule(20);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 1;
    try {
        train(data, s, small_config(1), tc);
        FAIL("expected divergence");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::divergence);
        CHECK(std::string(e.what()).find("epoch 1, step") != std::string::npos);
    }
}
