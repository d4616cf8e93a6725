#include <doctest.h>

#include <cmath>

#include "pivm/denoiser.hpp"
#include "pivm/priors.hpp"
#include "pivm/volume.hpp"
#include "support.hpp"

using namespace pivm;
using namespace pivm::volume;
using testing::kind_of;

namespace {

struct Fixture {
    phantom::PhantomConfig pc;
    std::vector<phantom::SlicePair> slices;
    priors::OrganMeanTable table;
    diffusion::NoiseSchedule schedule = diffusion::linear_schedule(8, 5e-4, 0.1);
    VolumeSettings settings;
    denoiser::Denoiser model = denoiser::Denoiser::initialize(denoiser::denoiser_config(3), 2);

    Fixture() {
        pc.image_size = 16;
        pc.n_organs = 3;
        slices = phantom::gen_volume(pc, 4, {1, 2});
        table = priors::compute_organ_means(slices);
        settings.codec = {diffusion::Mode::variation, 150.0, 400.0};
        settings.conditioning = {diffusion::Mode::variation, 4, 400.0, true};
    }

    VolumeRequest request(std::size_t n, StreamKey key) const {
        VolumeRequest r;
        for (std::size_t i = 0; i < n; ++i) {
            r.labels.push_back(slices[i].labels);
            r.priors.push_back(priors::build_prior_map(slices[i].labels, table));
        }
        r.key = key;
        return r;
    }
};

std::vector<HuImage> random_volume(int w, int h, int n, std::uint64_t seed) {
    std::vector<HuImage> v;
    Rng rng(seed, 1);
    for (int j = 0; j < n; ++j) {
        HuImage s(w, h);
        for (auto& p : s.data) p = static_cast<float>(rng.normal(0, 100));
        v.push_back(std::move(s));
    }
    return v;
}

}  // namespace

TEST_CASE("a one-slice volume is the 2D sample with a zero previous channel") {
    const Fixture f;
    const auto req = f.request(1, {5, 6});
    const auto vol = generate_volume(f.model, req, f.schedule, f.settings);
    REQUIRE(vol.size() == 1);
    const auto cond = diffusion::make_conditioning(f.settings.conditioning, req.labels[0], req.priors[0], nullptr);
    const auto signal = diffusion::sample(f.model, cond, f.schedule, sample_key(req.key, 0), f.settings.sampling);
    CHECK(vol[0] == f.settings.codec.decode(signal, req.priors[0]));

    // The first slice of a longer volume is the same image.
    CHECK(generate_volume(f.model, f.request(4, {5, 6}), f.schedule, f.settings)[0] == vol[0]);
}

TEST_CASE("volumes are deterministic and later slices see the previous one") {
    const Fixture f;
    const auto a = generate_volume(f.model, f.request(4, {1, 1}), f.schedule, f.settings);
    const auto b = generate_volume(f.model, f.request(4, {1, 1}), f.schedule, f.settings);
    CHECK(a == b);
    CHECK(!(a == generate_volume(f.model, f.request(4, {1, 2}), f.schedule, f.settings)));

    // Slice 2 conditioned on a zero channel differs from slice 2 of the chain.
    const auto req = f.request(2, {1, 1});
    const auto cond = diffusion::make_conditioning(f.settings.conditioning, req.labels[1], req.priors[1], nullptr);
    const auto alone = f.settings.codec.decode(
        diffusion::sample(f.model, cond, f.schedule, sample_key(req.key, 1), f.settings.sampling), req.priors[1]);
    CHECK(!(alone == a[1]));

    auto scaled = f.request(4, {1, 1});
    scaled.noise_scale = true;
    const auto c = generate_volume(f.model, scaled, f.schedule, f.settings);
    CHECK(c[0] == a[0]);
    CHECK(!(c[1] == a[1]));
    for (const auto& s : c)
        for (float v : s.data) CHECK(std::isfinite(v));
}

TEST_CASE("volume requests are validated") {
    const Fixture f;
    auto req = f.request(2, {1, 1});
    req.priors.pop_back();
    CHECK(kind_of([&] { generate_volume(f.model, req, f.schedule, f.settings); }) == ErrorKind::shape);
    auto settings = f.settings;
    settings.conditioning.previous_slice = false;
    CHECK(kind_of([&] { generate_volume(f.model, f.request(2, {1, 1}), f.schedule, settings); }) == ErrorKind::config);
    CHECK(kind_of([&] { generate_volume(f.model, VolumeRequest{}, f.schedule, f.settings); }) == ErrorKind::config);
}

TEST_CASE("reslice index oracle") {
    const auto vol = random_volume(7, 5, 6, 3);
    Rng rng(9, 9);
    for (int trial = 0; trial < 50; ++trial) {
        const int r = static_cast<int>(rng.below(5)), c = static_cast<int>(rng.below(7));
        const auto cor = reslice(vol, Plane::coronal, r);
        const auto sag = reslice(vol, Plane::sagittal, c);
        REQUIRE(cor.width == 7);
        REQUIRE(cor.height == 6);
        REQUIRE(sag.width == 5);
        REQUIRE(sag.height == 6);
        const int i = static_cast<int>(rng.below(7)), j = static_cast<int>(rng.below(6)), y = static_cast<int>(rng.below(5));
        CHECK(cor.at(i, j) == vol[static_cast<std::size_t>(j)].at(i, r));
        CHECK(sag.at(y, j) == vol[static_cast<std::size_t>(j)].at(c, y));
    }
}

TEST_CASE("stacking every coronal reslice reproduces the volume") {
    const auto vol = random_volume(6, 4, 5, 4);
    std::vector<HuImage> rows;
    for (int r = 0; r < 4; ++r) rows.push_back(reslice(vol, Plane::coronal, r));
    for (std::size_t j = 0; j < vol.size(); ++j)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 6; ++x) CHECK(rows[static_cast<std::size_t>(y)].at(x, static_cast<int>(j)) == vol[j].at(x, y));
}

TEST_CASE("reslice of a constant volume is constant and bad requests fail") {
    const std::vector<HuImage> vol(3, HuImage(4, 4, 42.0f));
    for (float v : reslice(vol, Plane::sagittal, 2).data) CHECK(v == 42.0f);
    CHECK(kind_of([&] { reslice(vol, Plane::coronal, 4); }) == ErrorKind::config);
    CHECK(kind_of([&] { reslice({vol[0]}, Plane::coronal, 0); }) == ErrorKind::config);
    CHECK(parse_plane("sagittal") == Plane::sagittal);
    CHECK(kind_of([] { parse_plane("axial"); }) == ErrorKind::config);
}
