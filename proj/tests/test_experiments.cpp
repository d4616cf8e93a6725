#include <doctest.h>

#include <cmath>

#include "pivm/experiments.hpp"
#include "pivm/volume.hpp"
#include "support.hpp"

using namespace pivm;
using namespace pivm::experiments;
using testing::kind_of;

namespace {

config::RunConfig tiny() {
    config::RunConfig c;
    c.load_text(
        "phantom.image_size = 16\nphantom.n_organs = 4\npriors.label_organs = 4\nphantom.volumes = 4\n"
        "phantom.slices_per_volume = 3\nphantom.train_fraction = 0.5\ndiffusion.T = 5\ndenoiser.epochs = 1\n"
        "denoiser.batch_size = 4\n");
    return c;
}

}  // namespace

TEST_CASE("paired t-test hand example") {
    const std::vector<double> a{1, 2, 3}, b{2, 4, 5};
    const auto t = paired_greater(a, b);
    CHECK(t.n == 3);
    CHECK(t.mean_diff == doctest::Approx(5.0 / 3.0));
    CHECK(t.t == doctest::Approx(5.0));
    CHECK(t.critical == 2.920);
    CHECK(t.significant);
    const auto r = paired_greater(b, a);
    CHECK(r.t == doctest::Approx(-5.0));
    CHECK(!r.significant);
    const std::vector<double> c{1, 2, 3}, d{1.5, 2.5, 3.5};
    CHECK(paired_greater(c, d).significant);
    CHECK(!paired_greater(c, c).significant);
    CHECK(kind_of([&] { paired_greater(std::vector<double>{1.0}, std::vector<double>{2.0}); }) == ErrorKind::config);
}

TEST_CASE("continuity of a ramp volume") {
    // Slice j is constant j: adjacent MAE is 1, any other order is at least 1.
    std::vector<HuImage> vol;
    for (int j = 0; j < 10; ++j) vol.emplace_back(4, 4, static_cast<float>(j));
    const auto c = continuity(vol, {1, 1});
    CHECK(c.adjacent == 1.0);
    CHECK(c.permuted >= 1.0);
    CHECK(continuity(vol, {1, 1}).permuted == c.permuted);
    double sum = 0;
    for (std::uint64_t s = 0; s < 20; ++s) sum += continuity(vol, {s, 2}).permuted;
    CHECK(sum / 20 > 2.0);
    CHECK(kind_of([&] { continuity({vol[0], vol[1]}, {1, 1}); }) == ErrorKind::config);
}

TEST_CASE("coarse labels merge neighbouring organ ids") {
    LabelMap l(9, 1);
    for (int k = 0; k <= 8; ++k) l[static_cast<std::size_t>(k)] = static_cast<std::uint16_t>(k);
    const auto c = pipeline::coarsen_labels(l, 8, 4);
    const std::vector<std::uint16_t> expect{0, 1, 1, 2, 2, 3, 3, 4, 4};
    CHECK(c.data == expect);
    CHECK(pipeline::coarsen_labels(l, 8, 8) == l);
    CHECK(kind_of([&] { pipeline::coarsen_labels(l, 8, 9); }) == ErrorKind::config);
    CHECK(kind_of([&] { pipeline::coarsen_labels(l, 4, 2); }) == ErrorKind::config);
}

TEST_CASE("config mapping and dataset selection") {
    const auto cfg = tiny();
    const auto ds = make_dataset(cfg);
    CHECK(ds.slices.size() == 12);
    CHECK(test_volumes(ds, 0).size() == 2);
    CHECK(test_volumes(ds, 1).size() == 1);
    const auto seg = seg_config(cfg);
    CHECK(seg.n_classes == 5);
    CHECK(seg.input_scale == 400.0);
    auto c2 = cfg;
    c2.set("phantom.train_fraction", "1");
    CHECK(kind_of([&] { test_volumes(make_dataset(c2), 0); }) == ErrorKind::config);
    c2.set("priors.label_organs", "8");
    CHECK(kind_of([&] { generator_config(c2); }) == ErrorKind::config);
}

TEST_CASE("fidelity uses shared noise and renders a CSV") {
    const auto cfg = tiny();
    const auto ds = make_dataset(cfg);
    auto g = pipeline::prepare_generator(ds, generator_config(cfg));
    pipeline::train_generator(g, ds);
    const metrics::FeatureExtractor fx;
    const auto vols = test_volumes(ds, 0);
    const auto a = fidelity(g, ds, vols, {3, 3}, fx);
    const auto b = fidelity(g, ds, vols, {3, 3}, fx, 2);
    REQUIRE(a.size() == 2);
    for (std::size_t v = 0; v < a.size(); ++v) {
        CHECK(a[v].volume == vols[v]);
        CHECK(a[v].ssim == b[v].ssim);
        CHECK(a[v].fd == b[v].fd);
        CHECK(a[v].generated.size() == 3);
        CHECK(std::isfinite(a[v].fd));
    }
    // Slice i of volume v is the generator's sample at sample_key(key.child(v), i).
    const auto idx = ds.volume_slices(vols[0]);
    CHECK(a[0].generated[1] ==
          g.generate(ds.slices[idx[1]].labels, volume::sample_key(StreamKey{3, 3}.child(static_cast<std::uint64_t>(vols[0])), 1)));

    const std::vector<std::string> names{"pivm"};
    const std::vector<std::vector<VolumeFidelity>> res{a};
    const auto csv = fidelity_csv(names, res);
    CHECK(csv.starts_with("volume,metric,method,value\n" + std::to_string(vols[0]) + ",ssim,pivm,"));
    int lines = 0;
    for (char ch : csv) lines += ch == '\n';
    CHECK(lines == 1 + 2 * 2);

    const auto dir = testing::scratch("generator");
    pipeline::save_generator(dir, g, {{"note", "y"}});
    const auto back = pipeline::load_generator(dir);
    CHECK(back.state.model.params().tensors == g.state.model.params().tensors);
    CHECK(back.table.means == g.table.means);
    CHECK(back.x0_lo == g.x0_lo);
    CHECK(back.generate(ds.slices[0].labels, {1, 1}) == g.generate(ds.slices[0].labels, {1, 1}));
}
