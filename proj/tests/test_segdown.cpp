#include <doctest.h>

#include <cmath>

#include "pivm/metrics.hpp"
#include "pivm/segdown.hpp"
#include "support.hpp"

using namespace pivm;
using namespace pivm::segdown;
using testing::kind_of;

namespace {

nn::Tensor<float> random_logits(int c, int h, int w, std::uint64_t seed) {
    nn::Tensor<float> t(c, h, w);
    Rng rng(seed, 1);
    for (auto& v : t.data) v = static_cast<float>(rng.normal(0, 2));
    return t;
}

phantom::PhantomConfig small_phantom() {
    phantom::PhantomConfig pc;
    pc.image_size = 32;
    pc.n_organs = 3;
    return pc;
}

SegConfig small_seg(int epochs) {
    SegConfig c;
    c.n_classes = 4;
    c.epochs = epochs;
    c.batch_size = 1;
    return c;
}

}  // namespace

TEST_CASE("argmax hand cases and tie rule") {
    nn::Tensor<float> t(4, 2, 3, 0.0f);
    for (std::size_t i = 0; i < t.plane(); ++i) t.channel(2)[i] = 1.0f;
    for (auto v : argmax(t).data) CHECK(v == 2);
    nn::Tensor<float> tie(4, 1, 1, 0.0f);
    tie.channel(1)[0] = 3.0f;
    tie.channel(3)[0] = 3.0f;
    CHECK(argmax(tie)[0] == 1);
}

TEST_CASE("argmax equals a per-pixel scan") {
    const auto t = random_logits(5, 7, 9, 3);
    const auto m = argmax(t);
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 9; ++x) {
            int best = 0;
            for (int k = 1; k < 5; ++k)
                if (t.channel(k)[y * 9 + x] > t.channel(best)[y * 9 + x]) best = k;
            CHECK(m.at(x, y) == best);
        }
}

TEST_CASE("cross-entropy value and gradient") {
    nn::Tensor<float> one(2, 1, 1, 0.0f);
    LabelMap l(1, 1, 0);
    CHECK(cross_entropy(one, l).loss == doctest::Approx(std::log(2.0)));

    const auto t = random_logits(3, 4, 5, 4);
    LabelMap labels(5, 4);
    Rng rng(2, 2);
    for (auto& v : labels.data) v = static_cast<std::uint8_t>(rng.below(3));
    const auto ce = cross_entropy(t, labels, 2.0);
    for (std::size_t i = 0; i < t.numel(); i += 3) {
        auto up = t, dn = t;
        const float h = 1e-2f;
        up.data[i] += h;
        dn.data[i] -= h;
        const double fd = 2.0 * (cross_entropy(up, labels).loss - cross_entropy(dn, labels).loss) /
                          (static_cast<double>(up.data[i]) - dn.data[i]);
        CHECK(std::abs(fd - ce.grad.data[i]) <= 1e-3 * std::max(1e-2, std::abs(fd)));
    }
    LabelMap bad(5, 4, 3);
    CHECK(kind_of([&] { cross_entropy(t, bad); }) == ErrorKind::config);
    CHECK(kind_of([&] { cross_entropy(t, LabelMap(4, 4, 0)); }) == ErrorKind::shape);
}

TEST_CASE("a single slice is memorized within 300 steps") {
    const auto pc = small_phantom();
    const std::vector<phantom::SlicePair> one{phantom::gen_slice(pc, {3, 3})};
    auto cfg = small_seg(300);
    cfg.adam.lr = 1e-2;
    cfg.adam.halving_epochs = 0;
    const auto seg = train_segmenter(one, cfg);
    const double d = metrics::mean_dice(predict(seg, one[0].image), one[0].labels, cfg.n_classes);
    MESSAGE("dice after 300 steps " << d);
    CHECK(d > 0.95);
}

TEST_CASE("training is deterministic and the loss falls") {
    const auto pc = small_phantom();
    const auto data = phantom::gen_volume(pc, 8, {4, 4});
    auto cfg = small_seg(5);
    cfg.batch_size = 4;
    cfg.adam.lr = 5e-3;
    std::vector<double> la, lb;
    const auto a = train_segmenter(data, cfg, &la);
    const auto b = train_segmenter(data, cfg, &lb);
    CHECK(a.params.tensors == b.params.tensors);
    CHECK(la == lb);
    REQUIRE(la.size() == 5);
    CHECK(la.back() < la.front());
    cfg.threads = 3;
    CHECK(train_segmenter(data, cfg).params.tensors == a.params.tensors);
    CHECK(evaluate(a, data, 4).dice == evaluate(b, data, 4).dice);
}

TEST_CASE("experiments: sources, isolation and reports") {
    const auto pc = small_phantom();
    ExperimentData d;
    d.original = phantom::gen_volume(pc, 3, {1, 1});
    d.generated = phantom::gen_volume(pc, 2, {1, 2});
    d.eval = phantom::gen_volume(pc, 2, {1, 3});
    d.original_volumes = {1};
    d.generated_volumes = {1};
    d.eval_volumes = {3};
    SegExperiment e;
    e.config = small_seg(1);

    e.source = Source::original;
    const auto orig = run_experiment(e, d);
    CHECK(orig.train_slices == 3);
    const auto plain = evaluate(train_segmenter(d.original, e.config), d.eval, 4);
    CHECK(orig.scores.dice == plain.dice);
    CHECK(orig.scores.miou == plain.miou);

    e.source = Source::combined;
    e.method = "pivm";
    const auto comb = run_experiment(e, d);
    CHECK(comb.train_slices == 5);
    e.source = Source::generated;
    CHECK(run_experiment(e, d).train_slices == 2);

    auto overlap = d;
    overlap.eval_volumes = {1};
    CHECK(kind_of([&] { run_experiment(e, overlap); }) == ErrorKind::config);
    auto empty = d;
    empty.generated.clear();
    CHECK(kind_of([&] { run_experiment(e, empty); }) == ErrorKind::config);

    ExperimentResult undefined = orig;
    undefined.scores.hd.reset();
    undefined.scores.asd.reset();
    const std::vector<ExperimentResult> rows{orig, comb, undefined};
    const auto csv = report_csv(rows);
    CHECK(csv.starts_with("method,source,metric,value\n"));
    int lines = 0;
    for (char c : csv) lines += c == '\n';
    CHECK(lines == 1 + 4 * 3);
    CHECK(csv.find("pivm,combined,dice,") != std::string::npos);
    CHECK(csv.find("real,original,hd,undefined-metric") != std::string::npos);
    CHECK(parse_source("combined") == Source::combined);
    CHECK(kind_of([] { parse_source("synthetic"); }) == ErrorKind::config);
}

TEST_CASE("evaluation counts undefined boundary pairs") {
    const auto pc = small_phantom();
    const auto slice = phantom::gen_slice(pc, {6, 6});
    SegConfig cfg = small_seg(0);
    auto seg = init_segmenter(cfg);
    // Force every pixel to background so each organ in the ground truth is missing from the prediction.
    for (std::size_t i = 0; i < seg.params.size(); ++i) {
        if (!seg.params.names[i].starts_with("out.")) continue;
        auto& t = seg.params.tensors[i].data;
        std::fill(t.begin(), t.end(), 0.0f);
        if (seg.params.names[i] == "out.bias") t[0] = 10.0f;
    }
    const std::vector<phantom::SlicePair> eval{slice};
    const auto s = evaluate(seg, eval, 4);
    int present = 0;
    for (int k = 1; k < 4; ++k) {
        const auto m = metrics::mask_of(slice.labels, k);
        present += std::count(m.data.begin(), m.data.end(), 1) > 0;
    }
    CHECK(s.undefined_pairs == present);
    CHECK(s.defined_pairs == 0);
    CHECK(!s.hd.has_value());
    CHECK(kind_of([&] { evaluate(seg, {}, 4); }) == ErrorKind::config);
}
