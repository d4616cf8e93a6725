#include "pivm/priors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include "pivm/storage.hpp"

namespace pivm::priors {

bool OrganMeanTable::present(int k) const {
    return k >= 0 && k < n_classes() && (k == 0 || counts[static_cast<std::size_t>(k)] > 0);
}

double OrganMeanTable::mean(int k) const {
    require(present(k), ErrorKind::config, "organ mean table has no entry for class " + std::to_string(k));
    return means[static_cast<std::size_t>(k)];
}

MeanAccumulator::MeanAccumulator(double clip_lo, double clip_hi) : lo_(clip_lo), hi_(clip_hi) {
    require(clip_lo < clip_hi, ErrorKind::config, "clip window requires lo < hi");
}

void MeanAccumulator::add(const HuImage& image, const LabelMap& labels) {
    require_same_shape(image, labels, "compute_organ_means");
    for (std::size_t p = 0; p < image.size(); ++p) {
        const std::size_t k = labels[p];
        if (k == 0) continue;
        if (k >= sums_.size()) {
            sums_.resize(k + 1, 0.0);
            counts_.resize(k + 1, 0);
        }
        sums_[k] += std::clamp(static_cast<double>(image[p]), lo_, hi_);
        ++counts_[k];
    }
}

void MeanAccumulator::merge(const MeanAccumulator& other) {
    if (other.sums_.size() > sums_.size()) {
        sums_.resize(other.sums_.size(), 0.0);
        counts_.resize(other.counts_.size(), 0);
    }
    for (std::size_t k = 0; k < other.sums_.size(); ++k) {
        sums_[k] += other.sums_[k];
        counts_[k] += other.counts_[k];
    }
}

OrganMeanTable MeanAccumulator::finish() const {
    OrganMeanTable t;
    t.clip_lo = lo_;
    t.clip_hi = hi_;
    const std::size_t n = std::max<std::size_t>(sums_.size(), 1);
    t.means.assign(n, 0.0);
    t.counts.assign(n, 0);
    for (std::size_t k = 1; k < sums_.size(); ++k) {
        t.counts[k] = counts_[k];
        if (counts_[k] > 0) t.means[k] = sums_[k] / static_cast<double>(counts_[k]);
    }
    return t;
}

OrganMeanTable compute_organ_means(std::span<const phantom::SlicePair> dataset, double clip_lo, double clip_hi,
                                   int threads) {
    require(!dataset.empty(), ErrorKind::config, "compute_organ_means: empty dataset");
    // One partial per slice, merged in slice order: identical for any thread count.
    std::vector<MeanAccumulator> partial(dataset.size(), MeanAccumulator(clip_lo, clip_hi));
    const std::size_t nt = static_cast<std::size_t>(std::max(1, threads));
    auto work = [&](std::size_t tid) {
        for (std::size_t i = tid; i < dataset.size(); i += nt) partial[i].add(dataset[i].image, dataset[i].labels);
    };
    if (nt == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(work, t);
    }
    MeanAccumulator total(clip_lo, clip_hi);
    for (const auto& p : partial) total.merge(p);
    return total.finish();
}

PriorMap build_prior_map(const LabelMap& labels, const OrganMeanTable& table) {
    PriorMap prior(labels.width, labels.height, 0.0f);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        const int k = labels[p];
        if (k == 0) continue;
        if (!table.present(k))
            fail(ErrorKind::config, "build_prior_map: class " + std::to_string(k) + " absent from organ mean table");
        prior[p] = static_cast<float>(table.means[static_cast<std::size_t>(k)]);
    }
    return prior;
}

VariationMap variation(const HuImage& image, const PriorMap& prior) {
    require_same_shape(image, prior, "variation");
    VariationMap v(image.width, image.height);
    for (std::size_t p = 0; p < image.size(); ++p) v[p] = image[p] - prior[p];
    return v;
}

HuImage reconstruct(const PriorMap& prior, const VariationMap& v) {
    require_same_shape(prior, v, "reconstruct");
    HuImage x(prior.width, prior.height);
    for (std::size_t p = 0; p < prior.size(); ++p) x[p] = prior[p] + v[p];
    return x;
}

Field normalize_variation(const VariationMap& v, double scale) {
    require(scale > 0.0, ErrorKind::config, "variation scale must be positive");
    Field f(v.width, v.height);
    const auto s = static_cast<float>(scale);
    for (std::size_t p = 0; p < v.size(); ++p) f[p] = v[p] / s;
    return f;
}

VariationMap denormalize_variation(const Field& f, double scale) {
    require(scale > 0.0, ErrorKind::config, "variation scale must be positive");
    VariationMap v(f.width, f.height);
    const auto s = static_cast<float>(scale);
    for (std::size_t p = 0; p < f.size(); ++p) v[p] = f[p] * s;
    return v;
}

void write_table(const std::filesystem::path& dir, const OrganMeanTable& table) {
    std::filesystem::create_directories(dir);
    std::vector<float> means(table.means.begin(), table.means.end());
    // Counts are stored as float32, exact up to 2^24 pixels per class.
    std::vector<float> counts(table.counts.begin(), table.counts.end());
    const auto n = static_cast<std::uint32_t>(means.size());
    storage::write_tensor(dir / "means.tns", {n}, means);
    storage::write_tensor(dir / "counts.tns", {n}, counts);

    storage::Manifest m;
    auto& r = m.add_record();
    auto fmt = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    r.emplace_back("kind", "organ-mean-table");
    r.emplace_back("clip_lo", fmt(table.clip_lo));
    r.emplace_back("clip_hi", fmt(table.clip_hi));
    r.emplace_back("n_classes", std::to_string(n));
    for (std::size_t k = 0; k < table.means.size(); ++k) r.emplace_back("mean." + std::to_string(k), fmt(table.means[k]));
    m.write(dir / "manifest.txt");
}

OrganMeanTable read_table(const std::filesystem::path& dir) {
    const auto m = storage::Manifest::read(dir / "manifest.txt");
    require(!m.records.empty(), ErrorKind::corruption, "organ mean manifest is empty");
    const auto& r = m.records.front();
    OrganMeanTable t;
    t.clip_lo = std::stod(storage::get(r, "clip_lo"));
    t.clip_hi = std::stod(storage::get(r, "clip_hi"));
    const auto counts = storage::read_tensor(dir / "counts.tns");
    const std::size_t n = std::stoul(storage::get(r, "n_classes"));
    require(counts.dtype == storage::DType::f32 && counts.count() == n, ErrorKind::corruption,
            "organ mean counts do not match manifest");
    for (std::size_t k = 0; k < n; ++k) {
        t.means.push_back(std::stod(storage::get(r, "mean." + std::to_string(k))));
        t.counts.push_back(static_cast<std::uint64_t>(counts.f32[k]));
    }
    return t;
}

}  // namespace pivm::priors
