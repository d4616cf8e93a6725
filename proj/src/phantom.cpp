#include "pivm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace pivm::phantom {

namespace {

// Organ semi-axes as a fraction of the image side.
constexpr double kAxisLo = 0.05;
constexpr double kAxisHi = 0.11;
// Angular frequency (radians per slice) of the smooth organ motion.
constexpr double kOmega = 0.35;
constexpr int kPlacementAttempts = 400;
// Full re-draws of the organ layout before giving up.
constexpr int kLayoutRestarts = 64;

constexpr double kBodyAxisX = 0.46;
constexpr double kBodyAxisY = 0.38;

struct Organ {
    double cx, cy;      // base centre
    double ax, ay;      // base semi-axes
    double angle;
    double phase_x, phase_y, phase_s;
    double amplitude;   // centre motion amplitude per axis, pixels
    double scale_amp;   // relative semi-axis oscillation
};

struct Ellipse {
    double cx, cy, ax, ay, cos_t, sin_t;

    bool contains(double x, double y) const {
        const double dx = x - cx;
        const double dy = y - cy;
        const double u = (dx * cos_t + dy * sin_t) / ax;
        const double v = (-dx * sin_t + dy * cos_t) / ay;
        return u * u + v * v <= 1.0;
    }
    double reach() const { return std::max(ax, ay); }
};

Ellipse at_slice(const Organ& o, int s) {
    const double scale = 1.0 + o.scale_amp * std::sin(kOmega * s + o.phase_s);
    return Ellipse{o.cx + o.amplitude * std::sin(kOmega * s + o.phase_x),
                   o.cy + o.amplitude * std::sin(kOmega * s + o.phase_y),
                   o.ax * scale,
                   o.ay * scale,
                   std::cos(o.angle),
                   std::sin(o.angle)};
}

template <class Fn>
void for_each_pixel(const Ellipse& e, int n, Fn&& fn) {
    const int r = static_cast<int>(std::ceil(e.reach())) + 1;
    const int x0 = std::max(0, static_cast<int>(std::floor(e.cx)) - r);
    const int x1 = std::min(n - 1, static_cast<int>(std::ceil(e.cx)) + r);
    const int y0 = std::max(0, static_cast<int>(std::floor(e.cy)) - r);
    const int y1 = std::min(n - 1, static_cast<int>(std::ceil(e.cy)) + r);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (e.contains(x, y)) fn(x, y);
}

struct Geometry {
    std::vector<Organ> organs;  // organ k at index k - 1
};

// Places organs so that every slice in [0, n_slices) keeps them inside the
// body and pairwise disjoint. Checked by rasterisation, not bounding circles.
// Returns false if some organ found no free spot.
bool try_place_organs(const PhantomConfig& cfg, int n_slices, Rng& rng, Geometry& geo) {
    const int n = cfg.image_size;

    const double amplitude =
        std::min(0.5 * cfg.slice_drift * n / (kOmega * std::numbers::sqrt2), 0.06 * n);
    const double scale_amp = std::min(2.0 * cfg.slice_drift, 0.15);

    // occupied[s][pixel] holds the organ id covering the pixel in slice s.
    std::vector<std::vector<std::uint16_t>> occupied(
        static_cast<std::size_t>(n_slices), std::vector<std::uint16_t>(static_cast<std::size_t>(n) * n, 0));

    geo.organs.clear();
    for (int k = 1; k <= cfg.n_organs; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
            Organ o{};
            o.ax = rng.uniform(kAxisLo, kAxisHi) * n;
            o.ay = rng.uniform(kAxisLo, kAxisHi) * n;
            o.angle = rng.uniform(0.0, std::numbers::pi);
            o.cx = rng.uniform(0.0, n - 1.0);
            o.cy = rng.uniform(0.0, n - 1.0);
            o.phase_x = rng.uniform(0.0, 2.0 * std::numbers::pi);
            o.phase_y = rng.uniform(0.0, 2.0 * std::numbers::pi);
            o.phase_s = rng.uniform(0.0, 2.0 * std::numbers::pi);
            o.amplitude = amplitude;
            o.scale_amp = scale_amp;

            bool ok = true;
            for (int s = 0; s < n_slices && ok; ++s) {
                const Ellipse e = at_slice(o, s);
                // The ellipse must lie inside the image with a one-pixel margin.
                if (e.cx - e.reach() < 1.0 || e.cy - e.reach() < 1.0 || e.cx + e.reach() > n - 2.0 ||
                    e.cy + e.reach() > n - 2.0) {
                    ok = false;
                    break;
                }
                int count = 0;
                const auto& occ = occupied[static_cast<std::size_t>(s)];
                for_each_pixel(e, n, [&](int x, int y) {
                    ++count;
                    if (!inside_body(x, y, n)) ok = false;
                    // Require a one-pixel gap to every other organ.
                    for (int dy = -1; dy <= 1 && ok; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int xx = x + dx, yy = y + dy;
                            if (xx < 0 || yy < 0 || xx >= n || yy >= n) continue;
                            if (occ[static_cast<std::size_t>(yy) * n + xx] != 0) {
                                ok = false;
                                break;
                            }
                        }
                });
                if (count < 4) ok = false;
            }
            if (!ok) continue;

            for (int s = 0; s < n_slices; ++s) {
                auto& occ = occupied[static_cast<std::size_t>(s)];
                for_each_pixel(at_slice(o, s), n,
                               [&](int x, int y) { occ[static_cast<std::size_t>(y) * n + x] = static_cast<std::uint16_t>(k); });
            }
            geo.organs.push_back(o);
            placed = true;
        }
        if (!placed) return false;
    }
    return true;
}

Geometry place_organs(const PhantomConfig& cfg, int n_slices, StreamKey key) {
    Rng rng = key.child(tag("geometry")).rng();
    Geometry geo;
    for (int r = 0; r < kLayoutRestarts; ++r)
        if (try_place_organs(cfg, n_slices, rng, geo)) return geo;
    fail(ErrorKind::config, "phantom: could not place " + std::to_string(cfg.n_organs) + " organs without overlap in " +
                                std::to_string(kLayoutRestarts) + " layouts");
}

SlicePair render(const PhantomConfig& cfg, const Geometry& geo, const std::vector<double>& means, int s,
                 StreamKey key) {
    const int n = cfg.image_size;
    SlicePair out{HuImage(n, n), LabelMap(n, n, 0)};
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            out.image.at(x, y) = static_cast<float>(inside_body(x, y, n) ? cfg.background_hu : cfg.air_hu);

    for (std::size_t i = 0; i < geo.organs.size(); ++i) {
        const auto k = static_cast<std::uint16_t>(i + 1);
        for_each_pixel(at_slice(geo.organs[i], s), n, [&](int x, int y) { out.labels.at(x, y) = k; });
    }

    // Texture draws in raster order so the stream use is independent of geometry.
    Rng rng = key.child({tag("texture"), static_cast<std::uint64_t>(s)}).rng();
    for (std::size_t p = 0; p < out.image.size(); ++p) {
        const auto k = out.labels[p];
        if (k == 0) continue;
        out.image[p] = static_cast<float>(rng.normal(means[k], cfg.organ_texture_sd));
    }
    return out;
}

}  // namespace

void PhantomConfig::validate() const {
    require(image_size >= 16, ErrorKind::config, "phantom.image_size must be >= 16");
    require(n_organs >= 0 && n_organs <= 64, ErrorKind::config, "phantom.n_organs must be in [0, 64]");
    require(organ_mean_lo <= organ_mean_hi, ErrorKind::config, "phantom organ mean range is inverted");
    require(organ_texture_sd >= 0.0, ErrorKind::config, "phantom.organ_texture_sd must be >= 0");
    require(slice_drift >= 0.0 && slice_drift < 0.5, ErrorKind::config, "phantom.slice_drift must be in [0, 0.5)");
}

bool inside_body(int x, int y, int n) {
    const double c = (n - 1) / 2.0;
    const double u = (x - c) / (kBodyAxisX * n);
    const double v = (y - c) / (kBodyAxisY * n);
    return u * u + v * v <= 1.0;
}

std::vector<double> true_means(const PhantomConfig& config) {
    Rng rng(config.seed, tag("organ-means"));
    std::vector<double> means(static_cast<std::size_t>(config.n_organs) + 1, 0.0);
    for (int k = 1; k <= config.n_organs; ++k) means[k] = rng.uniform(config.organ_mean_lo, config.organ_mean_hi);
    return means;
}

SlicePair gen_slice(const PhantomConfig& config, StreamKey key) {
    return gen_volume(config, 1, key).front();
}

std::vector<SlicePair> gen_volume(const PhantomConfig& config, int n_slices, StreamKey key) {
    config.validate();
    require(n_slices >= 1, ErrorKind::config, "phantom: n_slices must be >= 1");
    const Geometry geo = place_organs(config, n_slices, key);
    const auto means = true_means(config);
    std::vector<SlicePair> out;
    out.reserve(static_cast<std::size_t>(n_slices));
    for (int s = 0; s < n_slices; ++s) out.push_back(render(config, geo, means, s, key));
    return out;
}

const char* to_string(Split split) { return split == Split::train ? "train" : "test"; }

std::vector<int> PhantomDataset::volume_ids(Split split) const {
    std::vector<int> ids;
    for (const auto& r : manifest)
        if (r.split == split && (ids.empty() || ids.back() != r.volume)) ids.push_back(r.volume);
    return ids;
}

std::vector<std::size_t> PhantomDataset::volume_slices(int volume) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.size(); ++i)
        if (manifest[i].volume == volume) idx.push_back(i);
    return idx;
}

std::vector<std::size_t> PhantomDataset::split_slices(Split split) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.size(); ++i)
        if (manifest[i].split == split) idx.push_back(i);
    return idx;
}

PhantomDataset make_dataset(const PhantomConfig& config, int n_volumes, int slices_per_volume,
                            double split_fraction, StreamKey key) {
    config.validate();
    require(n_volumes >= 1, ErrorKind::config, "phantom: n_volumes must be >= 1");
    require(split_fraction > 0.0 && split_fraction < 1.0, ErrorKind::config,
            "phantom: split_fraction must be in (0, 1)");

    int n_train = static_cast<int>(std::floor(n_volumes * split_fraction + 0.5));
    if (n_volumes >= 2) n_train = std::clamp(n_train, 1, n_volumes - 1);

    PhantomDataset ds;
    ds.config = config;
    for (int v = 0; v < n_volumes; ++v) {
        const StreamKey vk = key.child(static_cast<std::uint64_t>(v));
        auto slices = gen_volume(config, slices_per_volume, vk);
        for (int s = 0; s < slices_per_volume; ++s) {
            ds.slices.push_back(std::move(slices[static_cast<std::size_t>(s)]));
            ds.manifest.push_back(SliceRecord{v, s + 1, v < n_train ? Split::train : Split::test, vk});
        }
    }
    return ds;
}

}  // namespace pivm::phantom
