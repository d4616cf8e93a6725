#include "pivm/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "pivm/nn/tape.hpp"
#include "pivm/rng.hpp"

namespace pivm::metrics {

void SsimConfig::validate() const {
    require(window >= 1 && window % 2 == 1, ErrorKind::config, "ssim: window size must be odd and positive");
    require(dynamic_range > 0.0, ErrorKind::config, "ssim: dynamic range must be positive");
    require(!gaussian || sigma > 0.0, ErrorKind::config, "ssim: sigma must be positive");
}

double ssim(const HuImage& a, const HuImage& b, const SsimConfig& config) {
    config.validate();
    require_same_shape(a, b, "ssim");
    const int n = config.window;
    require(a.width >= n && a.height >= n, ErrorKind::shape, "ssim: image smaller than window");

    std::vector<double> w(static_cast<std::size_t>(n) * n);
    const int r = n / 2;
    double total = 0.0;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double dy = y - r, dx = x - r;
            const double v = config.gaussian ? std::exp(-(dx * dx + dy * dy) / (2.0 * config.sigma * config.sigma)) : 1.0;
            w[static_cast<std::size_t>(y) * n + x] = v;
            total += v;
        }
    for (auto& v : w) v /= total;

    const double c1 = std::pow(config.k1 * config.dynamic_range, 2);
    const double c2 = std::pow(config.k2 * config.dynamic_range, 2);
    double sum = 0.0;
    std::size_t count = 0;
    for (int oy = 0; oy + n <= a.height; ++oy)
        for (int ox = 0; ox + n <= a.width; ++ox) {
            double ma = 0, mb = 0;
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x) {
                    const double k = w[static_cast<std::size_t>(y) * n + x];
                    ma += k * a.at(ox + x, oy + y);
                    mb += k * b.at(ox + x, oy + y);
                }
            double va = 0, vb = 0, cab = 0;
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x) {
                    const double k = w[static_cast<std::size_t>(y) * n + x];
                    const double da = a.at(ox + x, oy + y) - ma, db = b.at(ox + x, oy + y) - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cab += k * da * db;
                }
            sum += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return sum / static_cast<double>(count);
}

FeatureExtractor::FeatureExtractor(std::uint64_t seed, double window_lo, double window_hi)
    : window_lo_(window_lo), window_hi_(window_hi) {
    require(window_lo < window_hi, ErrorKind::config, "feature extractor: empty intensity window");
    const int widths[] = {1, 16, 32, kDim};
    const StreamKey root{seed, tag("fd-features")};
    for (int s = 0; s < 3; ++s) {
        Stage st{widths[s], widths[s + 1], {}};
        st.weight.resize(static_cast<std::size_t>(st.cout) * st.cin * 9);
        Rng rng = root.child(static_cast<std::uint64_t>(s)).rng();
        const double sd = std::sqrt(2.0 / (9.0 * st.cin));
        for (auto& v : st.weight) v = static_cast<float>(rng.normal(0.0, sd));
        stages_.push_back(std::move(st));
    }
}

std::vector<double> FeatureExtractor::features(const HuImage& image) const {
    require(image.width % 8 == 0 && image.height % 8 == 0 && image.width > 0 && image.height > 0, ErrorKind::shape,
            "feature extractor: image sides must be positive multiples of 8");
    nn::Tape<float> tape(false);
    nn::Tensor<float> x(1, image.height, image.width);
    const double mid = 0.5 * (window_lo_ + window_hi_), half = 0.5 * (window_hi_ - window_lo_);
    for (std::size_t i = 0; i < image.size(); ++i)
        x.data[i] = static_cast<float>((std::clamp<double>(image[i], window_lo_, window_hi_) - mid) / half);
    auto id = tape.leaf(std::move(x));
    for (const auto& st : stages_) {
        nn::Tensor<float> w(st.cout, st.cin, 9);
        w.data = st.weight;
        const auto wi = tape.leaf(std::move(w));
        const auto bi = tape.leaf(nn::Tensor<float>(st.cout, 1, 1));
        id = tape.avg_pool2x(tape.relu(tape.conv3x3(id, wi, bi, 1)));
    }
    const auto& out = tape.value(id);
    std::vector<double> f(static_cast<std::size_t>(out.c), 0.0);
    for (int c = 0; c < out.c; ++c) {
        double s = 0;
        const float* p = out.channel(c);
        for (std::size_t i = 0; i < out.plane(); ++i) s += p[i];
        f[static_cast<std::size_t>(c)] = s / static_cast<double>(out.plane());
    }
    return f;
}

namespace {

struct Moments {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

Moments moments(std::span<const std::vector<double>> set, std::size_t d, const FrechetOptions& opt) {
    const auto n = set.size();
    require(n >= 2, ErrorKind::config, "frechet_distance: each set needs at least 2 samples");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i) {
        require(set[i].size() == d, ErrorKind::shape, "frechet_distance: descriptor dimension mismatch");
        for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = set[i][j];
    }
    Moments m;
    m.mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - m.mean.transpose();
    m.cov = (c.transpose() * c) / static_cast<double>(n - 1);
    if (n <= d) {
        require(opt.allow_shrinkage, ErrorKind::config,
                "frechet_distance: set of " + std::to_string(n) + " samples is too small for " + std::to_string(d) +
                    "-dim descriptors and shrinkage is disabled");
        const double target = m.cov.trace() / static_cast<double>(d);
        m.cov = (1.0 - opt.shrinkage) * m.cov +
                opt.shrinkage * target * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    }
    return m;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(std::span<const std::vector<double>> a, std::span<const std::vector<double>> b,
                        const FrechetOptions& options) {
    require(!a.empty() && !b.empty(), ErrorKind::config, "frechet_distance: empty feature set");
    const std::size_t d = a.front().size();
    require(d > 0, ErrorKind::shape, "frechet_distance: zero-dimensional descriptors");
    const Moments ma = moments(a, d, options), mb = moments(b, d, options);
    // tr((Sa Sb)^{1/2}) = tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}), a symmetric PSD form.
    const Eigen::MatrixXd ra = psd_sqrt(ma.cov);
    Eigen::MatrixXd inner = ra * mb.cov * ra;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
    const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double fd = (ma.mean - mb.mean).squaredNorm() + ma.cov.trace() + mb.cov.trace() - 2.0 * cross;
    return std::max(fd, 0.0);
}

Mask mask_of(const LabelMap& labels, int k) {
    Mask m(labels.width, labels.height);
    for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] == k ? 1 : 0;
    return m;
}

namespace {

struct Overlap {
    std::size_t p = 0, g = 0, both = 0;
};

Overlap overlap(const LabelMap& pred, const LabelMap& gt, int k) {
    require_same_shape(pred, gt, "segmentation metric");
    Overlap o;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == k, g = gt[i] == k;
        o.p += p;
        o.g += g;
        o.both += p && g;
    }
    return o;
}

template <class F>
double mean_over_present(const LabelMap& pred, const LabelMap& gt, int n_classes, F metric) {
    require_same_shape(pred, gt, "segmentation metric");
    require(n_classes >= 1, ErrorKind::config, "n_classes must be >= 1");
    std::vector<char> present(static_cast<std::size_t>(n_classes), 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        require(pred[i] < n_classes && gt[i] < n_classes, ErrorKind::config, "label outside class range");
        present[pred[i]] = present[gt[i]] = 1;
    }
    double s = 0;
    int n = 0;
    for (int k = 1; k < n_classes; ++k)
        if (present[static_cast<std::size_t>(k)]) {
            s += metric(pred, gt, k);
            ++n;
        }
    return n == 0 ? 1.0 : s / n;
}

}  // namespace

double dice(const LabelMap& pred, const LabelMap& gt, int k) {
    const auto o = overlap(pred, gt, k);
    if (o.p + o.g == 0) return 1.0;
    return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.p + o.g);
}

double iou(const LabelMap& pred, const LabelMap& gt, int k) {
    const auto o = overlap(pred, gt, k);
    const std::size_t uni = o.p + o.g - o.both;
    if (uni == 0) return 1.0;
    return static_cast<double>(o.both) / static_cast<double>(uni);
}

double mean_dice(const LabelMap& pred, const LabelMap& gt, int n_classes) {
    return mean_over_present(pred, gt, n_classes, dice);
}

double miou(const LabelMap& pred, const LabelMap& gt, int n_classes) {
    return mean_over_present(pred, gt, n_classes, iou);
}

std::vector<std::pair<int, int>> boundary(const Mask& m) {
    std::vector<std::pair<int, int>> out;
    auto in = [&](int x, int y) { return x >= 0 && y >= 0 && x < m.width && y < m.height && m.at(x, y) != 0; };
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (in(x, y) && (!in(x - 1, y) || !in(x + 1, y) || !in(x, y - 1) || !in(x, y + 1))) out.emplace_back(x, y);
    return out;
}

namespace {

// Distance from each point of `from` to its nearest point of `to`.
std::vector<double> nearest(const std::vector<std::pair<int, int>>& from, const std::vector<std::pair<int, int>>& to) {
    std::vector<double> d;
    d.reserve(from.size());
    for (const auto& [x, y] : from) {
        long best = std::numeric_limits<long>::max();
        for (const auto& [u, v] : to) {
            const long dx = x - u, dy = y - v;
            best = std::min(best, dx * dx + dy * dy);
        }
        d.push_back(std::sqrt(static_cast<double>(best)));
    }
    return d;
}

}  // namespace

std::optional<double> hausdorff(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt, "hausdorff");
    const auto bp = boundary(pred), bg = boundary(gt);
    if (bp.empty() || bg.empty()) return std::nullopt;
    const auto a = nearest(bp, bg), b = nearest(bg, bp);
    return std::max(*std::max_element(a.begin(), a.end()), *std::max_element(b.begin(), b.end()));
}

std::optional<double> avg_surface_distance(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt, "avg_surface_distance");
    const auto bp = boundary(pred), bg = boundary(gt);
    if (bp.empty() || bg.empty()) return std::nullopt;
    const auto a = nearest(bp, bg), b = nearest(bg, bp);
    auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    return 0.5 * (mean(a) + mean(b));
}

}  // namespace pivm::metrics
