#include "pivm/volume.hpp"

#include <cmath>

#include "pivm/phantom.hpp"

namespace pivm::volume {

StreamKey sample_key(StreamKey key, std::size_t index) { return key.child(index); }

namespace {

// Standard deviation of a signal over the body ellipse.
double body_sd(const Field& f) {
    double s = 0, s2 = 0;
    std::size_t n = 0;
    for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) {
            if (!phantom::inside_body(x, y, f.width)) continue;
            const double v = f.at(x, y);
            s += v;
            s2 += v * v;
            ++n;
        }
    if (n < 2) return 1.0;
    const double m = s / static_cast<double>(n);
    return std::sqrt(std::max(0.0, s2 / static_cast<double>(n) - m * m));
}

}  // namespace

std::vector<HuImage> generate_volume(const EpsModel& model, const VolumeRequest& request,
                                     const diffusion::NoiseSchedule& schedule, const VolumeSettings& settings) {
    const std::size_t n = request.labels.size();
    require(n >= 1, ErrorKind::config, "generate_volume: need at least one slice");
    require(request.priors.size() == n, ErrorKind::shape, "generate_volume: label and prior counts differ");
    require(settings.conditioning.previous_slice, ErrorKind::config,
            "generate_volume: the model must take a previous-slice channel");
    for (std::size_t i = 0; i < n; ++i) {
        require_same_shape(request.labels[i], request.labels.front(), "generate_volume slice " + std::to_string(i + 1));
        require_same_shape(request.labels[i], request.priors[i], "generate_volume slice " + std::to_string(i + 1));
    }

    std::vector<HuImage> out;
    out.reserve(n);
    Field previous_signal;
    for (std::size_t i = 0; i < n; ++i) {
        const HuImage* previous = i == 0 ? nullptr : &out.back();
        const auto cond = diffusion::make_conditioning(settings.conditioning, request.labels[i], request.priors[i], previous);
        auto opts = settings.sampling;
        if (request.noise_scale && i > 0) opts.initial_noise_scale *= body_sd(previous_signal);
        try {
            previous_signal = diffusion::sample(model, cond, schedule, sample_key(request.key, i), opts);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::divergence) throw;
            fail(ErrorKind::divergence, std::string(e.what()) + " (volume slice " + std::to_string(i + 1) + ")");
        }
        out.push_back(settings.codec.decode(previous_signal, request.priors[i]));
    }
    return out;
}

Plane parse_plane(const std::string& s) {
    if (s == "coronal") return Plane::coronal;
    if (s == "sagittal") return Plane::sagittal;
    fail(ErrorKind::config, "unknown reslice plane '" + s + "' (expected coronal or sagittal)");
}

HuImage reslice(const std::vector<HuImage>& volume, Plane plane, int index) {
    require(volume.size() >= 2, ErrorKind::config, "reslice: need at least two slices");
    for (const auto& s : volume) require_same_shape(s, volume.front(), "reslice");
    const int w = volume.front().width, h = volume.front().height;
    const int n = static_cast<int>(volume.size());
    if (plane == Plane::coronal) {
        require(index >= 0 && index < h, ErrorKind::config, "reslice: row index out of range");
        HuImage out(w, n);
        for (int j = 0; j < n; ++j)
            for (int x = 0; x < w; ++x) out.at(x, j) = volume[static_cast<std::size_t>(j)].at(x, index);
        return out;
    }
    require(index >= 0 && index < w, ErrorKind::config, "reslice: column index out of range");
    HuImage out(h, n);
    for (int j = 0; j < n; ++j)
        for (int y = 0; y < h; ++y) out.at(y, j) = volume[static_cast<std::size_t>(j)].at(index, y);
    return out;
}

}  // namespace pivm::volume
