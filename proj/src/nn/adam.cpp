#include "pivm/nn/adam.hpp"

#include <cmath>

namespace pivm::nn {

double AdamHyper::lr_at(int epoch) const {
    if (halving_epochs <= 0) return lr;
    return lr * std::pow(0.5, epoch / halving_epochs);
}

AdamState make_adam(const ParamSet<float>& params, const AdamHyper& hyper) {
    AdamState s;
    s.hyper = hyper;
    for (const auto& t : params.tensors) {
        s.m.emplace_back(t.numel(), 0.0f);
        s.v.emplace_back(t.numel(), 0.0f);
    }
    return s;
}

void adam_step(ParamSet<float>& params, const ParamSet<float>& grads, AdamState& state, int epoch) {
    require(grads.size() == params.size() && state.m.size() == params.size(), ErrorKind::shape,
            "adam: parameter/gradient/state count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(grads.tensors[i].numel() == params.tensors[i].numel() && state.m[i].size() == params.tensors[i].numel(),
                ErrorKind::shape, "adam: shape mismatch for " + params.names[i]);
        for (float g : grads.tensors[i].data)
            require(std::isfinite(g), ErrorKind::divergence, "adam: non-finite gradient in " + params.names[i]);
    }

    const auto& h = state.hyper;
    ++state.step;
    const double lr = h.lr_at(epoch);
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.tensors[i].data;
        const auto& g = grads.tensors[i].data;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = g[j];
            const double mj = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
            const double vj = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + h.eps);
            p[j] = static_cast<float>(p[j] - update);
        }
    }
}

}  // namespace pivm::nn
