#include "pivm/nn/unet.hpp"

#include <cmath>
#include <sstream>

#include "pivm/rng.hpp"

namespace pivm::nn {

namespace {

struct ConvSpec {
    std::string name;
    int cin;
    int cout;
    bool norm;
};

// Parameter layout shared by init_params and build_unet.
std::vector<ConvSpec> conv_specs(const UNetConfig& c) {
    const auto [w0, w1, w2] = c.widths;
    return {
        {"enc0a", c.in_channels, w0, true}, {"enc0b", w0, w0, true},     {"down1", w0, w1, true},
        {"enc1b", w1, w1, true},            {"down2", w1, w2, true},     {"mid", w2, w2, true},
        {"up1", w2, w1, true},              {"dec1", 2 * w1, w1, true},  {"up0", w1, w0, true},
        {"dec0", 2 * w0, w0, true},         {"out", w0 + c.in_channels, c.out_channels, false},
    };
}

}  // namespace

void UNetConfig::validate() const {
    require(in_channels >= 1 && out_channels >= 1, ErrorKind::config, "unet: channel counts must be positive");
    for (int w : widths)
        require(w > 0 && w % groups == 0, ErrorKind::config, "unet: widths must be positive multiples of groups");
    require(!time_embedding || (time_dim > 0 && time_dim % 2 == 0), ErrorKind::config,
            "unet: time_dim must be positive and even");
}

std::string UNetConfig::describe() const {
    std::ostringstream os;
    os << "unet in=" << in_channels << " out=" << out_channels << " widths=" << widths[0] << ',' << widths[1] << ','
       << widths[2] << " groups=" << groups << " temb=" << (time_embedding ? time_dim : 0);
    return os.str();
}

template <class T>
std::size_t ParamSet<T>::count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
}

template <class T>
ParamSet<T> ParamSet<T>::zeros_like() const {
    ParamSet out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.emplace_back(t.c, t.h, t.w);
    return out;
}

template <class T>
void ParamSet<T>::accumulate(const ParamSet& other) {
    if (other.tensors.empty()) return;
    require(other.size() == size(), ErrorKind::shape, "param set size mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
        require(tensors[i].same_shape(other.tensors[i]), ErrorKind::shape, "param tensor shape mismatch");
        auto& d = tensors[i].data;
        const auto& s = other.tensors[i].data;
        for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
    }
}

template <class T>
ParamSet<T> init_params(const UNetConfig& config, std::uint64_t seed) {
    config.validate();
    ParamSet<T> p;
    std::uint64_t index = 0;
    auto kaiming = [&](const std::string& name, int c, int h, int w, int fan_in) {
        Tensor<T> t(c, h, w);
        Rng rng = StreamKey{seed, tag("init")}.child(index++).rng();
        const double sd = std::sqrt(2.0 / fan_in);
        for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, sd));
        p.names.push_back(name);
        p.tensors.push_back(std::move(t));
    };
    auto constant = [&](const std::string& name, int c, T value) {
        ++index;
        p.names.push_back(name);
        p.tensors.emplace_back(c, 1, 1, value);
    };
    for (const auto& s : conv_specs(config)) {
        kaiming(s.name + ".weight", s.cout, s.cin, 9, s.cin * 9);
        constant(s.name + ".bias", s.cout, T(0));
        if (s.norm) {
            constant(s.name + ".gamma", s.cout, T(1));
            constant(s.name + ".beta", s.cout, T(0));
        }
    }
    if (config.time_embedding) {
        kaiming("temb.weight", config.widths[2], config.time_dim, 1, config.time_dim);
        constant("temb.bias", config.widths[2], T(0));
    }
    return p;
}

template <class T>
Tensor<T> timestep_embedding(int t, int dim) {
    Tensor<T> e(dim, 1, 1);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double f = std::exp(-std::log(10000.0) * i / half);
        e.data[static_cast<std::size_t>(i)] = static_cast<T>(std::sin(t * f));
        e.data[static_cast<std::size_t>(i + half)] = static_cast<T>(std::cos(t * f));
    }
    return e;
}

template <class T>
UNetGraph<T> build_unet(Tape<T>& tape, const UNetConfig& config, const ParamSet<T>& params, Tensor<T> input,
                        std::optional<int> timestep) {
    using Id = typename Tape<T>::Id;
    require(input.c == config.in_channels, ErrorKind::shape,
            "unet: input has " + std::to_string(input.c) + " channels, network expects " +
                std::to_string(config.in_channels));
    require(input.h % 4 == 0 && input.w % 4 == 0 && input.h >= 4 && input.w >= 4, ErrorKind::shape,
            "unet: spatial size must be divisible by 4");
    require(config.time_embedding == timestep.has_value(), ErrorKind::shape,
            "unet: timestep must be given exactly when the time embedding is enabled");

    UNetGraph<T> g;
    g.input = tape.leaf(std::move(input));
    for (const auto& t : params.tensors) g.params.push_back(tape.leaf(t));

    std::size_t next = 0;
    auto block = [&](Id x, int stride, bool norm) {
        const Id w = g.params[next++];
        const Id b = g.params[next++];
        Id y = tape.conv3x3(x, w, b, stride);
        if (norm) {
            const Id gamma = g.params[next++];
            const Id beta = g.params[next++];
            y = tape.silu(tape.group_norm(y, gamma, beta, config.groups));
        }
        return y;
    };

    const Id e0 = block(g.input, 1, true);
    const Id skip0 = block(e0, 1, true);
    const Id e1 = block(skip0, 2, true);
    const Id skip1 = block(e1, 1, true);
    Id bott = block(skip1, 2, true);
    // Parameters of the remaining blocks precede the embedding in the layout.
    const std::size_t temb_index = next + 4 * 5 + 2;
    if (config.time_embedding) {
        const Id emb = tape.leaf(timestep_embedding<T>(*timestep, config.time_dim));
        const Id proj = tape.linear(emb, g.params[temb_index], g.params[temb_index + 1]);
        bott = tape.add_channel_bias(bott, proj);
    }
    const Id mid = block(bott, 1, true);
    const Id u1 = block(tape.upsample2x(mid), 1, true);
    const Id d1 = block(tape.concat(u1, skip1), 1, true);
    const Id u0 = block(tape.upsample2x(d1), 1, true);
    const Id d0 = block(tape.concat(u0, skip0), 1, true);
    // The output conv also sees the raw input, which carries its scale past the normalized path.
    g.output = block(tape.concat(d0, g.input), 1, false);
    return g;
}

template <class T>
ParamSet<T> collect_grads(Tape<T>& tape, const UNetGraph<T>& graph, const ParamSet<T>& params) {
    ParamSet<T> grads;
    grads.names = params.names;
    for (auto id : graph.params) grads.tensors.push_back(tape.grad(id));
    return grads;
}

template struct ParamSet<float>;
template struct ParamSet<double>;
template ParamSet<float> init_params<float>(const UNetConfig&, std::uint64_t);
template ParamSet<double> init_params<double>(const UNetConfig&, std::uint64_t);
template Tensor<float> timestep_embedding<float>(int, int);
template Tensor<double> timestep_embedding<double>(int, int);
template UNetGraph<float> build_unet<float>(Tape<float>&, const UNetConfig&, const ParamSet<float>&, Tensor<float>,
                                            std::optional<int>);
template UNetGraph<double> build_unet<double>(Tape<double>&, const UNetConfig&, const ParamSet<double>&,
                                              Tensor<double>, std::optional<int>);
template ParamSet<float> collect_grads<float>(Tape<float>&, const UNetGraph<float>&, const ParamSet<float>&);
template ParamSet<double> collect_grads<double>(Tape<double>&, const UNetGraph<double>&, const ParamSet<double>&);

}  // namespace pivm::nn
