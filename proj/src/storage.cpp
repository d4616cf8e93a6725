#include "pivm/storage.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pivm::storage {

namespace {

constexpr char kMagic[8] = {'P', 'I', 'V', 'M', 'T', 'N', 'S', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::size_t element_size(DType d) { return d == DType::f32 ? 4 : 2; }

void check_dims(const std::vector<std::uint32_t>& dims) {
    require(!dims.empty() && dims.size() <= 4, ErrorKind::config, "tensor rank must be in [1, 4]");
    for (auto d : dims) require(d > 0, ErrorKind::config, "tensor dims must be nonzero");
}

}  // namespace

std::size_t TensorData::count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return dims.empty() ? 0 : n;
}

std::vector<std::uint8_t> encode_tensor(const TensorData& t) {
    check_dims(t.dims);
    const std::size_t n = t.count();
    const std::size_t have = t.dtype == DType::f32 ? t.f32.size() : t.u16.size();
    require(have == n, ErrorKind::shape, "tensor payload length does not match dims");

    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    out.push_back(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(out, d);
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    out.reserve(out.size() + n * element_size(t.dtype));
    if (t.dtype == DType::f32) {
        for (float v : t.f32) {
            require(std::isfinite(v), ErrorKind::corruption, "refusing to write non-finite float payload");
            put_u32(out, std::bit_cast<std::uint32_t>(v));
        }
    } else {
        for (auto v : t.u16) {
            out.push_back(static_cast<std::uint8_t>(v));
            out.push_back(static_cast<std::uint8_t>(v >> 8));
        }
    }
    return out;
}

TensorData decode_tensor(std::span<const std::uint8_t> b) {
    require(b.size() >= 9 && std::memcmp(b.data(), kMagic, 8) == 0, ErrorKind::corruption, "tensor: bad magic");
    TensorData t;
    const std::size_t rank = b[8];
    require(rank >= 1 && rank <= 4, ErrorKind::corruption, "tensor: rank out of range");
    std::size_t pos = 9;
    require(b.size() >= pos + 4 * rank + 1, ErrorKind::corruption, "tensor: truncated header");
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank; ++i, pos += 4) {
        t.dims.push_back(get_u32(b.data() + pos));
        require(t.dims.back() > 0, ErrorKind::corruption, "tensor: zero dimension");
        n *= t.dims.back();
    }
    const std::uint8_t code = b[pos++];
    require(code == 1 || code == 2, ErrorKind::corruption, "tensor: unknown dtype code");
    t.dtype = static_cast<DType>(code);
    require(b.size() - pos == n * element_size(t.dtype), ErrorKind::corruption,
            "tensor: payload length mismatch (expected " + std::to_string(n * element_size(t.dtype)) + " bytes, found " +
                std::to_string(b.size() - pos) + ")");
    if (t.dtype == DType::f32) {
        t.f32.resize(n);
        for (std::size_t i = 0; i < n; ++i, pos += 4) t.f32[i] = std::bit_cast<float>(get_u32(b.data() + pos));
    } else {
        t.u16.resize(n);
        for (std::size_t i = 0; i < n; ++i, pos += 2)
            t.u16[i] = static_cast<std::uint16_t>(b[pos] | (b[pos + 1] << 8));
    }
    return t;
}

void write_tensor(const std::filesystem::path& path, const TensorData& t) {
    const auto bytes = encode_tensor(t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(f), ErrorKind::io, "write failed: " + path.string());
}

void write_tensor(const std::filesystem::path& path, std::vector<std::uint32_t> dims, std::span<const float> values) {
    TensorData t;
    t.dims = std::move(dims);
    t.dtype = DType::f32;
    t.f32.assign(values.begin(), values.end());
    write_tensor(path, t);
}

void write_tensor(const std::filesystem::path& path, std::vector<std::uint32_t> dims,
                  std::span<const std::uint16_t> values) {
    TensorData t;
    t.dims = std::move(dims);
    t.dtype = DType::u16;
    t.u16.assign(values.begin(), values.end());
    write_tensor(path, t);
}

TensorData read_tensor(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    return decode_tensor(bytes);
}

std::uint8_t window_pixel(float hu, double c, double w) {
    const double v = std::round(255.0 * (static_cast<double>(hu) - (c - w / 2.0)) / w);
    return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

Gray8 window_image(const HuImage& image, double c, double w) {
    require(w > 0.0, ErrorKind::config, "window width must be positive");
    Gray8 g{image.width, image.height, std::vector<std::uint8_t>(image.size())};
    for (std::size_t i = 0; i < image.size(); ++i) g.data[i] = window_pixel(image[i], c, w);
    return g;
}

Gray8 hstack(const std::vector<Gray8>& panels, int gap) {
    Gray8 out;
    for (const auto& p : panels) {
        out.width += p.width;
        out.height = std::max(out.height, p.height);
    }
    if (!panels.empty()) out.width += gap * static_cast<int>(panels.size() - 1);
    out.data.assign(static_cast<std::size_t>(out.width) * out.height, 0);
    int x0 = 0;
    for (const auto& p : panels) {
        for (int y = 0; y < p.height; ++y)
            std::copy_n(p.data.begin() + static_cast<std::ptrdiff_t>(y) * p.width, p.width,
                        out.data.begin() + static_cast<std::ptrdiff_t>(y) * out.width + x0);
        x0 += p.width + gap;
    }
    return out;
}

void write_pgm(const std::filesystem::path& path, const Gray8& image) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open for writing: " + path.string());
    f << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(image.data.data()), static_cast<std::streamsize>(image.data.size()));
    require(static_cast<bool>(f), ErrorKind::io, "write failed: " + path.string());
}

void export_pgm(const HuImage& image, double c, double w, const std::filesystem::path& path) {
    write_pgm(path, window_image(image, c, w));
}

std::string Manifest::to_string() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (i) os << '\n';
        for (const auto& [k, v] : records[i]) os << k << '=' << v << '\n';
    }
    return os.str();
}

Manifest Manifest::parse(const std::string& text) {
    Manifest m;
    std::istringstream is(text);
    std::string line;
    bool open = false;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            open = false;
            continue;
        }
        if (line[0] == '#') continue;
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::corruption, "manifest: line without '=': " + line);
        if (!open) {
            m.records.emplace_back();
            open = true;
        }
        m.records.back().emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return m;
}

void Manifest::write(const std::filesystem::path& path) const { write_text(path, to_string()); }

Manifest Manifest::read(const std::filesystem::path& path) { return parse(read_text(path)); }

const std::string& get(const Record& r, const std::string& key) {
    for (const auto& [k, v] : r)
        if (k == key) return v;
    fail(ErrorKind::corruption, "manifest: missing key '" + key + "'");
}

bool has(const Record& r, const std::string& key) {
    return std::any_of(r.begin(), r.end(), [&](const auto& kv) { return kv.first == key; });
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open for writing: " + path.string());
    f << text;
    require(static_cast<bool>(f), ErrorKind::io, "write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    const auto b = read_bytes(path);
    return std::string(b.begin(), b.end());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open for reading: " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace pivm::storage
