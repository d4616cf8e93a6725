#pragma once

// File formats.
//
// TensorFile (little-endian regardless of host):
//   bytes 0..7   magic "PIVMTNS1"
//   byte  8      rank (1..4)
//   next         rank x uint32 dims
//   next         uint8 dtype code (1 = float32, 2 = uint16)
//   next         product(dims) x element, row-major
//
// Manifest: UTF-8 text, one `key=value` per line; records are separated by
// a blank line; lines starting with '#' are comments.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pivm/grid.hpp"

namespace pivm::storage {

enum class DType : std::uint8_t { f32 = 1, u16 = 2 };

struct TensorData {
    std::vector<std::uint32_t> dims;
    DType dtype = DType::f32;
    std::vector<float> f32;
    std::vector<std::uint16_t> u16;

    std::size_t count() const;
};

std::vector<std::uint8_t> encode_tensor(const TensorData& t);
TensorData decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const std::filesystem::path& path, const TensorData& t);
void write_tensor(const std::filesystem::path& path, std::vector<std::uint32_t> dims, std::span<const float> values);
void write_tensor(const std::filesystem::path& path, std::vector<std::uint32_t> dims,
                  std::span<const std::uint16_t> values);
TensorData read_tensor(const std::filesystem::path& path);

/// Maps HU to 8-bit gray: clamp(round(255 * (x - (c - w/2)) / w), 0, 255),
/// rounding half away from zero.
std::uint8_t window_pixel(float hu, double window_center, double window_width);

struct Gray8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;
};

Gray8 window_image(const HuImage& image, double window_center, double window_width);
/// Places images left to right, separated by `gap` black columns; shorter
/// images are top-aligned.
Gray8 hstack(const std::vector<Gray8>& panels, int gap = 2);
/// Writes a binary P5 PGM with maxval 255.
void write_pgm(const std::filesystem::path& path, const Gray8& image);
void export_pgm(const HuImage& image, double window_center, double window_width, const std::filesystem::path& path);

using Record = std::vector<std::pair<std::string, std::string>>;

class Manifest {
public:
    std::vector<Record> records;

    Record& add_record() { return records.emplace_back(); }
    std::string to_string() const;
    static Manifest parse(const std::string& text);

    void write(const std::filesystem::path& path) const;
    static Manifest read(const std::filesystem::path& path);
};

/// Looks up a key in a record; throws ErrorKind::corruption if missing.
const std::string& get(const Record& r, const std::string& key);
bool has(const Record& r, const std::string& key);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

}  // namespace pivm::storage
