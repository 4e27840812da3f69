#pragma once

// Binary array container shared by mel files and checkpoints:
//   bytes 0..3   magic "EMEL"
//   bytes 4..7   rows (uint32 LE)
//   bytes 8..11  cols (uint32 LE)
//   bytes 12..15 aux  (float32 LE; frame hop in seconds for mels, 0 otherwise)
//   payload      rows*cols float32 LE, row-major

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace emotts::io {

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr std::size_t kHeaderBytes = 16;

struct DecodedArray {
  FloatMatrix values;
  float aux = 0.0f;
};

std::vector<std::uint8_t> encode_array(const FloatMatrix& values, float aux);
// Throws ParseError carrying the offending byte offset.
DecodedArray decode_array(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

void write_array(const std::filesystem::path& path, const FloatMatrix& values, float aux = 0.0f);
DecodedArray read_array(const std::filesystem::path& path);

std::uint64_t hash_bytes(std::span<const std::uint8_t> bytes);
std::uint64_t hash_file(const std::filesystem::path& path);
// Order-independent of directory listing: files are visited sorted by name.
std::uint64_t hash_directory(const std::filesystem::path& dir);
std::string hex64(std::uint64_t v);

}  // namespace emotts::io
