#include "emotts/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "emotts/errors.hpp"
#include "emotts/rng.hpp"

namespace emotts::io {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'E', 'M', 'E', 'L'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_array(const FloatMatrix& values, float aux) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + 4 * static_cast<std::size_t>(values.size()));
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_u32(out, static_cast<std::uint32_t>(values.rows()));
  put_u32(out, static_cast<std::uint32_t>(values.cols()));
  put_u32(out, std::bit_cast<std::uint32_t>(aux));
  for (Eigen::Index r = 0; r < values.rows(); ++r)
    for (Eigen::Index c = 0; c < values.cols(); ++c)
      put_u32(out, std::bit_cast<std::uint32_t>(values(r, c)));
  return out;
}

DecodedArray decode_array(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) {
    throw ParseError("array header truncated at byte offset " + std::to_string(bytes.size()),
                     bytes.size());
  }
  for (std::size_t i = 0; i < kMagic.size(); ++i) {
    if (bytes[i] != kMagic[i]) throw ParseError("bad magic at byte offset " + std::to_string(i), i);
  }
  const std::uint32_t rows = get_u32(bytes, 4);
  const std::uint32_t cols = get_u32(bytes, 8);
  const std::size_t expected = kHeaderBytes + 4ULL * rows * cols;
  if (bytes.size() != expected) {
    const std::size_t off = std::min(bytes.size(), expected);
    throw ParseError("payload size mismatch at byte offset " + std::to_string(off) + " (expected " +
                         std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()) + ")",
                     off);
  }
  DecodedArray out;
  out.aux = std::bit_cast<float>(get_u32(bytes, 12));
  out.values.resize(rows, cols);
  std::size_t off = kHeaderBytes;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      out.values(r, c) = std::bit_cast<float>(get_u32(bytes, off));
      off += 4;
    }
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("write failed for " + path.string());
}

void write_array(const std::filesystem::path& path, const FloatMatrix& values, float aux) {
  write_file(path, encode_array(values, aux));
}

DecodedArray read_array(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_array(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.location());
  }
}

std::uint64_t hash_bytes(std::span<const std::uint8_t> bytes) {
  Fnv1a h;
  h.update(bytes.data(), bytes.size());
  return h.digest();
}

std::uint64_t hash_file(const std::filesystem::path& path) { return hash_bytes(read_file(path)); }

std::uint64_t hash_directory(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Fnv1a h;
  for (const auto& f : files) {
    const std::string rel = std::filesystem::relative(f, dir).generic_string();
    h.update(rel.data(), rel.size());
    const auto bytes = read_file(f);
    h.update(bytes.data(), bytes.size());
  }
  return h.digest();
}

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace emotts::io
