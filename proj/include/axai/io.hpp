#pragma once

// Binary containers shared by every stage: the AXF1 float-map file and 8-bit
// PGM/PPM exports.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "axai/error.hpp"
#include "axai/image.hpp"

namespace axai {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kFloatMapMagic{'A', 'X', 'F', '1'};
inline constexpr std::size_t kFloatMapHeaderBytes = 16;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(const std::string& in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

inline float get_f32(const std::string& in, std::size_t offset) {
  return std::bit_cast<float>(get_u32(in, offset));
}

} // namespace detail

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string encode_float_map(const Image& img) {
  if (img.data.size() != img.height * img.width * img.channels)
    throw ContractError("image payload does not match its shape");
  std::string out;
  out.reserve(kFloatMapHeaderBytes + img.data.size() * 4);
  out.append(kFloatMapMagic.data(), kFloatMapMagic.size());
  detail::put_u32(out, static_cast<std::uint32_t>(img.height));
  detail::put_u32(out, static_cast<std::uint32_t>(img.width));
  detail::put_u32(out, static_cast<std::uint32_t>(img.channels));
  for (float v : img.data) detail::put_f32(out, v);
  return out;
}

inline Image decode_float_map(const std::string& bytes, const std::string& origin = "<buffer>") {
  if (bytes.size() < kFloatMapHeaderBytes)
    throw FormatError(origin + ": truncated header at byte offset " + std::to_string(bytes.size()) +
                      " (need " + std::to_string(kFloatMapHeaderBytes) + ")");
  if (std::memcmp(bytes.data(), kFloatMapMagic.data(), 4) != 0)
    throw FormatError(origin + ": bad magic at byte offset 0 (expected AXF1)");
  Image img;
  img.height = detail::get_u32(bytes, 4);
  img.width = detail::get_u32(bytes, 8);
  img.channels = detail::get_u32(bytes, 12);
  const std::size_t n = img.height * img.width * img.channels;
  const std::size_t expected = kFloatMapHeaderBytes + 4 * n;
  if (bytes.size() < expected)
    throw FormatError(origin + ": truncated payload at byte offset " + std::to_string(bytes.size()) +
                      " (expected " + std::to_string(expected) + " bytes)");
  if (bytes.size() > expected)
    throw FormatError(origin + ": trailing data at byte offset " + std::to_string(expected));
  img.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) img.data[i] = detail::get_f32(bytes, kFloatMapHeaderBytes + 4 * i);
  return img;
}

inline void write_float_map(const Image& img, const fs::path& path) {
  write_file(path, encode_float_map(img));
}

inline void write_float_map(const ExplanationMap& map, const fs::path& path) {
  write_float_map(to_image(map), path);
}

inline Image read_float_map(const fs::path& path) {
  return decode_float_map(read_file(path), path.string());
}

// 8-bit image for visual exports (gray or RGB).
struct ByteImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> data;
};

inline std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline ByteImage quantize(const Image& img) {
  ByteImage out{img.height, img.width, img.channels, {}};
  out.data.reserve(img.data.size());
  for (float v : img.data) out.data.push_back(to_byte(v));
  return out;
}

// Binary PGM (P5) for one channel, PPM (P6) for three.
inline void write_pnm(const ByteImage& img, const fs::path& path) {
  if (img.channels != 1 && img.channels != 3)
    throw ContractError("PGM/PPM export needs 1 or 3 channels, got " + std::to_string(img.channels));
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  write_file(path, out);
}

inline ByteImage decode_pnm(const std::string& bytes, const std::string& origin = "<buffer>") {
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError(origin + ": truncated PNM header at byte offset " + std::to_string(pos));
    return bytes.substr(start, pos - start);
  };
  const std::string magic = next_token();
  ByteImage img;
  if (magic == "P5") img.channels = 1;
  else if (magic == "P6") img.channels = 3;
  else throw FormatError(origin + ": unsupported PNM magic '" + magic + "' at byte offset 0");
  try {
    img.width = std::stoul(next_token());
    img.height = std::stoul(next_token());
    if (std::stoul(next_token()) != 255) throw FormatError(origin + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw FormatError(origin + ": malformed PNM header near byte offset " + std::to_string(pos));
  }
  ++pos; // single whitespace after maxval
  const std::size_t n = img.width * img.height * img.channels;
  if (bytes.size() < pos + n)
    throw FormatError(origin + ": truncated PNM payload at byte offset " + std::to_string(bytes.size()));
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline Image read_pnm(const fs::path& path) {
  const ByteImage b = decode_pnm(read_file(path), path.string());
  Image img(b.height, b.width, b.channels);
  for (std::size_t i = 0; i < b.data.size(); ++i) img.data[i] = static_cast<float>(b.data[i]) / 255.0f;
  return img;
}

// Dispatches on extension: .pgm/.ppm are 8-bit, anything else is AXF1.
inline Image read_image(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm" || ext == ".ppm") return read_pnm(path);
  return read_float_map(path);
}

} // namespace axai
