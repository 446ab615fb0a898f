#pragma once

// Binary grid payloads: one JSON header line
//   {"width": W, "height": H}            (heatmaps)
//   {"channels": C, "height": H, "width": W}   (feature grids)
// followed by W * H * C little-endian IEEE-754 float32 values, row-major.
// Heatmaps can also be read from 8-bit PGM (P5 or P2), scaled by 1/255.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wsdet/error.hpp"
#include "wsdet/feature_grid.hpp"
#include "wsdet/heatmap.hpp"

namespace wsdet {

namespace detail {

inline void write_f32_le(std::ostream& os, std::span<const float> values) {
  std::vector<char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<float> read_f32_le(std::istream& is, std::size_t count,
                                      const std::string& what) {
  std::vector<char> buf(count * 4);
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
    throw Error(what + ": truncated payload, expected " + std::to_string(count) +
                " float32 values");
  }
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i * 4 + b])) << (8 * b);
    }
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

struct GridHeader {
  int width = 0;
  int height = 0;
  int channels = 1;
};

inline GridHeader read_header(std::istream& is, const std::string& what) {
  std::string line;
  if (!std::getline(is, line)) throw Error(what + ": missing JSON header line");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(what + ": malformed JSON header: " + e.what());
  }
  GridHeader h;
  try {
    h.width = j.at("width").get<int>();
    h.height = j.at("height").get<int>();
    h.channels = j.value("channels", 1);
  } catch (const nlohmann::json::exception& e) {
    throw Error(what + ": header needs integer width/height: " + e.what());
  }
  if (h.width <= 0 || h.height <= 0 || h.channels <= 0) {
    throw Error(what + ": header dimensions must be positive");
  }
  return h;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(path.string() + ": cannot open for reading");
  return is;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(path.string() + ": cannot open for writing");
  return os;
}

}  // namespace detail

inline void write_heatmap(std::ostream& os, const Heatmap& h) {
  nlohmann::json header = {{"width", h.width()}, {"height", h.height()}};
  os << header.dump() << '\n';
  detail::write_f32_le(os, h.values());
}

inline Heatmap read_heatmap(std::istream& is, const std::string& what = "heatmap") {
  const auto header = detail::read_header(is, what);
  if (header.channels != 1) throw Error(what + ": heatmap must have one channel");
  auto values = detail::read_f32_le(
      is, static_cast<std::size_t>(header.width) * header.height, what);
  for (float v : values) {
    if (!(v >= 0.0f && v <= 1.0f)) throw Error(what + ": heatmap value outside [0, 1]");
  }
  return Heatmap(header.width, header.height, std::move(values));
}

inline void write_feature_grid(std::ostream& os, const FeatureGrid& g) {
  nlohmann::json header = {{"width", g.width}, {"height", g.height}, {"channels", g.channels}};
  os << header.dump() << '\n';
  detail::write_f32_le(os, g.values);
}

inline FeatureGrid read_feature_grid(std::istream& is, const std::string& what = "feature grid") {
  const auto header = detail::read_header(is, what);
  FeatureGrid g(header.width, header.height, header.channels);
  g.values = detail::read_f32_le(is, g.values.size(), what);
  return g;
}

// Binary (P5) or ASCII (P2) greymap with maxval <= 255.
inline Heatmap read_pgm(std::istream& is, const std::string& what = "pgm") {
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P2") throw Error(what + ": not a P2/P5 PGM file");
  auto next_int = [&](const char* field) {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string comment;
      std::getline(is, comment);
      is >> std::ws;
    }
    int v = 0;
    if (!(is >> v)) throw Error(what + ": bad PGM " + field);
    return v;
  };
  const int w = next_int("width");
  const int h = next_int("height");
  const int maxval = next_int("maxval");
  if (w <= 0 || h <= 0) throw Error(what + ": PGM dimensions must be positive");
  if (maxval <= 0 || maxval > 255) throw Error(what + ": only 8-bit PGM is supported");
  std::vector<float> values(static_cast<std::size_t>(w) * h);
  if (magic == "P5") {
    is.get();  // single whitespace after maxval
    std::vector<char> raw(values.size());
    is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(is.gcount()) != raw.size()) {
      throw Error(what + ": truncated PGM pixel data");
    }
    for (std::size_t i = 0; i < raw.size(); ++i) {
      values[i] = static_cast<float>(static_cast<unsigned char>(raw[i])) / 255.0f;
    }
  } else {
    for (float& v : values) {
      int px = 0;
      if (!(is >> px) || px < 0 || px > maxval) throw Error(what + ": bad PGM pixel value");
      v = static_cast<float>(px) / 255.0f;
    }
  }
  for (float& v : values) v = std::min(v, 1.0f);
  return Heatmap(w, h, std::move(values));
}

inline void save_heatmap(const std::filesystem::path& path, const Heatmap& h) {
  auto os = detail::open_out(path);
  write_heatmap(os, h);
  if (!os) throw Error(path.string() + ": write failed");
}

// Picks PGM by extension (.pgm), the float32 payload format otherwise.
inline Heatmap load_heatmap(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  if (path.extension() == ".pgm") return read_pgm(is, path.string());
  return read_heatmap(is, path.string());
}

inline void save_feature_grid(const std::filesystem::path& path, const FeatureGrid& g) {
  auto os = detail::open_out(path);
  write_feature_grid(os, g);
  if (!os) throw Error(path.string() + ": write failed");
}

inline FeatureGrid load_feature_grid(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  return read_feature_grid(is, path.string());
}

}  // namespace wsdet
