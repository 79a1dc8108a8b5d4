#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "srepa/rng.hpp"
#include "srepa/tensor.hpp"

namespace srepa {

struct DataConfig {
  std::size_t grid = 4;       // G tokens per side
  std::size_t patch = 4;      // P pixels per side
  std::size_t n_classes = 4;  // disk, square, cross, horizontal stripes
  std::size_t n_images = 4096;
  std::uint64_t seed = 0;

  std::size_t side() const { return grid * patch; }
  std::size_t n_tokens() const { return grid * grid; }
  std::size_t d_patch() const { return patch * patch; }

  void validate() const {
    if (grid < 2 || patch < 2)
      throw std::invalid_argument("data config: grid and patch must be >= 2");
    if (n_classes < 1)
      throw std::invalid_argument("data config: need at least one class");
  }
};

struct TokenImage {
  Tensor<float> pixels;  // side x side, values in [-1, 1]
  Tensor<float> tokens;  // N x P^2, row-major over the token grid
  std::size_t label = 0;
};

template <typename T>
Tensor<T> patchify(const Tensor<T>& pixels, std::size_t grid,
                   std::size_t patch) {
  const std::size_t side = grid * patch;
  if (pixels.ndim() != 2 || pixels.rows() != side || pixels.cols() != side)
    throw std::invalid_argument("patchify: pixels " + pixels.shape_str() +
                                " do not match side " + std::to_string(side));
  Tensor<T> tokens({grid * grid, patch * patch});
  for (std::size_t k = 0; k < grid * grid; ++k) {
    const std::size_t pr = k / grid, pc = k % grid;
    for (std::size_t i = 0; i < patch; ++i)
      for (std::size_t j = 0; j < patch; ++j)
        tokens.at(k, i * patch + j) =
            pixels.at(pr * patch + i, pc * patch + j);
  }
  return tokens;
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t grid,
                     std::size_t patch) {
  if (tokens.ndim() != 2 || tokens.rows() != grid * grid ||
      tokens.cols() != patch * patch)
    throw std::invalid_argument("unpatchify: tokens " + tokens.shape_str() +
                                " do not match grid " + std::to_string(grid) +
                                " patch " + std::to_string(patch));
  const std::size_t side = grid * patch;
  Tensor<T> pixels({side, side});
  for (std::size_t k = 0; k < grid * grid; ++k) {
    const std::size_t pr = k / grid, pc = k % grid;
    for (std::size_t i = 0; i < patch; ++i)
      for (std::size_t j = 0; j < patch; ++j)
        pixels.at(pr * patch + i, pc * patch + j) = tokens.at(k, i * patch + j);
  }
  return pixels;
}

namespace detail {

struct ShapeParams {
  std::size_t kind;
  double cx, cy;        // center in pixel units
  double size;          // radius / half-size / arm half-length
  double width;         // cross arm half-width / stripe period
  double phase;         // stripe phase
  double intensity;     // foreground value
  double background;
};

inline ShapeParams draw_shape(const DataConfig& cfg, std::size_t index) {
  RngStream rng(cfg.seed, 0x1000 + index);
  ShapeParams s;
  s.kind = (index % cfg.n_classes) % 4;
  const double side = double(cfg.side());
  s.cx = rng.uniform(0.32, 0.68) * side;
  s.cy = rng.uniform(0.32, 0.68) * side;
  s.size = rng.uniform(0.2, 0.35) * side;
  s.width = rng.uniform(0.08, 0.14) * side;
  s.phase = rng.uniform(0.0, 1.0);
  s.intensity = rng.uniform(0.4, 1.0);
  s.background = rng.uniform(-1.0, -0.6);
  return s;
}

inline bool inside_shape(const ShapeParams& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (s.kind) {
    case 0:  // disk
      return dx * dx + dy * dy < s.size * s.size;
    case 1:  // square
      return std::fabs(dx) < s.size * 0.6 && std::fabs(dy) < s.size * 0.6;
    case 2:  // cross
      return (std::fabs(dx) < s.width && std::fabs(dy) < s.size * 1.15) ||
             (std::fabs(dy) < s.width && std::fabs(dx) < s.size * 1.15);
    default: {  // horizontal stripes
      const double period = 2.0 * s.width;
      const double m = std::fmod(y + s.phase * period, period);
      return m < period * 0.5;
    }
  }
}

}  // namespace detail

// Pure function of (seed, index). Anti-aliased by 2x2 supersampling.
inline TokenImage render_image(const DataConfig& cfg, std::size_t index) {
  cfg.validate();
  if (index >= cfg.n_images)
    throw std::invalid_argument("render_image: index " +
                                std::to_string(index) + " out of range [0," +
                                std::to_string(cfg.n_images) + ")");
  const auto s = detail::draw_shape(cfg, index);
  const std::size_t side = cfg.side();
  TokenImage img;
  img.label = index % cfg.n_classes;
  img.pixels = Tensor<float>({side, side});
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      double acc = 0;
      for (double oy : {0.25, 0.75})
        for (double ox : {0.25, 0.75})
          acc += detail::inside_shape(s, double(c) + ox, double(r) + oy)
                     ? s.intensity
                     : s.background;
      img.pixels.at(r, c) =
          float(std::clamp(acc / 4.0, -1.0, 1.0));
    }
  }
  img.tokens = patchify(img.pixels, cfg.grid, cfg.patch);
  return img;
}

// ---- dataset persistence ----------------------------------------------------
// magic "SRPD", version u32=1, u32 G, P, n_classes, n_images, then per image
// (u32 label, little-endian f32 pixel block row-major).

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff),
                        (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff),
                        (unsigned char)((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(std::string("dataset read: truncated at ") +
                             what + " (offset " +
                             std::to_string(is.tellg()) + ")");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline float read_f32(std::istream& is, const char* what) {
  std::uint32_t bits = read_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

struct Dataset {
  DataConfig config;
  std::vector<TokenImage> images;
};

inline void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset write: cannot open " + path);
  os.write("SRPD", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, std::uint32_t(ds.config.grid));
  detail::write_u32(os, std::uint32_t(ds.config.patch));
  detail::write_u32(os, std::uint32_t(ds.config.n_classes));
  detail::write_u32(os, std::uint32_t(ds.images.size()));
  for (const auto& img : ds.images) {
    detail::write_u32(os, std::uint32_t(img.label));
    for (float v : img.pixels.data) detail::write_f32(os, v);
  }
  if (!os) throw std::runtime_error("dataset write: I/O failure on " + path);
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset read: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SRPD", 4) != 0)
    throw std::runtime_error("dataset read: bad magic at offset 0 in " + path);
  const auto version = detail::read_u32(is, "version");
  if (version != 1)
    throw std::runtime_error("dataset read: unsupported version " +
                             std::to_string(version));
  Dataset ds;
  ds.config.grid = detail::read_u32(is, "grid");
  ds.config.patch = detail::read_u32(is, "patch");
  ds.config.n_classes = detail::read_u32(is, "n_classes");
  const auto n = detail::read_u32(is, "n_images");
  ds.config.n_images = n;
  ds.config.validate();
  const std::size_t side = ds.config.side();
  for (std::uint32_t i = 0; i < n; ++i) {
    TokenImage img;
    img.label = detail::read_u32(is, "label");
    img.pixels = Tensor<float>({side, side});
    for (auto& v : img.pixels.data) v = detail::read_f32(is, "pixels");
    img.tokens = patchify(img.pixels, ds.config.grid, ds.config.patch);
    ds.images.push_back(std::move(img));
  }
  char extra;
  if (is.read(&extra, 1))
    throw std::runtime_error("dataset read: trailing bytes in " + path);
  return ds;
}

inline Dataset generate_dataset(const DataConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  ds.images.reserve(cfg.n_images);
  for (std::size_t i = 0; i < cfg.n_images; ++i)
    ds.images.push_back(render_image(cfg, i));
  return ds;
}

}  // namespace srepa
