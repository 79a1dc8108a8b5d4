#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "srepa/tensor.hpp"

namespace srepa {

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> gray;  // row-major
};

inline void write_pgm(const PgmImage& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("pgm write: cannot open " + path);
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.gray.data()),
           std::streamsize(img.gray.size()));
  if (!os) throw std::runtime_error("pgm write: I/O failure on " + path);
}

inline PgmImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("pgm read: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("pgm read: bad magic in " + path);
  std::size_t w, h, maxval;
  is >> w >> h >> maxval;
  if (maxval != 255)
    throw std::runtime_error("pgm read: unsupported maxval in " + path);
  is.get();  // single whitespace after the header
  PgmImage img;
  img.width = w;
  img.height = h;
  img.gray.resize(w * h);
  if (!is.read(reinterpret_cast<char*>(img.gray.data()),
               std::streamsize(img.gray.size())))
    throw std::runtime_error("pgm read: truncated pixel data in " + path);
  return img;
}

// cosine in [-1,1] -> gray level, affine and bit-exact
inline std::uint8_t cosine_to_gray(double c) {
  const double g = std::round((std::clamp(c, -1.0, 1.0) + 1.0) * 127.5);
  return std::uint8_t(g);
}

// pixel value in [-1,1] -> gray level
inline std::uint8_t pixel_to_gray(double v) {
  return std::uint8_t(std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5));
}

template <typename T>
PgmImage tensor_to_pgm(const Tensor<T>& pixels) {
  PgmImage img;
  img.height = pixels.rows();
  img.width = pixels.cols();
  img.gray.reserve(pixels.numel());
  for (T v : pixels.data) img.gray.push_back(pixel_to_gray(double(v)));
  return img;
}

}  // namespace srepa
