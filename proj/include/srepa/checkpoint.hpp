#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include "srepa/config.hpp"
#include "srepa/tensor.hpp"

namespace srepa {

// Snapshot of a training run. Entries carry every float tensor (live
// parameters, EMA shadow, optimizer moments) under prefixed names; the RNG
// map carries (seed, stream, counter) triples per stream.
struct Checkpoint {
  TrainConfig config;
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor<float>>> entries;
  std::map<std::string, std::array<std::uint64_t, 3>> rng;

  const Tensor<float>& entry(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return t;
    throw std::runtime_error("checkpoint: missing entry " + name);
  }
};

namespace detail {

inline void ck_write_u32(std::string& buf, std::uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
               char((v >> 24) & 0xff)};
  buf.append(b, 4);
}

struct CkReader {
  const std::string& buf;
  std::size_t pos = 0;

  std::uint32_t u32(const char* what) {
    if (pos + 4 > buf.size())
      throw std::runtime_error(std::string("checkpoint: truncated at ") +
                               what + " (offset " + std::to_string(pos) + ")");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | std::uint32_t(std::uint8_t(buf[pos + std::size_t(i)]));
    pos += 4;
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    if (pos + n > buf.size())
      throw std::runtime_error(std::string("checkpoint: truncated at ") +
                               what + " (offset " + std::to_string(pos) + ")");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

// File layout: "SRPC" magic, u32 version = 1, u32 JSON length + UTF-8 JSON
// header (config echo, step, rng state), payload region = u32 entry count +
// entries (u32 name length, name, u32 ndim, u32 dims, little-endian f32
// data), then u32 CRC32 of the payload region.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header;
  header["config"] = to_json(ck.config);
  header["step"] = ck.step;
  nlohmann::json rng = nlohmann::json::object();
  for (const auto& [name, state] : ck.rng)
    rng[name] = {state[0], state[1], state[2]};
  header["rng"] = rng;
  const std::string json = header.dump();

  std::string out;
  out.append("SRPC", 4);
  detail::ck_write_u32(out, 1);
  detail::ck_write_u32(out, std::uint32_t(json.size()));
  out.append(json);

  std::string payload;
  detail::ck_write_u32(payload, std::uint32_t(ck.entries.size()));
  for (const auto& [name, tensor] : ck.entries) {
    detail::ck_write_u32(payload, std::uint32_t(name.size()));
    payload.append(name);
    detail::ck_write_u32(payload, std::uint32_t(tensor.shape.size()));
    for (std::size_t d : tensor.shape)
      detail::ck_write_u32(payload, std::uint32_t(d));
    for (float v : tensor.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::ck_write_u32(payload, bits);
    }
  }
  const auto crc =
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
            uInt(payload.size()));
  out.append(payload);
  detail::ck_write_u32(out, std::uint32_t(crc));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
  detail::CkReader r{buf};
  if (r.bytes(4, "magic") != "SRPC")
    throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.u32("version");
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  const auto json_len = r.u32("header length");
  const std::string json = r.bytes(json_len, "header");

  const std::size_t payload_begin = r.pos;
  if (buf.size() < payload_begin + 4)
    throw std::runtime_error("checkpoint: truncated payload");
  const std::size_t payload_len = buf.size() - payload_begin - 4;
  const auto expected =
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data() + payload_begin),
            uInt(payload_len));
  detail::CkReader tail{buf};
  tail.pos = payload_begin + payload_len;
  if (tail.u32("crc") != std::uint32_t(expected))
    throw std::runtime_error("checkpoint: CRC mismatch, file corrupted");

  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad header JSON: ") +
                             e.what());
  }
  ck.config = config_from_json(header.at("config"));
  ck.step = header.at("step").get<std::uint64_t>();
  for (const auto& [name, state] : header.at("rng").items())
    ck.rng[name] = {state.at(0).get<std::uint64_t>(),
                    state.at(1).get<std::uint64_t>(),
                    state.at(2).get<std::uint64_t>()};

  const auto n_entries = r.u32("entry count");
  for (std::uint32_t e = 0; e < n_entries; ++e) {
    const auto name_len = r.u32("entry name length");
    const std::string name = r.bytes(name_len, "entry name");
    const auto ndim = r.u32("entry rank");
    std::vector<std::size_t> shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(r.u32("entry dim"));
      numel *= shape.back();
    }
    Tensor<float> t(shape);
    for (std::size_t k = 0; k < numel; ++k) {
      const auto bits = r.u32("entry data");
      std::memcpy(&t.data[k], &bits, 4);
    }
    ck.entries.emplace_back(name, std::move(t));
  }
  if (r.pos != payload_begin + payload_len)
    throw std::runtime_error("checkpoint: trailing bytes in payload");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
  const std::string buf = serialize_checkpoint(ck);
  os.write(buf.data(), std::streamsize(buf.size()));
  if (!os) throw std::runtime_error("checkpoint: I/O failure on " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace srepa
