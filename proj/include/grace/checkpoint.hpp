#pragma once

// Checkpoint file layout:
//   "GRCE" | u32 LE header length | UTF-8 JSON header | fp64 LE payloads
// The header is {"tensors": {name: shape, ...}, "config": {...}, "step": N};
// payloads follow in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "grace/errors.hpp"
#include "grace/model.hpp"
#include "grace/tensor.hpp"

namespace grace {

struct Checkpoint {
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::ordered_json header;
  nlohmann::ordered_json shapes = nlohmann::ordered_json::object();
  for (const auto& [name, t] : ck.tensors) shapes[name] = t.shape();
  header["tensors"] = std::move(shapes);
  header["config"] = ck.config;
  header["step"] = ck.step;
  const std::string text = header.dump();

  std::ostringstream os(std::ios::binary);
  os.write("GRCE", 4);
  detail::write_u32_le(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : ck.tensors) {
    for (double v : t.data()) {
      const std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
      os.write(reinterpret_cast<const char*>(&bits), 8);
    }
  }
  return os.str();
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

inline Checkpoint parse_checkpoint(const std::string& bytes,
                                   const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& why) {
    return DataError("checkpoint " + origin + ": " + why);
  };
  if (bytes.size() < 8 || bytes.compare(0, 4, "GRCE") != 0) {
    throw fail("bad magic");
  }
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t hlen = static_cast<std::uint32_t>(u[4]) |
                             (static_cast<std::uint32_t>(u[5]) << 8) |
                             (static_cast<std::uint32_t>(u[6]) << 16) |
                             (static_cast<std::uint32_t>(u[7]) << 24);
  if (8ull + hlen > bytes.size()) throw fail("truncated header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(8, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("header is not JSON: ") + e.what());
  }
  Checkpoint ck;
  ck.config = header.value("config", nlohmann::ordered_json::object());
  ck.step = header.value("step", std::uint64_t{0});
  std::size_t off = 8ull + hlen;
  for (const auto& [name, shape_json] : header.at("tensors").items()) {
    Shape shape = shape_json.get<Shape>();
    Tensor t(shape);
    const std::size_t need = t.size() * 8;
    if (off + need > bytes.size()) throw fail("truncated payload for " + name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + off + i * 8, 8);
      t[i] = std::bit_cast<double>(detail::to_le(bits));
    }
    off += need;
    ck.tensors.emplace_back(name, std::move(t));
  }
  if (off != bytes.size()) throw fail("trailing bytes after payload");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string());
}

inline void append_params(Checkpoint& ck, const PolicyParams& params,
                          const std::string& prefix = "") {
  for (const auto& p : params.all()) ck.tensors.emplace_back(prefix + p.name, p.value);
}

/// Copies tensors named like the parameters into `params`.
inline void restore_params(const Checkpoint& ck, PolicyParams& params,
                           const std::string& prefix = "") {
  for (auto& p : params.all()) {
    const Tensor* t = ck.find(prefix + p.name);
    if (!t) throw DataError("checkpoint lacks tensor " + prefix + p.name);
    if (t->shape() != p.value.shape()) {
      throw DataError("checkpoint tensor " + p.name + " has shape " +
                      shape_str(t->shape()) + ", expected " +
                      shape_str(p.value.shape()));
    }
    p.value.storage() = t->storage();
  }
}

}  // namespace grace
