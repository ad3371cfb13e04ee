#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "flexi/tensor.hpp"

namespace flexi {

/// Named map of trainable tensors. Iteration order is the sorted path order,
/// which keeps optimizer traversals and serialization deterministic.
class ParameterStore {
 public:
  static constexpr uint32_t kFormatVersion = 1;

  Tensor& add(const std::string& path, Tensor t) {
    if (params_.count(path))
      throw UsageError("parameter path already registered: " + path);
    t.requires_grad = true;
    auto [it, ok] = params_.emplace(path, std::move(t));
    (void)ok;
    return it->second;
  }

  bool contains(const std::string& path) const { return params_.count(path) != 0; }

  Tensor& at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw UsageError("unknown parameter path: " + path);
    return it->second;
  }
  const Tensor& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw UsageError("unknown parameter path: " + path);
    return it->second;
  }

  size_t size() const { return params_.size(); }
  int64_t total_parameters() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [k, v] : params_) v.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Binary format: magic "FVPS", version u32, then per parameter:
  /// path length u32, UTF-8 path, rank u32, dims u32[], payload float64[],
  /// all little-endian.
  void save(const std::string& file) const {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw UsageError("cannot open for writing: " + file);
    out.write("FVPS", 4);
    write_u32(out, kFormatVersion);
    for (const auto& [path, t] : params_) {
      write_u32(out, static_cast<uint32_t>(path.size()));
      out.write(path.data(), static_cast<std::streamsize>(path.size()));
      write_u32(out, static_cast<uint32_t>(t.rank()));
      for (int64_t d : t.shape) write_u32(out, static_cast<uint32_t>(d));
      write_f64s(out, t.data);
    }
    if (!out) throw UsageError("write failed: " + file);
  }

  static ParameterStore load(const std::string& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw UsageError("cannot open parameter file: " + file);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "FVPS", 4) != 0)
      throw UsageError("bad parameter file magic: " + file);
    uint32_t version = read_u32(in);
    if (version != kFormatVersion)
      throw UsageError("unsupported parameter format version " +
                       std::to_string(version));
    ParameterStore store;
    while (true) {
      uint32_t plen;
      if (!try_read_u32(in, plen)) break;
      std::string path(plen, '\0');
      in.read(path.data(), plen);
      uint32_t rank = read_u32(in);
      Shape shape(rank);
      for (uint32_t i = 0; i < rank; ++i) shape[i] = read_u32(in);
      Tensor t = Tensor::zeros(shape);
      read_f64s(in, t.data);
      if (!in) throw UsageError("truncated parameter file: " + file);
      store.add(path, std::move(t));
    }
    return store;
  }

 private:
  static void write_u32(std::ofstream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<char*>(b), 4);
  }
  static uint32_t read_u32(std::ifstream& in) {
    uint32_t v;
    if (!try_read_u32(in, v)) throw UsageError("truncated parameter file");
    return v;
  }
  static bool try_read_u32(std::ifstream& in, uint32_t& v) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) return false;
    v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
        (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    return true;
  }
  static void write_f64s(std::ofstream& out, const std::vector<double>& v) {
    for (double x : v) {
      uint64_t bits;
      std::memcpy(&bits, &x, 8);
      unsigned char b[8];
      for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
      out.write(reinterpret_cast<char*>(b), 8);
    }
  }
  static void read_f64s(std::ifstream& in, std::vector<double>& v) {
    for (double& x : v) {
      unsigned char b[8];
      in.read(reinterpret_cast<char*>(b), 8);
      uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
      std::memcpy(&x, &bits, 8);
    }
  }

  std::map<std::string, Tensor> params_;
};

}  // namespace flexi
