#ifndef ENTRAIN_SAFETENSORS_HPP_
#define ENTRAIN_SAFETENSORS_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "entrain/error.hpp"

namespace entrain::safetensors {

// Minimal reader/writer for the safetensors container: an 8-byte little-endian
// header length, a JSON header, then raw little-endian tensor bytes.

struct TensorView {
  std::string dtype;
  std::vector<std::int64_t> shape;
  const unsigned char* data = nullptr;
  std::size_t nbytes = 0;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
};

namespace detail {

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1F;
  std::uint32_t mant = h & 0x3FF;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FF;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 31) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace detail

class File {
 public:
  explicit File(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::ModelLoad, "cannot open " + path.string());
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (bytes_.size() < 8) fail(ErrorCode::ModelLoad, path.string() + ": truncated safetensors file");
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | bytes_[static_cast<std::size_t>(i)];
    if (8 + header_len > bytes_.size()) fail(ErrorCode::ModelLoad, path.string() + ": bad header length");
    header_ = nlohmann::json::parse(bytes_.begin() + 8, bytes_.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    data_start_ = 8 + header_len;
    if (header_.contains("__metadata__")) {
      for (auto& [k, v] : header_["__metadata__"].items()) metadata_[k] = v.get<std::string>();
    }
  }

  bool contains(const std::string& name) const { return header_.contains(name); }

  TensorView view(const std::string& name) const {
    if (!header_.contains(name)) fail(ErrorCode::ModelLoad, "missing tensor '" + name + "'");
    const auto& h = header_.at(name);
    TensorView v;
    v.dtype = h.at("dtype").get<std::string>();
    v.shape = h.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = h.at("data_offsets").get<std::vector<std::size_t>>();
    if (offsets.size() != 2 || data_start_ + offsets[1] > bytes_.size() || offsets[0] > offsets[1]) {
      fail(ErrorCode::ModelLoad, "bad offsets for tensor '" + name + "'");
    }
    v.data = bytes_.data() + data_start_ + offsets[0];
    v.nbytes = offsets[1] - offsets[0];
    return v;
  }

  /// Tensor contents converted to `T` (row-major, as stored).
  template <typename T>
  std::vector<T> read(const std::string& name) const {
    const TensorView v = view(name);
    const std::size_t n = v.numel();
    std::vector<T> out(n);
    auto check = [&](std::size_t width) {
      if (v.nbytes != n * width) fail(ErrorCode::ModelLoad, "size mismatch for tensor '" + name + "'");
    };
    if (v.dtype == "F32") {
      check(4);
      for (std::size_t i = 0; i < n; ++i) {
        float f;
        std::memcpy(&f, v.data + 4 * i, 4);
        out[i] = static_cast<T>(f);
      }
    } else if (v.dtype == "F64") {
      check(8);
      for (std::size_t i = 0; i < n; ++i) {
        double d;
        std::memcpy(&d, v.data + 8 * i, 8);
        out[i] = static_cast<T>(d);
      }
    } else if (v.dtype == "F16") {
      check(2);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, v.data + 2 * i, 2);
        out[i] = static_cast<T>(detail::half_to_float(h));
      }
    } else if (v.dtype == "BF16") {
      check(2);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, v.data + 2 * i, 2);
        out[i] = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16));
      }
    } else {
      fail(ErrorCode::ModelLoad, "unsupported dtype " + v.dtype + " for tensor '" + name + "'");
    }
    return out;
  }

  std::vector<std::int64_t> shape(const std::string& name) const { return view(name).shape; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

 private:
  std::vector<unsigned char> bytes_;
  nlohmann::json header_;
  std::size_t data_start_ = 0;
  std::map<std::string, std::string> metadata_;
};

/// Accumulates F64 tensors and writes them in name order.
class Writer {
 public:
  void add(const std::string& name, std::vector<std::int64_t> shape, const double* data, std::size_t n) {
    tensors_[name] = {std::move(shape), std::vector<double>(data, data + n)};
  }
  void set_metadata(const std::string& key, const std::string& value) { metadata_[key] = value; }

  void write(const std::filesystem::path& path) const {
    nlohmann::json header = nlohmann::json::object();
    if (!metadata_.empty()) header["__metadata__"] = metadata_;
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors_) {
      const std::size_t nbytes = t.second.size() * sizeof(double);
      header[name] = {{"dtype", "F64"}, {"shape", t.first}, {"data_offsets", {offset, offset + nbytes}}};
      offset += nbytes;
    }
    std::string h = header.dump();
    while ((h.size() + 8) % 8 != 0) h.push_back(' ');
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
    std::uint64_t len = h.size();
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xFF));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : tensors_) {
      out.write(reinterpret_cast<const char*>(t.second.data()),
                static_cast<std::streamsize>(t.second.size() * sizeof(double)));
    }
  }

 private:
  std::map<std::string, std::pair<std::vector<std::int64_t>, std::vector<double>>> tensors_;
  std::map<std::string, std::string> metadata_;
};

}  // namespace entrain::safetensors

#endif  // ENTRAIN_SAFETENSORS_HPP_
