#pragma once

// Flat binary container of named tensors plus a JSON sidecar. Layout, all
// little-endian:
//   magic "MAPLECK1" | u32 count | count * record
//   record: u32 name_len | name bytes | u8 dtype (0=f32, 1=f64)
//           | u32 rank | u32 dims[rank] | raw values
// The sidecar lives at <path>.json and carries the model configuration and
// the hierarchy digest.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maple/autograd.hpp"

namespace maple {

struct TensorBlob {
  std::string name;
  int dtype = 0;  // 0 = f32, 1 = f64
  std::vector<std::uint32_t> dims;
  std::vector<std::byte> data;

  std::int64_t count() const {
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct Checkpoint {
  std::vector<TensorBlob> tensors;  // insertion order is preserved on disk
  nlohmann::json meta;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
  const TensorBlob* find(const std::string& name) const;
};

template <class S>
TensorBlob to_blob(const std::string& name, const Tensor<S>& t) {
  TensorBlob b;
  b.name = name;
  b.dtype = sizeof(S) == 4 ? 0 : 1;
  for (Eigen::Index d : t.shape()) {
    b.dims.push_back(static_cast<std::uint32_t>(d));
  }
  const Mat<S>& v = t.value();
  b.data.resize(static_cast<size_t>(v.size()) * sizeof(S));
  std::memcpy(b.data.data(), v.data(), b.data.size());
  return b;
}

// Copies blob values into an existing tensor; shape must match, dtype may
// differ (values are converted).
template <class S>
void load_blob(const TensorBlob& b, Tensor<S>& t) {
  Shape shape(b.dims.begin(), b.dims.end());
  if (shape != t.shape()) {
    throw ValidationError("checkpoint tensor '" + b.name + "' has shape " +
                          shape_str(shape) + ", model expects " +
                          shape_str(t.shape()));
  }
  Mat<S>& v = t.raw_value();
  if (b.dtype == (sizeof(S) == 4 ? 0 : 1)) {
    std::memcpy(v.data(), b.data.data(), b.data.size());
  } else if (b.dtype == 0) {
    const float* src = reinterpret_cast<const float*>(b.data.data());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      v.data()[i] = static_cast<S>(src[i]);
    }
  } else {
    const double* src = reinterpret_cast<const double*>(b.data.data());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      v.data()[i] = static_cast<S>(src[i]);
    }
  }
}

}  // namespace maple
