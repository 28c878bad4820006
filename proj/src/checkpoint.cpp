#include "maple/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "maple/errors.hpp"

namespace maple {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'P', 'L', 'E', 'C', 'K', '1'};

template <class T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& f, const std::string& what) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw IoError("checkpoint truncated while reading " + what);
  return v;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(tensors.size()));
  for (const TensorBlob& t : tensors) {
    write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(t.name.size()));
    f.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_pod<std::uint8_t>(f, static_cast<std::uint8_t>(t.dtype));
    write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(t.dims.size()));
    for (std::uint32_t d : t.dims) write_pod<std::uint32_t>(f, d);
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size()));
  }
  if (!f) throw IoError("short write to checkpoint " + path);
  f.close();

  std::ofstream sf(path + ".json", std::ios::trunc);
  if (!sf) throw IoError("cannot write checkpoint sidecar " + path + ".json");
  sf << meta.dump(2) << "\n";
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError(path + " is not a checkpoint file");
  }
  Checkpoint ck;
  auto count = read_pod<std::uint32_t>(f, "tensor count");
  ck.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorBlob t;
    auto name_len = read_pod<std::uint32_t>(f, "name length");
    t.name.resize(name_len);
    f.read(t.name.data(), name_len);
    if (!f) throw IoError("checkpoint truncated while reading name");
    t.dtype = read_pod<std::uint8_t>(f, "dtype of " + t.name);
    if (t.dtype != 0 && t.dtype != 1) {
      throw IoError("unknown dtype tag for tensor '" + t.name + "'");
    }
    auto rank = read_pod<std::uint32_t>(f, "rank of " + t.name);
    if (rank > 8) throw IoError("implausible rank for tensor '" + t.name + "'");
    std::int64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(read_pod<std::uint32_t>(f, "dims of " + t.name));
      n *= t.dims.back();
    }
    size_t bytes = static_cast<size_t>(n) * (t.dtype == 0 ? 4 : 8);
    t.data.resize(bytes);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(bytes));
    if (!f) throw IoError("checkpoint truncated while reading '" + t.name + "'");
    ck.tensors.push_back(std::move(t));
  }

  std::ifstream sf(path + ".json");
  if (sf) {
    try {
      sf >> ck.meta;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("bad checkpoint sidecar " + path + ".json: " + e.what());
    }
  }
  return ck;
}

const TensorBlob* Checkpoint::find(const std::string& name) const {
  for (const TensorBlob& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

}  // namespace maple
