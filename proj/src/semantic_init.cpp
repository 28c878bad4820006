#include "maple/semantic_init.hpp"

#include <httplib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "maple/errors.hpp"
#include "maple/rng.hpp"

namespace maple {

namespace fs = std::filesystem;
using nlohmann::json;

bool cache_lookup(const std::string& dir, const std::string& key,
                  std::vector<double>& out) {
  fs::path p = fs::path(dir) / (key + ".vec");
  std::ifstream f(p, std::ios::binary);
  if (!f) return false;
  std::uint32_t dim = 0;
  f.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  if (!f || dim == 0 || dim > (1u << 20)) {
    throw IoError("corrupt embedding cache entry " + p.string());
  }
  out.resize(dim);
  f.read(reinterpret_cast<char*>(out.data()),
         static_cast<std::streamsize>(dim * sizeof(double)));
  if (!f) throw IoError("corrupt embedding cache entry " + p.string());
  return true;
}

void cache_store(const std::string& dir, const std::string& key,
                 const std::vector<double>& vec) {
  fs::create_directories(dir);
  fs::path final_path = fs::path(dir) / (key + ".vec");
  fs::path tmp = fs::path(dir) / ("." + key + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write cache file " + tmp.string());
    std::uint32_t dim = static_cast<std::uint32_t>(vec.size());
    f.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
    f.write(reinterpret_cast<const char*>(vec.data()),
            static_cast<std::streamsize>(vec.size() * sizeof(double)));
    if (!f) throw IoError("cannot write cache file " + tmp.string());
  }
  // rename is atomic within a filesystem, so readers never see half a file
  fs::rename(tmp, final_path);
}

namespace {

class FallbackProvider final : public EmbeddingProvider {
 public:
  explicit FallbackProvider(int dim) : dim_(dim) {
    if (dim < 1) throw ValueError("embedding dim must be positive");
  }
  int dim() const override { return dim_; }
  std::string kind() const override { return "deterministic_fallback"; }
  std::vector<double> embed(const std::string& text) override {
    if (text.empty()) throw ValueError("cannot embed empty text");
    Rng rng(sha256_seed(text));
    std::vector<double> v(static_cast<size_t>(dim_));
    double norm_sq = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm_sq += x * x;
    }
    double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : v) x *= inv;
    return v;
  }

 private:
  int dim_;
};

class CachedFileProvider final : public EmbeddingProvider {
 public:
  CachedFileProvider(std::string dir, int dim)
      : dir_(std::move(dir)), dim_(dim) {
    if (dim < 1) throw ValueError("embedding dim must be positive");
  }
  int dim() const override { return dim_; }
  std::string kind() const override { return "cached_file"; }
  std::vector<double> embed(const std::string& text) override {
    if (text.empty()) throw ValueError("cannot embed empty text");
    std::vector<double> v;
    if (!cache_lookup(dir_, sha256_hex(text), v)) {
      throw ProviderError("no cached embedding for text (cache dir '" + dir_ +
                          "')");
    }
    if (static_cast<int>(v.size()) != dim_) {
      throw ProviderError("cached embedding has dim " +
                          std::to_string(v.size()) + ", expected " +
                          std::to_string(dim_));
    }
    return v;
  }

 private:
  std::string dir_;
  int dim_;
};

// "http://host:port[/prefix]" -> {scheme://host:port, /prefix}
std::pair<std::string, std::string> split_endpoint(const std::string& url) {
  auto scheme_end = url.find("://");
  size_t host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  auto path_start = url.find('/', host_start);
  if (path_start == std::string::npos) return {url, ""};
  std::string path = url.substr(path_start);
  if (path == "/") path = "";
  return {url.substr(0, path_start), path};
}

class RemoteProvider final : public EmbeddingProvider {
 public:
  RemoteProvider(std::string endpoint, std::string cache_dir, int dim)
      : endpoint_(std::move(endpoint)),
        cache_dir_(std::move(cache_dir)),
        dim_(dim) {
    if (dim < 1) throw ValueError("embedding dim must be positive");
    if (endpoint_.empty()) throw ValueError("remote endpoint is empty");
  }
  int dim() const override { return dim_; }
  std::string kind() const override { return "remote"; }

  std::vector<double> embed(const std::string& text) override {
    if (text.empty()) throw ValueError("cannot embed empty text");
    std::string key = sha256_hex(text);
    std::vector<double> v;
    if (!cache_dir_.empty() && cache_lookup(cache_dir_, key, v)) {
      if (static_cast<int>(v.size()) != dim_) {
        throw ProviderError("cached embedding has dim " +
                            std::to_string(v.size()) + ", expected " +
                            std::to_string(dim_));
      }
      return v;
    }
    v = fetch(text);
    if (!cache_dir_.empty()) cache_store(cache_dir_, key, v);
    return v;
  }

 private:
  std::vector<double> fetch(const std::string& text) {
    auto [base, prefix] = split_endpoint(endpoint_);
    httplib::Client cli(base);
    cli.set_connection_timeout(5, 0);
    cli.set_read_timeout(30, 0);
    json req;
    req["texts"] = json::array({text});
    auto res = cli.Post(prefix + "/embed", req.dump(), "application/json");
    if (!res) {
      throw ProviderError("embedding endpoint " + endpoint_ +
                          " unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
      throw ProviderError("embedding endpoint returned HTTP " +
                          std::to_string(res->status));
    }
    json body;
    try {
      body = json::parse(res->body);
    } catch (const json::exception& e) {
      throw ProviderError(std::string("bad embedding response: ") + e.what());
    }
    if (!body.contains("embeddings") || !body["embeddings"].is_array() ||
        body["embeddings"].empty()) {
      throw ProviderError("embedding response lacks 'embeddings'");
    }
    std::vector<double> v;
    try {
      v = body["embeddings"][0].get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw ProviderError(std::string("bad embedding payload: ") + e.what());
    }
    if (static_cast<int>(v.size()) != dim_) {
      throw ProviderError("embedding endpoint returned dim " +
                          std::to_string(v.size()) + ", expected " +
                          std::to_string(dim_));
    }
    return v;
  }

  std::string endpoint_;
  std::string cache_dir_;
  int dim_;
};

}  // namespace

std::unique_ptr<EmbeddingProvider> make_fallback_provider(int dim) {
  return std::make_unique<FallbackProvider>(dim);
}

std::unique_ptr<EmbeddingProvider> make_remote_provider(
    const std::string& endpoint, const std::string& cache_dir, int dim) {
  return std::make_unique<RemoteProvider>(endpoint, cache_dir, dim);
}

std::unique_ptr<EmbeddingProvider> make_cached_file_provider(
    const std::string& cache_dir, int dim) {
  return std::make_unique<CachedFileProvider>(cache_dir, dim);
}

}  // namespace maple
