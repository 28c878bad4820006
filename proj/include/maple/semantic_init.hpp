#pragma once

// Text-embedding providers and the hierarchical semantic initialization of
// node embeddings: e_v = normalize(W_psi^T psi(prompt(v))).

#include <memory>
#include <string>
#include <vector>

#include "maple/autograd.hpp"
#include "maple/digest.hpp"
#include "maple/hierarchy.hpp"

namespace maple {

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual int dim() const = 0;
  virtual std::string kind() const = 0;
  // Pure: the same text always yields the same vector. Throws ProviderError
  // on any backend failure.
  virtual std::vector<double> embed(const std::string& text) = 0;
};

// Offline stand-in for a sentence encoder: a counter-based PRNG seeded from
// SHA-256 of the text draws `dim` standard normals, L2-normalized. Stable
// across runs and platforms.
std::unique_ptr<EmbeddingProvider> make_fallback_provider(int dim);

// POST {"texts":[...]} to <endpoint>/embed, expecting
// {"embeddings":[[...]]}. With a cache directory, hits are served from disk
// and misses are written back (temp file + rename), so a warm cache works
// with the endpoint down.
std::unique_ptr<EmbeddingProvider> make_remote_provider(
    const std::string& endpoint, const std::string& cache_dir, int dim);

// Replays a cache directory only; a miss is an error.
std::unique_ptr<EmbeddingProvider> make_cached_file_provider(
    const std::string& cache_dir, int dim);

// Cache file helpers, shared by the remote provider and its tests.
bool cache_lookup(const std::string& dir, const std::string& key,
                  std::vector<double>& out);
void cache_store(const std::string& dir, const std::string& key,
                 const std::vector<double>& vec);

// The initialized node-embedding matrix plus provenance for audits.
template <class S>
struct InitMatrix {
  Tensor<S> rows;  // [|V|, d], unit rows, differentiable through w_psi
  Tensor<S> psi;   // [|V|, D_psi] constant provider outputs
  std::string provider_kind;
  std::vector<std::string> prompt_sha;  // per node, hex digest of the prompt
};

// Embeds every node's contextual description, stacks the vectors into a
// constant, projects through the learnable w_psi [D_psi, d] and normalizes
// each row. Gradients flow into w_psi; provider outputs are constants.
template <class S>
InitMatrix<S> init_node_embeddings(const LabelHierarchy& h,
                                   EmbeddingProvider& provider,
                                   const Tensor<S>& w_psi) {
  if (w_psi.shape().size() != 2 ||
      w_psi.shape()[0] != static_cast<Eigen::Index>(provider.dim())) {
    throw ShapeError("w_psi must be [" + std::to_string(provider.dim()) +
                     ",d], got " + shape_str(w_psi.shape()));
  }
  Eigen::Index v = h.size(), dpsi = provider.dim();
  Mat<S> psi(v, dpsi);
  InitMatrix<S> init;
  init.provider_kind = provider.kind();
  for (const LabelNode& n : h.nodes()) {
    std::string prompt = h.contextual_description(n.id);
    init.prompt_sha.push_back(sha256_hex(prompt));
    std::vector<double> e;
    try {
      e = provider.embed(prompt);
    } catch (const Error& err) {
      throw ProviderError("embedding node '" + n.name + "': " + err.what());
    }
    if (static_cast<Eigen::Index>(e.size()) != dpsi) {
      throw ProviderError("embedding node '" + n.name + "': got " +
                          std::to_string(e.size()) + " values, expected " +
                          std::to_string(dpsi));
    }
    for (Eigen::Index j = 0; j < dpsi; ++j) {
      psi(n.id, j) = static_cast<S>(e[static_cast<size_t>(j)]);
    }
  }
  init.psi = Tensor<S>::constant({v, dpsi}, std::move(psi));
  Tensor<S> projected = matmul(init.psi, w_psi);
  for (Eigen::Index i = 0; i < v; ++i) {
    if (projected.value().row(i).norm() < S(1e-12)) {
      throw ValueError("projected embedding of node '" +
                       h.node(static_cast<int>(i)).name +
                       "' is zero; cannot normalize");
    }
  }
  init.rows = l2_normalize_rows(projected);
  return init;
}

// The ablation arm: per-node unit-normalized Gaussian rows drawn from the
// run seed, no text involved.
template <class S>
Mat<S> random_init_rows(Eigen::Index num_nodes, Eigen::Index d,
                        std::uint64_t seed) {
  Rng rng = seeded_stream(seed, 0xe1b0);
  Mat<S> m(num_nodes, d);
  for (Eigen::Index i = 0; i < num_nodes; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      m(i, j) = static_cast<S>(rng.normal());
    }
    m.row(i) /= m.row(i).norm();
  }
  return m;
}

}  // namespace maple
