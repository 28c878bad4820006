#pragma once

// Message passing over the label taxonomy, treated as an undirected graph.
// One layer computes, per node v,
//   out_v = GELU(LayerNorm(W_self^T h_v + W_neigh^T mean_{u in N(v)} h_u
//                          + bias + h_v))
// with the mean over an empty neighborhood defined as the zero vector.

#include <algorithm>
#include <vector>

#include "maple/autograd.hpp"
#include "maple/hierarchy.hpp"

namespace maple {

// Immutable, order-deterministic adjacency derived from the hierarchy:
// neighbors(v) = parents(v) union children(v), sorted by id.
struct AdjacencyPlan {
  int num_nodes = 0;
  std::vector<std::vector<int>> neighbors;

  static AdjacencyPlan from_hierarchy(const LabelHierarchy& h) {
    AdjacencyPlan p;
    p.num_nodes = h.size();
    p.neighbors.resize(static_cast<size_t>(h.size()));
    for (const LabelNode& n : h.nodes()) {
      auto& nb = p.neighbors[static_cast<size_t>(n.id)];
      nb.insert(nb.end(), n.parent_ids.begin(), n.parent_ids.end());
      nb.insert(nb.end(), n.child_ids.begin(), n.child_ids.end());
      std::sort(nb.begin(), nb.end());
      nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    }
    return p;
  }

  static AdjacencyPlan from_edges(int num_nodes,
                                  const std::vector<std::pair<int, int>>& edges) {
    AdjacencyPlan p;
    p.num_nodes = num_nodes;
    p.neighbors.resize(static_cast<size_t>(num_nodes));
    for (auto [a, b] : edges) {
      if (a == b) continue;
      p.neighbors[static_cast<size_t>(a)].push_back(b);
      p.neighbors[static_cast<size_t>(b)].push_back(a);
    }
    for (auto& nb : p.neighbors) {
      std::sort(nb.begin(), nb.end());
      nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    }
    return p;
  }

  int degree(int v) const {
    return static_cast<int>(neighbors[static_cast<size_t>(v)].size());
  }
};

template <class S>
struct GnnLayer {
  Tensor<S> w_self;     // [d, d]
  Tensor<S> w_neigh;    // [d, d]
  Tensor<S> bias;       // [d]
  Tensor<S> norm_gain;  // [d]
  Tensor<S> norm_bias;  // [d]

  static GnnLayer init(Eigen::Index d, Rng& rng, const std::string& prefix) {
    auto normal = [&](Eigen::Index r, Eigen::Index c) {
      Mat<S> m(r, c);
      for (Eigen::Index i = 0; i < r; ++i) {
        for (Eigen::Index j = 0; j < c; ++j) {
          m(i, j) = static_cast<S>(rng.normal() * 0.02);
        }
      }
      return m;
    };
    GnnLayer l;
    l.w_self = Tensor<S>::param({d, d}, normal(d, d), prefix + ".w_self");
    l.w_neigh = Tensor<S>::param({d, d}, normal(d, d), prefix + ".w_neigh");
    l.bias = Tensor<S>::param({d}, Mat<S>::Zero(1, d), prefix + ".bias");
    l.norm_gain =
        Tensor<S>::param({d}, Mat<S>::Ones(1, d), prefix + ".norm_gain");
    l.norm_bias =
        Tensor<S>::param({d}, Mat<S>::Zero(1, d), prefix + ".norm_bias");
    return l;
  }
};

// Mean over each node's neighborhood, batched over [B, M, d]. Isolated nodes
// get a zero row.
//
// Neighbor rows are accumulated in lexicographic order of their values, not
// of their ids. The sum of a set of rows then depends only on the rows
// themselves, which makes the layer exactly equivariant under node
// relabeling instead of merely up to float rounding.
template <class S>
Tensor<S> neighbor_mean(const Tensor<S>& h, const AdjacencyPlan& plan) {
  if (h.shape().size() != 3 ||
      h.shape()[1] != static_cast<Eigen::Index>(plan.num_nodes)) {
    throw ShapeError("neighbor_mean expects [B," +
                     std::to_string(plan.num_nodes) + ",d], got " +
                     shape_str(h.shape()));
  }
  Eigen::Index b = h.shape()[0], m = h.shape()[1], d = h.shape()[2];
  const Mat<S>& hv = h.value();
  Mat<S> out = Mat<S>::Zero(b * m, d);
  std::vector<int> ord;
  for (Eigen::Index bi = 0; bi < b; ++bi) {
    for (Eigen::Index v = 0; v < m; ++v) {
      const auto& nb = plan.neighbors[static_cast<size_t>(v)];
      if (nb.empty()) continue;
      ord.assign(nb.begin(), nb.end());
      std::stable_sort(ord.begin(), ord.end(), [&](int x, int y) {
        auto rx = hv.row(bi * m + x), ry = hv.row(bi * m + y);
        for (Eigen::Index j = 0; j < d; ++j) {
          if (rx(j) < ry(j)) return true;
          if (rx(j) > ry(j)) return false;
        }
        return false;
      });
      auto acc = out.row(bi * m + v);
      for (int u : ord) acc += hv.row(bi * m + u);
      acc /= static_cast<S>(nb.size());
    }
  }
  auto hn = h.node();
  auto nbp =
      std::make_shared<std::vector<std::vector<int>>>(plan.neighbors);
  return make_op<S>(
      "neighbor_mean", h.shape(), std::move(out), {h},
      [hn, nbp, b, m](detail::Node<S>& o) {
        for (Eigen::Index bi = 0; bi < b; ++bi) {
          for (Eigen::Index v = 0; v < m; ++v) {
            const auto& nb = (*nbp)[static_cast<size_t>(v)];
            if (nb.empty()) continue;
            S inv = S(1) / static_cast<S>(nb.size());
            for (int u : nb) {
              hn->grad.row(bi * m + u) += o.grad.row(bi * m + v) * inv;
            }
          }
        }
      });
}

template <class S>
Tensor<S> message_pass(const Tensor<S>& h, const AdjacencyPlan& plan,
                       const GnnLayer<S>& layer) {
  Tensor<S> msg = add(add(matmul(h, layer.w_self),
                          matmul(neighbor_mean(h, plan), layer.w_neigh)),
                      layer.bias);
  return gelu(layer_norm(add(msg, h), layer.norm_gain, layer.norm_bias));
}

// Stacked message passing with inverted dropout between layers (never after
// the last one).
template <class S>
Tensor<S> refine(Tensor<S> h, const AdjacencyPlan& plan,
                 const std::vector<GnnLayer<S>>& layers, double dropout_rate,
                 bool training, Rng& rng) {
  if (layers.empty()) throw ValueError("refine needs at least one layer");
  for (size_t k = 0; k < layers.size(); ++k) {
    h = message_pass(h, plan, layers[k]);
    if (k + 1 < layers.size()) {
      h = dropout(h, dropout_rate, training, rng);
    }
  }
  return h;
}

}  // namespace maple
