#pragma once

// Gated fusion of visual context into node embeddings, the shared
// classification head, and the level-adaptive loss.

#include <string>
#include <vector>

#include "maple/autograd.hpp"

namespace maple {

template <class S>
struct GateNet {
  Tensor<S> w;          // [2d, d]
  Tensor<S> b;          // [d]
  Tensor<S> norm_gain;  // [d]
  Tensor<S> norm_bias;  // [d]

  static GateNet init(Eigen::Index d, Rng& rng) {
    Mat<S> w(2 * d, d);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        w(i, j) = static_cast<S>(rng.normal() * 0.02);
      }
    }
    GateNet g;
    g.w = Tensor<S>::param({2 * d, d}, std::move(w), "gate.w");
    g.b = Tensor<S>::param({d}, Mat<S>::Zero(1, d), "gate.b");
    g.norm_gain = Tensor<S>::param({d}, Mat<S>::Ones(1, d), "gate.norm_gain");
    g.norm_bias = Tensor<S>::param({d}, Mat<S>::Zero(1, d), "gate.norm_bias");
    return g;
  }
};

template <class S>
struct Head {
  Tensor<S> w;  // [2d, |V|]
  Tensor<S> b;  // [|V|]

  static Head init(Eigen::Index d, Eigen::Index num_labels, Rng& rng) {
    Mat<S> w(2 * d, num_labels);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        w(i, j) = static_cast<S>(rng.normal() * 0.02);
      }
    }
    Head h;
    h.w = Tensor<S>::param({2 * d, num_labels}, std::move(w), "head.w");
    h.b = Tensor<S>::param({num_labels}, Mat<S>::Zero(1, num_labels),
                           "head.b");
    return h;
  }
};

// Per-node, per-channel gate: sigmoid(LayerNorm(W^T [z || e_v] + b)).
// z is [B, d] visual context, e is [B, M, d] node embeddings; result [B, M, d]
// in (0, 1).
template <class S>
Tensor<S> gate(const Tensor<S>& z, const Tensor<S>& e, const GateNet<S>& g) {
  if (e.shape().size() != 3 || z.shape().size() != 2 ||
      e.shape()[0] != z.shape()[0] || e.shape()[2] != z.shape()[1]) {
    throw ShapeError("gate expects z [B,d] and e [B,M,d], got " +
                     shape_str(z.shape()) + " and " + shape_str(e.shape()));
  }
  Tensor<S> zr = expand_mid(z, e.shape()[1]);
  Tensor<S> pre = add(matmul(concat_last_dim(zr, e), g.w), g.b);
  return sigmoid(layer_norm(pre, g.norm_gain, g.norm_bias));
}

// Convex blend h~ = gamma .* e + (1 - gamma) .* z (z broadcast per node).
template <class S>
Tensor<S> fuse(const Tensor<S>& z, const Tensor<S>& e, const Tensor<S>& gamma) {
  if (gamma.shape() != e.shape()) {
    throw ShapeError("fuse: gate and embeddings must share shape");
  }
  Tensor<S> zr = expand_mid(z, e.shape()[1]);
  Tensor<S> one = scalar_tensor<S>(S(1));
  return add(mul(gamma, e), mul(sub(one, gamma), zr));
}

// Unified head: logits = W^T [mean-pooled tokens || z] + b over all nodes.
template <class S>
Tensor<S> predict(const Tensor<S>& pooled_source, const Tensor<S>& z,
                  const Head<S>& head) {
  Tensor<S> pooled = mean_over_axis(pooled_source, 1);
  return add(matmul(concat_last_dim(pooled, z), head.w), head.b);
}

// Loss for one level slice. Rows whose targets hold exactly one positive are
// scored with softmax cross-entropy, every other row (multi-positive or
// all-zero) with mean binary cross-entropy; the result is the mean over all
// rows of the batch.
template <class S>
Tensor<S> adaptive_level_loss(const Tensor<S>& logits, const Mat<S>& targets) {
  if (logits.shape().size() != 2 || targets.rows() != logits.rows() ||
      targets.cols() != logits.cols()) {
    throw ShapeError("adaptive_level_loss: logits/target geometry mismatch");
  }
  Eigen::Index bsz = logits.rows();
  std::vector<Eigen::Index> ce_rows, bce_rows, ce_targets;
  for (Eigen::Index i = 0; i < bsz; ++i) {
    Eigen::Index positives = 0, hot = -1;
    for (Eigen::Index j = 0; j < targets.cols(); ++j) {
      S t = targets(i, j);
      if (t != S(0) && t != S(1)) {
        throw ValueError("adaptive_level_loss: targets must be 0/1");
      }
      if (t == S(1)) {
        ++positives;
        hot = j;
      }
    }
    if (positives == 1) {
      ce_rows.push_back(i);
      ce_targets.push_back(hot);
    } else {
      bce_rows.push_back(i);
    }
  }

  Tensor<S> acc;
  if (!ce_rows.empty()) {
    acc = sum(cross_entropy_rows(gather_rows(logits, ce_rows), ce_targets));
  }
  if (!bce_rows.empty()) {
    Mat<S> yb(static_cast<Eigen::Index>(bce_rows.size()), targets.cols());
    for (size_t i = 0; i < bce_rows.size(); ++i) {
      yb.row(static_cast<Eigen::Index>(i)) = targets.row(bce_rows[i]);
    }
    Tensor<S> part = sum(bce_logits_rows(gather_rows(logits, bce_rows), yb));
    acc = acc.defined() ? add(acc, part) : part;
  }
  return scale(acc, S(1) / static_cast<S>(bsz));
}

// Mean over levels of the per-level adaptive losses. `level_ids` comes from
// the hierarchy's level partition; `targets` covers all nodes.
template <class S>
Tensor<S> total_loss(const Tensor<S>& logits, const Mat<S>& targets,
                     const std::vector<std::vector<int>>& level_ids) {
  if (level_ids.empty()) throw ValueError("total_loss: no levels");
  Tensor<S> acc;
  for (const auto& ids : level_ids) {
    std::vector<Eigen::Index> cols(ids.begin(), ids.end());
    Mat<S> yt(targets.rows(), static_cast<Eigen::Index>(cols.size()));
    for (size_t j = 0; j < cols.size(); ++j) {
      yt.col(static_cast<Eigen::Index>(j)) = targets.col(cols[j]);
    }
    Tensor<S> lt = adaptive_level_loss(gather_cols(logits, cols), yt);
    acc = acc.defined() ? add(acc, lt) : lt;
  }
  return scale(acc, S(1) / static_cast<S>(level_ids.size()));
}

}  // namespace maple
