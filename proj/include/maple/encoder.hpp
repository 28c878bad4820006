#pragma once

// Multi-token vision transformer. The input sequence is
//   [global token | class tokens | patch tokens]
// run through pre-norm attention blocks; positional embeddings are added to
// patch tokens only, so the class-token part of the sequence is a set.

#include <string>
#include <vector>

#include "maple/autograd.hpp"

namespace maple {

struct EncoderConfig {
  int image_size = 32;
  int channels = 3;
  int patch = 8;
  int dim = 64;
  int depth = 2;
  int heads = 4;
  double mlp_ratio = 2.0;

  void validate() const {
    if (image_size < 1 || channels < 1 || patch < 1 || dim < 1 || depth < 0 ||
        heads < 1) {
      throw ValueError("encoder config fields must be positive");
    }
    if (image_size % patch != 0) {
      throw ValueError("patch size " + std::to_string(patch) +
                       " does not divide image size " +
                       std::to_string(image_size));
    }
    if (dim % heads != 0) {
      throw ValueError("head count " + std::to_string(heads) +
                       " does not divide width " + std::to_string(dim));
    }
    if (mlp_ratio <= 0.0) throw ValueError("mlp_ratio must be positive");
  }

  int patches_per_side() const { return image_size / patch; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return patch * patch * channels; }
  int mlp_dim() const { return static_cast<int>(dim * mlp_ratio); }
};

template <class S>
struct TransformerBlock {
  Tensor<S> ln1_gain, ln1_bias;
  Tensor<S> w_qkv, b_qkv;  // [d, 3d], [3d]
  Tensor<S> w_out, b_out;  // [d, d], [d]
  Tensor<S> ln2_gain, ln2_bias;
  Tensor<S> w_fc1, b_fc1;  // [d, mlp], [mlp]
  Tensor<S> w_fc2, b_fc2;  // [mlp, d], [d]
};

template <class S>
struct VisualEncoder {
  EncoderConfig cfg;
  Tensor<S> patch_proj;  // [P*P*C, d]
  Tensor<S> patch_bias;  // [d]
  Tensor<S> patch_pos;   // [Np, d]
  Tensor<S> global_token;  // [d]
  std::vector<TransformerBlock<S>> blocks;
  Tensor<S> visual_w;  // [d, d] projection applied to the global output
  Tensor<S> visual_b;  // [d]

  static VisualEncoder init(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    auto normal = [&](Eigen::Index r, Eigen::Index c, double sd) {
      Mat<S> m(r, c);
      for (Eigen::Index i = 0; i < r; ++i) {
        for (Eigen::Index j = 0; j < c; ++j) {
          m(i, j) = static_cast<S>(rng.normal() * sd);
        }
      }
      return m;
    };
    Eigen::Index d = cfg.dim, pd = cfg.patch_dim(), np = cfg.num_patches(),
                 md = cfg.mlp_dim();
    VisualEncoder e;
    e.cfg = cfg;
    e.patch_proj =
        Tensor<S>::param({pd, d}, normal(pd, d, 0.02), "encoder.patch_proj");
    e.patch_bias =
        Tensor<S>::param({d}, Mat<S>::Zero(1, d), "encoder.patch_bias");
    e.patch_pos =
        Tensor<S>::param({np, d}, normal(np, d, 0.02), "encoder.patch_pos");
    e.global_token =
        Tensor<S>::param({d}, normal(1, d, 0.02), "encoder.global_token");
    for (int i = 0; i < cfg.depth; ++i) {
      std::string p = "encoder.block" + std::to_string(i);
      TransformerBlock<S> b;
      b.ln1_gain = Tensor<S>::param({d}, Mat<S>::Ones(1, d), p + ".ln1_gain");
      b.ln1_bias = Tensor<S>::param({d}, Mat<S>::Zero(1, d), p + ".ln1_bias");
      b.w_qkv =
          Tensor<S>::param({d, 3 * d}, normal(d, 3 * d, 0.02), p + ".w_qkv");
      b.b_qkv =
          Tensor<S>::param({3 * d}, Mat<S>::Zero(1, 3 * d), p + ".b_qkv");
      b.w_out = Tensor<S>::param({d, d}, normal(d, d, 0.02), p + ".w_out");
      b.b_out = Tensor<S>::param({d}, Mat<S>::Zero(1, d), p + ".b_out");
      b.ln2_gain = Tensor<S>::param({d}, Mat<S>::Ones(1, d), p + ".ln2_gain");
      b.ln2_bias = Tensor<S>::param({d}, Mat<S>::Zero(1, d), p + ".ln2_bias");
      b.w_fc1 = Tensor<S>::param({d, md}, normal(d, md, 0.02), p + ".w_fc1");
      b.b_fc1 = Tensor<S>::param({md}, Mat<S>::Zero(1, md), p + ".b_fc1");
      b.w_fc2 = Tensor<S>::param({md, d}, normal(md, d, 0.02), p + ".w_fc2");
      b.b_fc2 = Tensor<S>::param({d}, Mat<S>::Zero(1, d), p + ".b_fc2");
      e.blocks.push_back(std::move(b));
    }
    e.visual_w = Tensor<S>::param({d, d}, normal(d, d, 0.02), "encoder.visual_w");
    e.visual_b = Tensor<S>::param({d}, Mat<S>::Zero(1, d), "encoder.visual_b");
    return e;
  }
};

template <class S>
struct EncoderOutput {
  Tensor<S> node_tokens;  // [B, M, d]; undefined when M == 0
  Tensor<S> global;       // [B, d], after the visual projection
};

// Non-overlapping patch grid in row-major order; features within a patch are
// laid out channel-major as (c, dy, dx). Images enter the graph as constants,
// so the rearrangement itself carries no gradient.
template <class S>
Tensor<S> patchify(const Tensor<S>& images, const VisualEncoder<S>& enc) {
  const EncoderConfig& cfg = enc.cfg;
  Shape expect = {images.shape().empty() ? 0 : images.shape()[0], cfg.channels,
                  cfg.image_size, cfg.image_size};
  if (images.shape().size() != 4 || images.shape()[1] != expect[1] ||
      images.shape()[2] != expect[2] || images.shape()[3] != expect[3]) {
    throw ShapeError("patchify expects [B," + std::to_string(cfg.channels) +
                     "," + std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + "], got " +
                     shape_str(images.shape()));
  }
  if (images.requires_grad()) {
    throw ValueError("patchify expects constant image tensors");
  }
  Eigen::Index b = images.shape()[0];
  Eigen::Index p = cfg.patch, side = cfg.patches_per_side(),
               np = cfg.num_patches(), pd = cfg.patch_dim(),
               s = cfg.image_size, c = cfg.channels;
  // images storage: (B*C*S, S)
  const Mat<S>& im = images.value();
  Mat<S> patches(b * np, pd);
  for (Eigen::Index bi = 0; bi < b; ++bi) {
    for (Eigen::Index py = 0; py < side; ++py) {
      for (Eigen::Index px = 0; px < side; ++px) {
        Eigen::Index row = bi * np + py * side + px;
        for (Eigen::Index ch = 0; ch < c; ++ch) {
          for (Eigen::Index dy = 0; dy < p; ++dy) {
            patches.block(row, (ch * p + dy) * p, 1, p) =
                im.block(bi * c * s + ch * s + py * p + dy, px * p, 1, p);
          }
        }
      }
    }
  }
  Tensor<S> flat = Tensor<S>::constant({b, np, pd}, std::move(patches));
  Tensor<S> tok = add(add(matmul(flat, enc.patch_proj), enc.patch_bias),
                      enc.patch_pos);
  return tok;
}

// Runs the full sequence through the transformer. class_tokens is [M, d] and
// may be empty (undefined tensor) for a global-only encoder; node_tokens are
// then left undefined too.
template <class S>
EncoderOutput<S> encode(const Tensor<S>& images, const Tensor<S>& class_tokens,
                        const VisualEncoder<S>& enc) {
  Eigen::Index b = images.shape()[0];
  Eigen::Index d = enc.cfg.dim;
  Eigen::Index m = 0;
  if (class_tokens.defined()) {
    if (class_tokens.shape().size() != 2 || class_tokens.shape()[1] != d) {
      throw ShapeError("class tokens must be [M," + std::to_string(d) +
                       "], got " + shape_str(class_tokens.shape()));
    }
    m = class_tokens.shape()[0];
  }

  Tensor<S> glob = tile_leading(reshape(enc.global_token, {1, d}), b);
  Tensor<S> patches = patchify(images, enc);
  Tensor<S> x;
  if (m > 0) {
    x = token_concat<S>({glob, tile_leading(class_tokens, b), patches});
  } else {
    x = token_concat<S>({glob, patches});
  }

  std::vector<Eigen::Index> qi, ki, vi;
  for (Eigen::Index j = 0; j < d; ++j) {
    qi.push_back(j);
    ki.push_back(d + j);
    vi.push_back(2 * d + j);
  }
  for (const TransformerBlock<S>& blk : enc.blocks) {
    Tensor<S> h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
    Tensor<S> qkv = add(matmul(h, blk.w_qkv), blk.b_qkv);
    Tensor<S> att = attention(gather_cols(qkv, qi), gather_cols(qkv, ki),
                              gather_cols(qkv, vi), enc.cfg.heads);
    x = add(x, add(matmul(att, blk.w_out), blk.b_out));
    Tensor<S> h2 = layer_norm(x, blk.ln2_gain, blk.ln2_bias);
    Tensor<S> mlp = add(
        matmul(gelu(add(matmul(h2, blk.w_fc1), blk.b_fc1)), blk.w_fc2),
        blk.b_fc2);
    x = add(x, mlp);
  }

  EncoderOutput<S> out;
  if (m > 0) out.node_tokens = token_slice(x, 1, m);
  Tensor<S> g = reshape(token_slice(x, 0, 1), {b, d});
  out.global = add(matmul(g, enc.visual_w), enc.visual_b);
  return out;
}

}  // namespace maple
