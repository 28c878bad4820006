#pragma once

// The full classifier: encoder -> taxonomy message passing -> gated fusion
// -> unified head, plus the flat baseline (global token -> leaf head) used
// for comparisons. One instance owns all parameters; forward passes build a
// fresh autodiff tape over them.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "maple/autograd.hpp"
#include "maple/checkpoint.hpp"
#include "maple/encoder.hpp"
#include "maple/fusion_head.hpp"
#include "maple/graph_refine.hpp"
#include "maple/hierarchy.hpp"
#include "maple/semantic_init.hpp"

namespace maple {

enum class ModelMode { maple, flat };
enum class InitMode { semantic, random };
enum class PoolSource { fused, gnn };

struct ModelConfig {
  EncoderConfig encoder;
  int gnn_layers = 2;
  double dropout = 0.1;
  int embed_dim = 768;  // sentence-embedding width D_psi
  ModelMode mode = ModelMode::maple;
  InitMode init = InitMode::semantic;
  PoolSource pool = PoolSource::fused;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["encoder"] = {{"image_size", encoder.image_size},
                    {"channels", encoder.channels},
                    {"patch", encoder.patch},
                    {"dim", encoder.dim},
                    {"depth", encoder.depth},
                    {"heads", encoder.heads},
                    {"mlp_ratio", encoder.mlp_ratio}};
    j["gnn_layers"] = gnn_layers;
    j["dropout"] = dropout;
    j["embed_dim"] = embed_dim;
    j["mode"] = mode == ModelMode::maple ? "maple" : "flat";
    j["init"] = init == InitMode::semantic ? "semantic" : "random";
    j["pool"] = pool == PoolSource::fused ? "fused" : "gnn";
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    const auto& e = j.at("encoder");
    c.encoder.image_size = e.at("image_size").get<int>();
    c.encoder.channels = e.at("channels").get<int>();
    c.encoder.patch = e.at("patch").get<int>();
    c.encoder.dim = e.at("dim").get<int>();
    c.encoder.depth = e.at("depth").get<int>();
    c.encoder.heads = e.at("heads").get<int>();
    c.encoder.mlp_ratio = e.at("mlp_ratio").get<double>();
    c.gnn_layers = j.at("gnn_layers").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.embed_dim = j.at("embed_dim").get<int>();
    std::string mode = j.at("mode").get<std::string>();
    if (mode != "maple" && mode != "flat") {
      throw ValidationError("unknown model mode '" + mode + "'");
    }
    c.mode = mode == "maple" ? ModelMode::maple : ModelMode::flat;
    std::string init = j.at("init").get<std::string>();
    if (init != "semantic" && init != "random") {
      throw ValidationError("unknown init mode '" + init + "'");
    }
    c.init = init == "semantic" ? InitMode::semantic : InitMode::random;
    std::string pool = j.at("pool").get<std::string>();
    if (pool != "fused" && pool != "gnn") {
      throw ValidationError("unknown pool source '" + pool + "'");
    }
    c.pool = pool == "fused" ? PoolSource::fused : PoolSource::gnn;
    return c;
  }
};

template <class S>
struct ModelOutput {
  Tensor<S> tokens;       // [M, d] node embeddings entering the encoder
  Tensor<S> node_tokens;  // [B, M, d] encoder class-token outputs
  Tensor<S> refined;      // [B, M, d] after message passing
  Tensor<S> gamma;        // [B, M, d] gate values
  Tensor<S> fused;        // [B, M, d]
  Tensor<S> z;            // [B, d] projected global context
  Tensor<S> logits;       // [B, |V|] (flat mode: [B, num leaves])
};

template <class S>
class MapleModel {
 public:
  // `provider` is consulted only in maple+semantic mode.
  static MapleModel build(const LabelHierarchy& h, const ModelConfig& cfg,
                          std::uint64_t seed, EmbeddingProvider* provider) {
    MapleModel m(h, cfg, seed);
    if (cfg.mode == ModelMode::maple && cfg.init == InitMode::semantic) {
      if (!provider) {
        throw ValueError("semantic initialization needs an embedding provider");
      }
      InitMatrix<S> init = init_node_embeddings(h, *provider, m.w_psi_);
      m.psi_ = init.psi;
      m.tokens_init_ = init.rows.value();
      m.init_provenance_ = init.prompt_sha;
      m.provider_kind_ = init.provider_kind;
    }
    return m;
  }

  static MapleModel from_checkpoint(const LabelHierarchy& h,
                                    const Checkpoint& ck) {
    if (!ck.meta.contains("model")) {
      throw ValidationError("checkpoint sidecar lacks model config");
    }
    ModelConfig cfg = ModelConfig::from_json(ck.meta.at("model"));
    if (ck.meta.contains("hierarchy_digest") &&
        ck.meta.at("hierarchy_digest").get<std::string>() != h.digest()) {
      throw ValidationError(
          "checkpoint was trained against a different hierarchy");
    }
    MapleModel m(h, cfg, 0);
    auto params = m.named_params();
    size_t expected = params.size();
    for (auto& [name, t] : params) {
      const TensorBlob* b = ck.find(name);
      if (!b) {
        throw ValidationError("checkpoint lacks tensor '" + name + "'");
      }
      load_blob(*b, t);
    }
    if (cfg.mode == ModelMode::maple) {
      if (cfg.init == InitMode::semantic) {
        const TensorBlob* psi = ck.find("buffers.psi");
        if (!psi) throw ValidationError("checkpoint lacks tensor 'buffers.psi'");
        load_blob(*psi, m.psi_);
        ++expected;
      }
      const TensorBlob* ti = ck.find("buffers.tokens_init");
      if (!ti) {
        throw ValidationError("checkpoint lacks tensor 'buffers.tokens_init'");
      }
      Tensor<S> tmp = zeros<S>({h.size(), cfg.encoder.dim});
      load_blob(*ti, tmp);
      m.tokens_init_ = tmp.value();
      ++expected;
    }
    if (ck.tensors.size() != expected) {
      throw ValidationError("checkpoint holds " +
                            std::to_string(ck.tensors.size()) +
                            " tensors, model expects " +
                            std::to_string(expected));
    }
    return m;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    for (const auto& [name, t] : named_params_const()) {
      ck.tensors.push_back(to_blob(name, t));
    }
    if (cfg_.mode == ModelMode::maple) {
      if (cfg_.init == InitMode::semantic) {
        ck.tensors.push_back(to_blob("buffers.psi", psi_));
      }
      Tensor<S> ti = Tensor<S>::constant({h_->size(), cfg_.encoder.dim},
                                         Mat<S>(tokens_init_));
      ck.tensors.push_back(to_blob("buffers.tokens_init", ti));
    }
    ck.meta["model"] = cfg_.to_json();
    ck.meta["hierarchy_digest"] = h_->digest();
    ck.meta["scalar"] = sizeof(S) == 4 ? "f32" : "f64";
    ck.meta["format"] = 1;
    return ck;
  }

  // Node embeddings as the model currently computes them. In semantic mode
  // they are recomputed from w_psi, so gradients reach w_psi through the
  // normalization on every step; in random-init mode the token matrix itself
  // is the parameter.
  Tensor<S> class_tokens() const {
    if (cfg_.init == InitMode::semantic) {
      return l2_normalize_rows(matmul(psi_, w_psi_));
    }
    return class_tokens_;
  }

  ModelOutput<S> forward(const Tensor<S>& images, bool training, Rng& rng) {
    ModelOutput<S> out;
    if (cfg_.mode == ModelMode::flat) {
      EncoderOutput<S> enc = encode(images, Tensor<S>(), encoder_);
      out.z = enc.global;
      out.logits = add(matmul(out.z, flat_w_), flat_b_);
      return out;
    }
    out.tokens = class_tokens();
    EncoderOutput<S> enc = encode(images, out.tokens, encoder_);
    out.node_tokens = enc.node_tokens;
    out.z = enc.global;
    out.refined = refine(out.node_tokens, plan_, gnn_, cfg_.dropout, training,
                         rng);
    out.gamma = gate(out.z, out.refined, gate_);
    out.fused = fuse(out.z, out.refined, out.gamma);
    const Tensor<S>& pooled =
        cfg_.pool == PoolSource::fused ? out.fused : out.refined;
    out.logits = predict(pooled, out.z, head_);
    return out;
  }

  // targets: [B, |V|] 0/1 over all nodes (also in flat mode; the leaf slice
  // is taken internally).
  Tensor<S> loss(const ModelOutput<S>& out, const Mat<S>& targets) {
    if (targets.cols() != h_->size()) {
      throw ShapeError("targets must cover all " + std::to_string(h_->size()) +
                       " nodes");
    }
    if (cfg_.mode == ModelMode::flat) {
      Mat<S> leaf_t(targets.rows(),
                    static_cast<Eigen::Index>(h_->leaf_ids().size()));
      for (size_t j = 0; j < h_->leaf_ids().size(); ++j) {
        leaf_t.col(static_cast<Eigen::Index>(j)) =
            targets.col(h_->leaf_ids()[j]);
      }
      Tensor<S> per_row = bce_logits_rows(out.logits, leaf_t);
      return scale(sum(per_row), S(1) / static_cast<S>(targets.rows()));
    }
    return total_loss(out.logits, targets, level_ids_);
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_params() {
    return named_params_const();
  }

  const LabelHierarchy& hierarchy() const { return *h_; }
  const ModelConfig& config() const { return cfg_; }
  const AdjacencyPlan& plan() const { return plan_; }
  const Mat<S>& tokens_init() const { return tokens_init_; }
  const VisualEncoder<S>& encoder() const { return encoder_; }
  const std::vector<GnnLayer<S>>& gnn() const { return gnn_; }
  const GateNet<S>& gate_net() const { return gate_; }
  const Head<S>& head() const { return head_; }

 private:
  MapleModel(const LabelHierarchy& h, const ModelConfig& cfg,
             std::uint64_t seed)
      : h_(&h), cfg_(cfg), plan_(AdjacencyPlan::from_hierarchy(h)) {
    cfg_.encoder.validate();
    if (cfg_.gnn_layers < 1 && cfg_.mode == ModelMode::maple) {
      throw ValueError("maple mode needs at least one message-passing layer");
    }
    Eigen::Index d = cfg_.encoder.dim;
    Eigen::Index v = h.size();
    Rng rng = seeded_stream(seed, 0x10de1);
    encoder_ = VisualEncoder<S>::init(cfg_.encoder, rng);
    if (cfg_.mode == ModelMode::flat) {
      Eigen::Index leaves = static_cast<Eigen::Index>(h.leaf_ids().size());
      Mat<S> w(d, leaves);
      for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j < leaves; ++j) {
          w(i, j) = static_cast<S>(rng.normal() * 0.02);
        }
      }
      flat_w_ = Tensor<S>::param({d, leaves}, std::move(w), "flat_head.w");
      flat_b_ = Tensor<S>::param({leaves}, Mat<S>::Zero(1, leaves),
                                 "flat_head.b");
      return;
    }

    for (int lv = 1; lv <= h.num_levels(); ++lv) {
      level_ids_.push_back(h.level_ids(lv));
    }
    if (cfg_.init == InitMode::semantic) {
      Mat<S> w(cfg_.embed_dim, d);
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
          w(i, j) = static_cast<S>(rng.normal() * 0.02);
        }
      }
      w_psi_ = Tensor<S>::param({cfg_.embed_dim, d}, std::move(w), "w_psi");
      psi_ = zeros<S>({v, cfg_.embed_dim});  // overwritten by build/load
      tokens_init_ = Mat<S>::Zero(v, d);
    } else {
      Mat<S> rows = random_init_rows<S>(v, d, seed);
      tokens_init_ = rows;
      class_tokens_ =
          Tensor<S>::param({v, d}, std::move(rows), "class_tokens");
    }
    for (int k = 0; k < cfg_.gnn_layers; ++k) {
      gnn_.push_back(GnnLayer<S>::init(d, rng, "gnn" + std::to_string(k)));
    }
    gate_ = GateNet<S>::init(d, rng);
    head_ = Head<S>::init(d, v, rng);
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_params_const() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    auto push = [&](const Tensor<S>& t) { out.emplace_back(t.name(), t); };
    if (cfg_.mode == ModelMode::maple) {
      if (cfg_.init == InitMode::semantic) {
        push(w_psi_);
      } else {
        push(class_tokens_);
      }
    }
    push(encoder_.patch_proj);
    push(encoder_.patch_bias);
    push(encoder_.patch_pos);
    push(encoder_.global_token);
    for (const auto& b : encoder_.blocks) {
      push(b.ln1_gain);
      push(b.ln1_bias);
      push(b.w_qkv);
      push(b.b_qkv);
      push(b.w_out);
      push(b.b_out);
      push(b.ln2_gain);
      push(b.ln2_bias);
      push(b.w_fc1);
      push(b.b_fc1);
      push(b.w_fc2);
      push(b.b_fc2);
    }
    push(encoder_.visual_w);
    push(encoder_.visual_b);
    if (cfg_.mode == ModelMode::flat) {
      push(flat_w_);
      push(flat_b_);
      return out;
    }
    for (const auto& l : gnn_) {
      push(l.w_self);
      push(l.w_neigh);
      push(l.bias);
      push(l.norm_gain);
      push(l.norm_bias);
    }
    push(gate_.w);
    push(gate_.b);
    push(gate_.norm_gain);
    push(gate_.norm_bias);
    push(head_.w);
    push(head_.b);
    return out;
  }

  const LabelHierarchy* h_;
  ModelConfig cfg_;
  AdjacencyPlan plan_;
  std::vector<std::vector<int>> level_ids_;

  Tensor<S> w_psi_;
  Tensor<S> psi_;  // [|V|, D_psi] constant sentence embeddings
  Tensor<S> class_tokens_;
  Mat<S> tokens_init_;
  std::vector<std::string> init_provenance_;
  std::string provider_kind_;

  VisualEncoder<S> encoder_;
  std::vector<GnnLayer<S>> gnn_;
  GateNet<S> gate_;
  Head<S> head_;
  Tensor<S> flat_w_, flat_b_;
};

}  // namespace maple
