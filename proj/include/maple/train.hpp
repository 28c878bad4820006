#pragma once

// Optimization loop: AdamW with decoupled weight decay, linear-warmup cosine
// learning rate, seeded shuffling, early stopping on validation leaf AU-PRC,
// and the K-shot comparison harness.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "maple/data.hpp"
#include "maple/digest.hpp"
#include "maple/metrics.hpp"
#include "maple/model.hpp"

namespace maple {

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  int warmup_epochs = 10;
  int total_epochs = 50;
  int batch_size = 16;
  int patience = 0;       // epochs without improvement; 0 disables
  double clip_norm = 1.0;  // global gradient norm cap; <= 0 disables
  std::uint64_t seed = 42;

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (total_epochs < 1) throw ValidationError("total_epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs) {
      throw ValidationError("warmup_epochs must lie in [0, total_epochs)");
    }
    if (lr <= 0) throw ValidationError("lr must be positive");
    if (weight_decay < 0) throw ValidationError("weight_decay must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"model", model.to_json()},       {"lr", lr},
            {"weight_decay", weight_decay},   {"warmup_epochs", warmup_epochs},
            {"total_epochs", total_epochs},   {"batch_size", batch_size},
            {"patience", patience},           {"clip_norm", clip_norm},
            {"seed", seed}};
  }

  std::string digest() const { return sha256_hex(to_json().dump()); }

  // YAML layout mirrors to_json: a `model:` block (with nested `encoder:`)
  // and flat optimizer keys, all optional.
  static TrainConfig from_yaml(const YAML::Node& root) {
    TrainConfig c;
    if (root["model"]) {
      const YAML::Node& m = root["model"];
      if (m["encoder"]) {
        const YAML::Node& e = m["encoder"];
        auto geti = [&](const char* k, int dflt) {
          return e[k] ? e[k].as<int>() : dflt;
        };
        c.model.encoder.image_size = geti("image_size", c.model.encoder.image_size);
        c.model.encoder.channels = geti("channels", c.model.encoder.channels);
        c.model.encoder.patch = geti("patch", c.model.encoder.patch);
        c.model.encoder.dim = geti("dim", c.model.encoder.dim);
        c.model.encoder.depth = geti("depth", c.model.encoder.depth);
        c.model.encoder.heads = geti("heads", c.model.encoder.heads);
        if (e["mlp_ratio"]) c.model.encoder.mlp_ratio = e["mlp_ratio"].as<double>();
      }
      if (m["gnn_layers"]) c.model.gnn_layers = m["gnn_layers"].as<int>();
      if (m["dropout"]) c.model.dropout = m["dropout"].as<double>();
      if (m["embed_dim"]) c.model.embed_dim = m["embed_dim"].as<int>();
      if (m["mode"]) {
        std::string v = m["mode"].as<std::string>();
        if (v != "maple" && v != "flat") {
          throw ValidationError("unknown model mode '" + v + "'");
        }
        c.model.mode = v == "maple" ? ModelMode::maple : ModelMode::flat;
      }
      if (m["init"]) {
        std::string v = m["init"].as<std::string>();
        if (v != "semantic" && v != "random") {
          throw ValidationError("unknown init mode '" + v + "'");
        }
        c.model.init = v == "semantic" ? InitMode::semantic : InitMode::random;
      }
      if (m["pool"]) {
        std::string v = m["pool"].as<std::string>();
        if (v != "fused" && v != "gnn") {
          throw ValidationError("unknown pool source '" + v + "'");
        }
        c.model.pool = v == "fused" ? PoolSource::fused : PoolSource::gnn;
      }
    }
    auto num = [&](const char* k, double dflt) {
      return root[k] ? root[k].as<double>() : dflt;
    };
    c.lr = num("lr", c.lr);
    c.weight_decay = num("weight_decay", c.weight_decay);
    c.clip_norm = num("clip_norm", c.clip_norm);
    if (root["warmup_epochs"]) c.warmup_epochs = root["warmup_epochs"].as<int>();
    if (root["total_epochs"]) c.total_epochs = root["total_epochs"].as<int>();
    if (root["batch_size"]) c.batch_size = root["batch_size"].as<int>();
    if (root["patience"]) c.patience = root["patience"].as<int>();
    if (root["seed"]) c.seed = root["seed"].as<std::uint64_t>();
    return c;
  }

  static TrainConfig from_yaml_file(const std::string& path) {
    try {
      return from_yaml(YAML::LoadFile(path));
    } catch (const YAML::Exception& e) {
      throw ValidationError("config " + path + ": " + e.what());
    }
  }
};

// Linear 0 -> lr across the warmup epochs, then a half cosine down to zero
// at total_epochs. Continuous at the junction.
inline double lr_schedule(std::int64_t step, std::int64_t steps_per_epoch,
                          const TrainConfig& cfg) {
  if (step < 0) throw ValueError("negative step");
  std::int64_t warm = cfg.warmup_epochs * steps_per_epoch;
  std::int64_t total = cfg.total_epochs * steps_per_epoch;
  if (step < warm) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(warm);
  }
  double progress = total == warm
                        ? 1.0
                        : static_cast<double>(step - warm) /
                              static_cast<double>(total - warm);
  progress = std::min(progress, 1.0);
  return cfg.lr * 0.5 * (1.0 + std::cos(progress * M_PI));
}

// AdamW: bias-corrected first/second moments plus weight decay applied to
// the pre-step parameter value, outside the adaptive update.
template <class S>
class AdamW {
 public:
  AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::vector<std::pair<std::string, Tensor<S>>>& params,
            double lr) {
    if (slots_.empty()) {
      for (auto& [name, p] : params) {
        slots_.push_back({Mat<S>::Zero(p.value().rows(), p.value().cols()),
                          Mat<S>::Zero(p.value().rows(), p.value().cols())});
      }
    }
    if (slots_.size() != params.size()) {
      throw ShapeError("optimizer state covers " +
                       std::to_string(slots_.size()) + " tensors, got " +
                       std::to_string(params.size()));
    }
    ++t_;
    S c1 = static_cast<S>(1.0 - std::pow(b1_, static_cast<double>(t_)));
    S c2 = static_cast<S>(1.0 - std::pow(b2_, static_cast<double>(t_)));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<S>& p = params[i].second;
      const Mat<S>& g = p.grad();
      if (g.rows() != slots_[i].m.rows() || g.cols() != slots_[i].m.cols()) {
        throw ShapeError("gradient shape changed for '" + params[i].first +
                         "'");
      }
      Mat<S>& m = slots_[i].m;
      Mat<S>& v = slots_[i].v;
      m = static_cast<S>(b1_) * m + static_cast<S>(1.0 - b1_) * g;
      v.array() = static_cast<S>(b2_) * v.array() +
                  static_cast<S>(1.0 - b2_) * g.array().square();
      Mat<S> update =
          static_cast<S>(lr) *
          ((m.array() / c1) / ((v.array() / c2).sqrt() + static_cast<S>(eps_)))
              .matrix();
      update += static_cast<S>(lr * wd_) * p.value();
      p.raw_value() -= update;
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  struct Slot {
    Mat<S> m, v;
  };
  double wd_, b1_, b2_, eps_;
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
};

// Scales all gradients so their global L2 norm is at most `clip`. Returns
// the pre-clip norm.
template <class S>
double clip_gradients(std::vector<std::pair<std::string, Tensor<S>>>& params,
                      double clip) {
  double sq = 0.0;
  for (auto& [name, p] : params) {
    sq += static_cast<double>(p.grad().squaredNorm());
  }
  double norm = std::sqrt(sq);
  if (clip > 0 && norm > clip) {
    S f = static_cast<S>(clip / norm);
    for (auto& [name, p] : params) p.raw_grad() *= f;
  }
  return norm;
}

// Sigmoid scores over a dataset in eval mode. Flat models emit leaf columns
// only; the full model emits every node.
template <class S>
PredictionDump predict_scores(MapleModel<S>& model, const Dataset& ds,
                              int batch_size = 32) {
  PredictionDump dump;
  if (model.config().mode == ModelMode::flat) {
    dump.node_ids = model.hierarchy().leaf_ids();
  } else {
    dump.node_ids.resize(static_cast<size_t>(model.hierarchy().size()));
    for (size_t i = 0; i < dump.node_ids.size(); ++i) {
      dump.node_ids[i] = static_cast<int>(i);
    }
  }
  dump.scores.resize(static_cast<Eigen::Index>(ds.samples.size()),
                     static_cast<Eigen::Index>(dump.node_ids.size()));
  Rng rng(0);  // dropout is off in eval mode; never drawn from
  Eigen::Index row = 0;
  for (size_t at = 0; at < ds.samples.size(); at += static_cast<size_t>(batch_size)) {
    std::vector<int> idx;
    for (size_t i = at;
         i < std::min(ds.samples.size(), at + static_cast<size_t>(batch_size));
         ++i) {
      idx.push_back(static_cast<int>(i));
      dump.sample_ids.push_back(ds.samples[i].id);
    }
    Tensor<S> images = batch_images<S>(ds, idx);
    ModelOutput<S> out = model.forward(images, false, rng);
    const Mat<S>& logits = out.logits.value();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        double x = static_cast<double>(logits(r, c));
        dump.scores(row + r, c) = 0.5 * (1.0 + std::tanh(0.5 * x));
      }
    }
    row += logits.rows();
  }
  return dump;
}

template <class S>
double leaf_auprc_of(MapleModel<S>& model, const Dataset& ds) {
  PredictionDump dump = predict_scores(model, ds);
  std::vector<LabelVector> truth;
  for (const Sample& s : ds.samples) truth.push_back(s.labels);
  return per_level_report(dump, truth, model.hierarchy()).leaf_auprc;
}

struct TrainResult {
  Checkpoint best;
  int best_epoch = -1;
  double best_val = -1.0;
  double final_train_loss = 0.0;
  bool diverged = false;
  std::vector<nlohmann::json> log;
};

// Runs the full loop and returns the best-validation checkpoint (the
// initial state when no epoch ever completes). If the loss turns non-finite
// the run aborts and reports the last good checkpoint. `log_path`, when
// nonempty, receives one JSON object per epoch.
template <class S>
TrainResult train_model(const LabelHierarchy& h, const Dataset& train_ds,
                        const Dataset& val_ds, const TrainConfig& cfg,
                        EmbeddingProvider* provider,
                        const std::string& log_path = "") {
  cfg.validate();
  if (train_ds.samples.empty()) throw ValueError("empty training set");
  MapleModel<S> model = MapleModel<S>::build(h, cfg.model, cfg.seed, provider);
  auto params = model.named_params();
  AdamW<S> opt(cfg.weight_decay);
  Rng shuffle_rng = seeded_stream(cfg.seed, 0x0bdc);
  Rng drop_rng = seeded_stream(cfg.seed, 0xd901);

  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) throw IoError("cannot write " + log_path);
  }

  TrainResult res;
  res.best = model.to_checkpoint();
  int n = static_cast<int>(train_ds.samples.size());
  std::int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::int64_t step = 0;
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.below(
                    static_cast<std::uint64_t>(i + 1)))]);
    }
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    double lr_now = 0.0;
    try {
      for (int at = 0; at < n; at += cfg.batch_size) {
        std::vector<int> idx(order.begin() + at,
                             order.begin() + std::min(n, at + cfg.batch_size));
        for (int i : idx) {
          if (!h.is_consistent(train_ds.samples[static_cast<size_t>(i)].labels)) {
            throw ValidationError("sample '" +
                                  train_ds.samples[static_cast<size_t>(i)].id +
                                  "' labels violate the hierarchy");
          }
        }
        Tensor<S> images = batch_images<S>(train_ds, idx);
        Mat<S> targets = batch_targets<S>(train_ds, idx, h.size());
        lr_now = lr_schedule(step, steps_per_epoch, cfg);
        ModelOutput<S> out = model.forward(images, true, drop_rng);
        Tensor<S> loss = model.loss(out, targets);
        loss_sum += static_cast<double>(loss.scalar());
        ++batches;
        for (auto& [name, p] : params) p.zero_grad();
        loss.backward();
        clip_gradients(params, cfg.clip_norm);
        opt.step(params, lr_now);
        ++step;
      }
    } catch (const NumericError&) {
      res.diverged = true;
      nlohmann::json entry = {{"epoch", epoch}, {"event", "diverged"}};
      res.log.push_back(entry);
      if (log_file) log_file << entry.dump() << "\n";
      break;
    }

    res.final_train_loss = loss_sum / static_cast<double>(batches);
    double val = val_ds.samples.empty() ? 0.0 : leaf_auprc_of(model, val_ds);
    nlohmann::json entry = {{"epoch", epoch},
                            {"lr", lr_now},
                            {"train_loss", res.final_train_loss},
                            {"val_auprc", val}};
    res.log.push_back(entry);
    if (log_file) log_file << entry.dump() << "\n";

    if (val_ds.samples.empty()) {
      res.best = model.to_checkpoint();  // no signal to select on; keep last
      res.best_epoch = epoch;
    } else if (val > res.best_val) {
      res.best_val = val;
      res.best_epoch = epoch;
      res.best = model.to_checkpoint();
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  return res;
}

struct FewshotCell {
  double mean = 0.0;
  double stdev = 0.0;
  std::vector<double> values;
};

struct FewshotTable {
  std::vector<int> ks;
  // method name -> K -> cell; methods in presentation order
  std::vector<std::string> methods;
  std::map<std::string, std::map<int, FewshotCell>> cells;

  std::string csv() const;
  std::string long_csv() const;
};

inline std::string FewshotTable::csv() const {
  std::string out = "Method";
  for (int k : ks) out += ",K=" + std::to_string(k);
  out += "\n";
  char buf[64];
  for (const std::string& m : methods) {
    out += m;
    for (int k : ks) {
      const FewshotCell& c = cells.at(m).at(k);
      std::snprintf(buf, sizeof(buf), ",%.4f±%.4f", c.mean, c.stdev);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline std::string FewshotTable::long_csv() const {
  std::string out = "method,k,run,leaf_auprc\n";
  char buf[96];
  for (const std::string& m : methods) {
    for (int k : ks) {
      const FewshotCell& c = cells.at(m).at(k);
      for (size_t r = 0; r < c.values.size(); ++r) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%zu,%.6f\n", m.c_str(), k, r,
                      c.values[r]);
        out += buf;
      }
    }
  }
  return out;
}

// Trains the flat baseline and the full model on K-shot subsets of `train`
// for each K, `repeats` times with distinct seeds, and reports test-set leaf
// AU-PRC as mean ± sample standard deviation.
template <class S>
FewshotTable fewshot(const LabelHierarchy& h, const Dataset& train_ds,
                     const Dataset& val_ds, const Dataset& test_ds,
                     const TrainConfig& base, EmbeddingProvider* provider,
                     const std::vector<int>& ks, int repeats) {
  if (repeats < 1) throw ValueError("repeats must be >= 1");
  if (ks.empty()) throw ValueError("no K values given");
  std::vector<LabelVector> test_truth;
  for (const Sample& s : test_ds.samples) test_truth.push_back(s.labels);

  FewshotTable table;
  table.ks = ks;
  table.methods = {"MLC", "MAPLE"};
  for (const std::string& method : table.methods) {
    TrainConfig cfg = base;
    cfg.model.mode = method == "MAPLE" ? ModelMode::maple : ModelMode::flat;
    for (int k : ks) {
      FewshotCell cell;
      for (int r = 0; r < repeats; ++r) {
        std::uint64_t run_seed = base.seed + static_cast<std::uint64_t>(r);
        Dataset shot = kshot_sample(train_ds, h, k, run_seed);
        TrainConfig run_cfg = cfg;
        run_cfg.seed = run_seed;
        TrainResult res =
            train_model<S>(h, shot, val_ds, run_cfg, provider);
        MapleModel<S> best = MapleModel<S>::from_checkpoint(h, res.best);
        PredictionDump dump = predict_scores(best, test_ds);
        cell.values.push_back(
            per_level_report(dump, test_truth, h).leaf_auprc);
      }
      double sum = 0.0;
      for (double v : cell.values) sum += v;
      cell.mean = sum / static_cast<double>(cell.values.size());
      double sq = 0.0;
      for (double v : cell.values) sq += (v - cell.mean) * (v - cell.mean);
      cell.stdev = cell.values.size() > 1
                       ? std::sqrt(sq / static_cast<double>(cell.values.size() - 1))
                       : 0.0;
      table.cells[method][k] = cell;
    }
  }
  return table;
}

}  // namespace maple
