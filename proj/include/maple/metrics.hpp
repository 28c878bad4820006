#pragma once

// Ranking metrics over prediction dumps: micro-averaged precision/recall,
// area under the PR curve, per-level reports, confusion-pair deltas between
// two models, and parameter accounting.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "maple/hierarchy.hpp"

namespace maple {

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // one per tie group, high scores first
  std::int64_t positives = 0;
  std::int64_t total = 0;
};

// Scores for a set of samples over a subset of hierarchy nodes. Column j of
// `scores` belongs to node `node_ids[j]`.
struct PredictionDump {
  std::vector<std::string> sample_ids;
  std::vector<int> node_ids;
  Eigen::MatrixXd scores;
};

struct EvalReport {
  std::map<int, double> per_level_auprc;
  double leaf_auprc = 0.0;
  std::int64_t num_samples = 0;
  std::uint64_t seed = 0;
  std::string config_digest;

  nlohmann::json to_json() const;
};

struct ConfusionDelta {
  // key: (true leaf id, predicted-false leaf id)
  std::map<std::pair<int, int>, std::int64_t> count_a;
  std::map<std::pair<int, int>, std::int64_t> count_b;
  std::map<std::pair<int, int>, std::int64_t> delta;  // b - a
  std::int64_t total_a = 0;
  std::int64_t total_b = 0;

  std::int64_t total_reduction() const { return total_a - total_b; }
  nlohmann::json to_json(const LabelHierarchy& h) const;
};

// Pools every (sample,label) pair, sorts by score descending and emits one
// cumulative (recall, precision) point per distinct score value.
PrCurve micro_pr(const std::vector<double>& scores,
                 const std::vector<std::uint8_t>& truth);

// Average-precision step rule: sum of (R_k - R_{k-1}) * P_k with R_0 = 0.
double auprc(const PrCurve& curve);

// Curve restricted to a node subset; `cols` indexes into dump columns.
PrCurve micro_pr_cols(const PredictionDump& dump,
                      const std::vector<LabelVector>& truth,
                      const std::vector<int>& cols);

// Per-level AU-PRC plus the leaf slice. The dump must cover either every
// node or exactly the leaf set (the flat baseline emits leaf scores only);
// leaf-only dumps produce a leaf metric and no level rows.
EvalReport per_level_report(const PredictionDump& dump,
                            const std::vector<LabelVector>& truth,
                            const LabelHierarchy& h);

// Counts ordered (true leaf, predicted-false leaf) pairs per model at the
// given call threshold and tabulates the per-cell difference b - a.
ConfusionDelta confusion_delta(const PredictionDump& a,
                               const PredictionDump& b,
                               const std::vector<LabelVector>& truth,
                               const LabelHierarchy& h, double threshold = 0.5);

struct ParamAccount {
  std::map<std::string, std::int64_t> components;  // of the hierarchical model
  std::int64_t total = 0;
  std::int64_t flat_total = 0;
  double overhead = 0.0;  // (total - flat_total) / flat_total

  nlohmann::json to_json() const;
};

// Groups named parameter counts by component. Both lists come from a model's
// named tensors; encoder counts must agree between the two.
ParamAccount param_account(
    const std::vector<std::pair<std::string, std::int64_t>>& maple_params,
    const std::vector<std::pair<std::string, std::int64_t>>& flat_params);

// Maps a parameter name to its accounting component.
std::string param_component(const std::string& name);

}  // namespace maple
