#include "maple/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "maple/errors.hpp"

namespace maple {

PrCurve micro_pr(const std::vector<double>& scores,
                 const std::vector<std::uint8_t>& truth) {
  if (scores.size() != truth.size()) {
    throw ValueError("micro_pr got " + std::to_string(scores.size()) +
                     " scores for " + std::to_string(truth.size()) +
                     " truth values");
  }
  std::int64_t positives =
      std::accumulate(truth.begin(), truth.end(), std::int64_t(0));
  if (positives == 0) {
    throw ValueError("micro_pr needs at least one positive instance");
  }
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scores[a] > scores[b];
  });

  PrCurve curve;
  curve.positives = positives;
  curve.total = static_cast<std::int64_t>(scores.size());
  std::int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    // Identical scores form one threshold group: the curve point appears
    // only after the whole group is counted.
    double s = scores[order[i]];
    size_t j = i;
    while (j < order.size() && scores[order[j]] == s) {
      if (truth[order[j]]) {
        ++tp;
      } else {
        ++fp;
      }
      ++j;
    }
    PrPoint p;
    p.recall = static_cast<double>(tp) / static_cast<double>(positives);
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    curve.points.push_back(p);
    i = j;
  }
  return curve;
}

double auprc(const PrCurve& curve) {
  if (curve.points.empty()) {
    throw ValueError("auprc of an empty curve");
  }
  double area = 0.0, prev_recall = 0.0;
  for (const PrPoint& p : curve.points) {
    area += (p.recall - prev_recall) * p.precision;
    prev_recall = p.recall;
  }
  return area;
}

PrCurve micro_pr_cols(const PredictionDump& dump,
                      const std::vector<LabelVector>& truth,
                      const std::vector<int>& cols) {
  if (static_cast<Eigen::Index>(truth.size()) != dump.scores.rows()) {
    throw ValueError("dump has " + std::to_string(dump.scores.rows()) +
                     " rows for " + std::to_string(truth.size()) +
                     " truth vectors");
  }
  std::vector<double> s;
  std::vector<std::uint8_t> t;
  s.reserve(truth.size() * cols.size());
  t.reserve(truth.size() * cols.size());
  for (Eigen::Index r = 0; r < dump.scores.rows(); ++r) {
    for (int c : cols) {
      int node = dump.node_ids[static_cast<size_t>(c)];
      s.push_back(dump.scores(r, c));
      t.push_back(truth[static_cast<size_t>(r)][static_cast<size_t>(node)]);
    }
  }
  return micro_pr(s, t);
}

namespace {

// Column index per node id, or -1 when the dump lacks that node.
std::vector<int> column_of(const PredictionDump& dump,
                           const LabelHierarchy& h) {
  if (dump.node_ids.size() !=
      static_cast<size_t>(dump.scores.cols())) {
    throw ValueError("dump names " + std::to_string(dump.node_ids.size()) +
                     " nodes for " + std::to_string(dump.scores.cols()) +
                     " score columns");
  }
  std::vector<int> col(static_cast<size_t>(h.size()), -1);
  for (size_t j = 0; j < dump.node_ids.size(); ++j) {
    int node = dump.node_ids[j];
    if (node < 0 || node >= static_cast<int>(h.size())) {
      throw ValueError("dump references unknown node id " +
                       std::to_string(node));
    }
    if (col[static_cast<size_t>(node)] != -1) {
      throw ValueError("dump lists node '" + h.node(node).name + "' twice");
    }
    col[static_cast<size_t>(node)] = static_cast<int>(j);
  }
  return col;
}

}  // namespace

EvalReport per_level_report(const PredictionDump& dump,
                            const std::vector<LabelVector>& truth,
                            const LabelHierarchy& h) {
  std::vector<int> col = column_of(dump, h);
  bool full = true;
  for (int c : col) full = full && c != -1;
  bool leaf_only = !full;
  if (leaf_only) {
    // The only partial dump shape we accept is the flat baseline's: exactly
    // the leaves.
    std::set<int> have;
    for (int n : dump.node_ids) have.insert(n);
    std::set<int> leaves(h.leaf_ids().begin(), h.leaf_ids().end());
    if (have != leaves) {
      throw ValueError("dump covers neither all nodes nor exactly the leaves");
    }
  }

  EvalReport rep;
  rep.num_samples = dump.scores.rows();
  if (!leaf_only) {
    for (int lv = 1; lv <= h.num_levels(); ++lv) {
      std::vector<int> cols;
      for (int node : h.level_ids(lv)) {
        cols.push_back(col[static_cast<size_t>(node)]);
      }
      rep.per_level_auprc[lv] = auprc(micro_pr_cols(dump, truth, cols));
    }
  }
  std::vector<int> leaf_cols;
  for (int node : h.leaf_ids()) {
    leaf_cols.push_back(col[static_cast<size_t>(node)]);
  }
  rep.leaf_auprc = auprc(micro_pr_cols(dump, truth, leaf_cols));
  return rep;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["per_level_auprc"] = nlohmann::json::object();
  for (const auto& [lv, v] : per_level_auprc) {
    j["per_level_auprc"]["l" + std::to_string(lv)] = v;
  }
  j["leaf_auprc"] = leaf_auprc;
  j["num_samples"] = num_samples;
  j["seed"] = seed;
  j["config_digest"] = config_digest;
  return j;
}

namespace {

void count_confusions(const PredictionDump& dump,
                      const std::vector<LabelVector>& truth,
                      const LabelHierarchy& h, double threshold,
                      const std::vector<int>& col,
                      std::map<std::pair<int, int>, std::int64_t>& counts,
                      std::int64_t& total) {
  for (Eigen::Index r = 0; r < dump.scores.rows(); ++r) {
    const LabelVector& t = truth[static_cast<size_t>(r)];
    for (int j : h.leaf_ids()) {
      int cj = col[static_cast<size_t>(j)];
      if (t[static_cast<size_t>(j)] || dump.scores(r, cj) < threshold) {
        continue;
      }
      // Leaf j is a false positive call; attribute it to every true leaf.
      for (int i : h.leaf_ids()) {
        if (i == j || !t[static_cast<size_t>(i)]) continue;
        ++counts[{i, j}];
        ++total;
      }
    }
  }
}

}  // namespace

ConfusionDelta confusion_delta(const PredictionDump& a,
                               const PredictionDump& b,
                               const std::vector<LabelVector>& truth,
                               const LabelHierarchy& h, double threshold) {
  if (a.sample_ids != b.sample_ids) {
    throw ValueError("confusion_delta needs dumps over the same samples");
  }
  if (a.scores.rows() != static_cast<Eigen::Index>(truth.size())) {
    throw ValueError("dump has " + std::to_string(a.scores.rows()) +
                     " rows for " + std::to_string(truth.size()) +
                     " truth vectors");
  }
  std::vector<int> col_a = column_of(a, h);
  std::vector<int> col_b = column_of(b, h);
  for (int leaf : h.leaf_ids()) {
    if (col_a[static_cast<size_t>(leaf)] == -1 ||
        col_b[static_cast<size_t>(leaf)] == -1) {
      throw ValueError("both dumps must score every leaf");
    }
  }
  ConfusionDelta d;
  count_confusions(a, truth, h, threshold, col_a, d.count_a, d.total_a);
  count_confusions(b, truth, h, threshold, col_b, d.count_b, d.total_b);
  std::set<std::pair<int, int>> keys;
  for (const auto& [k, v] : d.count_a) keys.insert(k);
  for (const auto& [k, v] : d.count_b) keys.insert(k);
  for (const auto& k : keys) {
    std::int64_t ca = d.count_a.count(k) ? d.count_a.at(k) : 0;
    std::int64_t cb = d.count_b.count(k) ? d.count_b.at(k) : 0;
    d.delta[k] = cb - ca;
  }
  return d;
}

nlohmann::json ConfusionDelta::to_json(const LabelHierarchy& h) const {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& [k, v] : delta) {
    std::int64_t ca = count_a.count(k) ? count_a.at(k) : 0;
    std::int64_t cb = count_b.count(k) ? count_b.at(k) : 0;
    cells.push_back({{"true", h.node(k.first).name},
                     {"predicted", h.node(k.second).name},
                     {"count_a", ca},
                     {"count_b", cb},
                     {"delta", v}});
  }
  return {{"cells", cells},
          {"total_a", total_a},
          {"total_b", total_b},
          {"total_reduction", total_reduction()}};
}

std::string param_component(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (name == "w_psi") return "w_psi";
  if (name == "class_tokens") return "tokens";
  if (starts("encoder.")) return "encoder";
  if (starts("gnn")) return "gnn";
  if (starts("gate.")) return "gate";
  if (starts("head.") || starts("flat_head.")) return "head";
  throw ValueError("parameter '" + name + "' belongs to no known component");
}

ParamAccount param_account(
    const std::vector<std::pair<std::string, std::int64_t>>& maple_params,
    const std::vector<std::pair<std::string, std::int64_t>>& flat_params) {
  ParamAccount acc;
  std::int64_t flat_encoder = 0;
  for (const auto& [name, count] : maple_params) {
    acc.components[param_component(name)] += count;
    acc.total += count;
  }
  for (const auto& [name, count] : flat_params) {
    if (param_component(name) == "encoder") flat_encoder += count;
    acc.flat_total += count;
  }
  std::int64_t maple_encoder =
      acc.components.count("encoder") ? acc.components.at("encoder") : 0;
  if (maple_encoder != flat_encoder) {
    throw ValueError("encoder sizes differ between the two models (" +
                     std::to_string(maple_encoder) + " vs " +
                     std::to_string(flat_encoder) + ")");
  }
  if (acc.flat_total == 0) {
    throw ValueError("flat model reports no parameters");
  }
  acc.overhead = static_cast<double>(acc.total - acc.flat_total) /
                 static_cast<double>(acc.flat_total);
  return acc;
}

nlohmann::json ParamAccount::to_json() const {
  nlohmann::json j;
  j["components"] = components;
  j["total"] = total;
  j["flat_total"] = flat_total;
  j["overhead"] = overhead;
  return j;
}

}  // namespace maple
