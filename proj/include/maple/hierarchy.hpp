#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace maple {

// 0/1 membership over all nodes of a hierarchy, indexed by node id.
using LabelVector = std::vector<std::uint8_t>;

struct LabelNode {
  int id = -1;
  std::string name;
  int level = 0;  // 1-based; level 1 nodes hang off the implicit root
  std::vector<int> parent_ids;  // ascending; empty exactly at level 1
  std::vector<int> child_ids;   // ascending
  bool is_leaf() const { return child_ids.empty(); }
};

// A label taxonomy: a layered DAG in which every edge spans exactly one
// level, nodes may have several parents, and leaves may sit at any depth.
// The root is implicit and never materialized. Node ids are assigned
// level-major in document order, so each level occupies a contiguous id
// range.
class LabelHierarchy {
 public:
  // Both throw ValidationError with the offending node named in the message.
  static LabelHierarchy from_yaml_file(const std::string& path);
  static LabelHierarchy from_yaml(const std::string& text);

  int size() const { return static_cast<int>(nodes_.size()); }
  int num_levels() const { return num_levels_; }
  const LabelNode& node(int id) const;
  const std::vector<LabelNode>& nodes() const { return nodes_; }
  bool has(const std::string& name) const;
  int id_of(const std::string& name) const;  // throws on unknown name
  const std::vector<int>& leaf_ids() const { return leaf_ids_; }
  // Node ids of one level, ascending. Levels are 1-based.
  const std::vector<int>& level_ids(int level) const;
  // (parent, child) pairs ordered by (parent, child).
  const std::vector<std::pair<int, int>>& edges() const { return edges_; }

  // All strict ancestors of a node, ascending by id.
  std::vector<int> ancestors(int id) const;

  // ANY-parent semantics: every positive node above level 1 needs at least
  // one positive parent. Level-1 positives are always consistent.
  bool is_consistent(const LabelVector& y) const;

  // Positives plus all their ancestors. close_upward(y) is always consistent.
  LabelVector close_upward(const LabelVector& y) const;

  // Natural-language description of a node from its local neighborhood:
  //   The category '<name>' which is a subcategory of <parents> and includes
  //   subcategories like <up to six children>
  // The subcategory clause is dropped for leaves (then the sentence ends with
  // a period); level-1 nodes name "the root taxonomy" as their parent.
  std::string contextual_description(int id) const;

  // Round-trips through from_yaml to an identical hierarchy.
  std::string to_yaml() const;

  // Fingerprint of the canonical serialization; stored in checkpoint
  // sidecars so a checkpoint can refuse a mismatched taxonomy.
  std::string digest() const;

 private:
  struct RawNode {
    std::string name;
    int level = 0;
    std::vector<std::string> parents;
  };
  static LabelHierarchy build(int levels, std::vector<RawNode> raw);

  std::vector<LabelNode> nodes_;
  std::vector<std::vector<int>> by_level_;  // [level-1] -> ids
  std::vector<int> leaf_ids_;
  std::vector<std::pair<int, int>> edges_;
  int num_levels_ = 0;
};

}  // namespace maple
