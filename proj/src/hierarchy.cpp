#include "maple/hierarchy.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "maple/digest.hpp"
#include "maple/errors.hpp"

namespace maple {

namespace {

std::string join_comma(const std::vector<std::string>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += ", ";
    out += parts[i];
  }
  return out;
}

// "a" / "a and b" / "a, b, and c" (serial comma, as the taxonomy prompts
// are phrased).
std::string join_with_and(const std::vector<std::string>& parts) {
  if (parts.empty()) return "";
  if (parts.size() == 1) return parts[0];
  if (parts.size() == 2) return parts[0] + " and " + parts[1];
  std::string out;
  for (size_t i = 0; i + 1 < parts.size(); ++i) out += parts[i] + ", ";
  out += "and " + parts.back();
  return out;
}

}  // namespace

LabelHierarchy LabelHierarchy::from_yaml_file(const std::string& path) {
  YAML::Node doc;
  try {
    doc = YAML::LoadFile(path);
  } catch (const YAML::Exception& e) {
    throw ValidationError("cannot parse hierarchy file '" + path +
                          "': " + e.what());
  }
  if (!doc.IsMap()) {
    throw ValidationError("hierarchy file '" + path +
                          "' must be a YAML mapping");
  }
  std::stringstream ss;
  ss << doc;
  return from_yaml(ss.str());
}

LabelHierarchy LabelHierarchy::from_yaml(const std::string& text) {
  YAML::Node doc;
  try {
    doc = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ValidationError(std::string("cannot parse hierarchy YAML: ") +
                          e.what());
  }
  if (!doc.IsMap() || !doc["levels"] || !doc["nodes"]) {
    throw ValidationError(
        "hierarchy YAML needs top-level 'levels' and 'nodes' keys");
  }
  int levels = 0;
  try {
    levels = doc["levels"].as<int>();
  } catch (const YAML::Exception&) {
    throw ValidationError("'levels' must be an integer");
  }
  if (!doc["nodes"].IsSequence()) {
    throw ValidationError("'nodes' must be a sequence");
  }
  std::vector<RawNode> raw;
  raw.reserve(doc["nodes"].size());
  for (const auto& item : doc["nodes"]) {
    if (!item.IsMap() || !item["name"] || !item["level"]) {
      throw ValidationError("every node needs 'name' and 'level'");
    }
    RawNode rn;
    rn.name = item["name"].as<std::string>();
    try {
      rn.level = item["level"].as<int>();
    } catch (const YAML::Exception&) {
      throw ValidationError("node '" + rn.name +
                            "': 'level' must be an integer");
    }
    if (item["parents"]) {
      if (!item["parents"].IsSequence()) {
        throw ValidationError("node '" + rn.name +
                              "': 'parents' must be a sequence");
      }
      for (const auto& p : item["parents"]) {
        rn.parents.push_back(p.as<std::string>());
      }
    }
    raw.push_back(std::move(rn));
  }
  return build(levels, std::move(raw));
}

LabelHierarchy LabelHierarchy::build(int levels, std::vector<RawNode> raw) {
  if (levels < 1) throw ValidationError("'levels' must be at least 1");
  if (raw.empty()) throw ValidationError("hierarchy has no nodes");

  for (const auto& rn : raw) {
    if (rn.name.empty()) throw ValidationError("node with empty name");
    if (rn.level < 1 || rn.level > levels) {
      throw ValidationError("node '" + rn.name + "': level " +
                            std::to_string(rn.level) + " outside 1.." +
                            std::to_string(levels));
    }
  }

  // Level-major id assignment, document order within a level. A stable sort
  // keeps the file's order as the tiebreak.
  std::vector<size_t> order(raw.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return raw[a].level < raw[b].level;
  });

  LabelHierarchy h;
  h.num_levels_ = levels;
  h.nodes_.resize(raw.size());
  h.by_level_.assign(static_cast<size_t>(levels), {});

  std::unordered_map<std::string, int> id_by_name;
  for (size_t pos = 0; pos < order.size(); ++pos) {
    const RawNode& rn = raw[order[pos]];
    if (id_by_name.count(rn.name)) {
      throw ValidationError("duplicate node name '" + rn.name + "'");
    }
    int id = static_cast<int>(pos);
    id_by_name[rn.name] = id;
    h.nodes_[pos].id = id;
    h.nodes_[pos].name = rn.name;
    h.nodes_[pos].level = rn.level;
    h.by_level_[static_cast<size_t>(rn.level - 1)].push_back(id);
  }

  for (int lv = 1; lv <= levels; ++lv) {
    if (h.by_level_[static_cast<size_t>(lv - 1)].empty()) {
      throw ValidationError("level " + std::to_string(lv) +
                            " has no nodes (declared levels: " +
                            std::to_string(levels) + ")");
    }
  }

  for (size_t pos = 0; pos < order.size(); ++pos) {
    const RawNode& rn = raw[order[pos]];
    LabelNode& n = h.nodes_[pos];
    if (n.level == 1) {
      if (!rn.parents.empty()) {
        throw ValidationError("node '" + n.name +
                              "': level-1 nodes cannot list parents");
      }
      continue;
    }
    if (rn.parents.empty()) {
      throw ValidationError("node '" + n.name +
                            "': unreachable, no parents listed");
    }
    std::unordered_set<int> seen;
    for (const auto& pname : rn.parents) {
      auto it = id_by_name.find(pname);
      if (it == id_by_name.end()) {
        throw ValidationError("node '" + n.name + "': unknown parent '" +
                              pname + "'");
      }
      const LabelNode& p = h.nodes_[static_cast<size_t>(it->second)];
      if (p.level != n.level - 1) {
        throw ValidationError("node '" + n.name + "' (level " +
                              std::to_string(n.level) + "): parent '" + pname +
                              "' is at level " + std::to_string(p.level) +
                              ", expected " + std::to_string(n.level - 1));
      }
      if (!seen.insert(p.id).second) {
        throw ValidationError("node '" + n.name + "': duplicate parent '" +
                              pname + "'");
      }
      n.parent_ids.push_back(p.id);
    }
    std::sort(n.parent_ids.begin(), n.parent_ids.end());
  }

  // Children mirror the parent lists. Edges spanning exactly one level make
  // the DAG acyclic by construction, so no separate cycle check is needed.
  for (const LabelNode& n : h.nodes_) {
    for (int pid : n.parent_ids) {
      h.nodes_[static_cast<size_t>(pid)].child_ids.push_back(n.id);
      h.edges_.emplace_back(pid, n.id);
    }
  }
  for (LabelNode& n : h.nodes_) {
    std::sort(n.child_ids.begin(), n.child_ids.end());
    if (n.child_ids.empty()) h.leaf_ids_.push_back(n.id);
  }
  std::sort(h.edges_.begin(), h.edges_.end());
  return h;
}

const LabelNode& LabelHierarchy::node(int id) const {
  if (id < 0 || id >= size()) {
    throw ValueError("node id " + std::to_string(id) + " out of range");
  }
  return nodes_[static_cast<size_t>(id)];
}

bool LabelHierarchy::has(const std::string& name) const {
  for (const auto& n : nodes_) {
    if (n.name == name) return true;
  }
  return false;
}

int LabelHierarchy::id_of(const std::string& name) const {
  for (const auto& n : nodes_) {
    if (n.name == name) return n.id;
  }
  throw ValidationError("unknown node name '" + name + "'");
}

const std::vector<int>& LabelHierarchy::level_ids(int level) const {
  if (level < 1 || level > num_levels_) {
    throw ValueError("level " + std::to_string(level) + " out of range");
  }
  return by_level_[static_cast<size_t>(level - 1)];
}

std::vector<int> LabelHierarchy::ancestors(int id) const {
  std::vector<bool> mark(static_cast<size_t>(size()), false);
  std::vector<int> stack{node(id).parent_ids};
  std::vector<int> out;
  while (!stack.empty()) {
    int v = stack.back();
    stack.pop_back();
    if (mark[static_cast<size_t>(v)]) continue;
    mark[static_cast<size_t>(v)] = true;
    out.push_back(v);
    const auto& up = nodes_[static_cast<size_t>(v)].parent_ids;
    stack.insert(stack.end(), up.begin(), up.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool LabelHierarchy::is_consistent(const LabelVector& y) const {
  if (static_cast<int>(y.size()) != size()) {
    throw ValueError("label vector length " + std::to_string(y.size()) +
                     " does not match hierarchy size " +
                     std::to_string(size()));
  }
  for (const LabelNode& n : nodes_) {
    if (!y[static_cast<size_t>(n.id)] || n.level == 1) continue;
    bool ok = false;
    for (int pid : n.parent_ids) {
      if (y[static_cast<size_t>(pid)]) {
        ok = true;
        break;
      }
    }
    if (!ok) return false;
  }
  return true;
}

LabelVector LabelHierarchy::close_upward(const LabelVector& y) const {
  if (static_cast<int>(y.size()) != size()) {
    throw ValueError("label vector length " + std::to_string(y.size()) +
                     " does not match hierarchy size " +
                     std::to_string(size()));
  }
  LabelVector out = y;
  // Ids are level-major, so one descending sweep settles all ancestors.
  for (int id = size() - 1; id >= 0; --id) {
    if (!out[static_cast<size_t>(id)]) continue;
    for (int pid : nodes_[static_cast<size_t>(id)].parent_ids) {
      out[static_cast<size_t>(pid)] = 1;
    }
  }
  return out;
}

std::string LabelHierarchy::contextual_description(int id) const {
  const LabelNode& n = node(id);
  std::string parent_phrase;
  if (n.level == 1) {
    parent_phrase = "the root taxonomy";
  } else {
    std::vector<std::string> names;
    for (int pid : n.parent_ids) names.push_back(node(pid).name);
    parent_phrase = join_comma(names);
  }
  std::string out =
      "The category '" + n.name + "' which is a subcategory of " +
      parent_phrase;
  if (n.is_leaf()) {
    // Leaf sentences close with a period; with a subcategory listing the
    // phrasing ends on the list itself.
    return out + ".";
  }
  std::vector<std::string> kids;
  for (int cid : n.child_ids) {
    kids.push_back(node(cid).name);
    if (kids.size() == 6) break;
  }
  return out + " and includes subcategories like " + join_with_and(kids);
}

std::string LabelHierarchy::to_yaml() const {
  YAML::Emitter em;
  em << YAML::BeginMap;
  em << YAML::Key << "levels" << YAML::Value << num_levels_;
  em << YAML::Key << "nodes" << YAML::Value << YAML::BeginSeq;
  for (const LabelNode& n : nodes_) {
    em << YAML::BeginMap;
    em << YAML::Key << "name" << YAML::Value << n.name;
    em << YAML::Key << "level" << YAML::Value << n.level;
    if (!n.parent_ids.empty()) {
      em << YAML::Key << "parents" << YAML::Value << YAML::BeginSeq;
      for (int pid : n.parent_ids) em << node(pid).name;
      em << YAML::EndSeq;
    }
    em << YAML::EndMap;
  }
  em << YAML::EndSeq << YAML::EndMap;
  return std::string(em.c_str()) + "\n";
}

std::string LabelHierarchy::digest() const { return sha256_hex(to_yaml()); }

}  // namespace maple
