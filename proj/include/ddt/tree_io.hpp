#pragma once

#include <nlohmann/json.hpp>

#include <string>

#include "ddt/soft_tree.hpp"

namespace ddt {

/// Serialized layout:
///   {"version": 1, "topology": {"kind": "balanced"|"rule_list", "size": n},
///    "d": d, "num_actions": |A|, "interpretation": "policy"|"q",
///    "root": "n0",
///    "nodes": [{"id": "n0", "alpha": .., "beta": [..], "phi": .., "left": "n1", "right": "l0"}, ...],
///    "leaves": [{"id": "l0", "w": [..]}, ...]}
/// Node ids are "n<i>", leaf ids "l<j>". Doubles round-trip bit-exactly.
inline constexpr int kTreeFormatVersion = 1;

nlohmann::json tree_to_json(const SoftTreed& tree);
SoftTreed tree_from_json(const nlohmann::json& doc);

std::string to_string(Interpretation interp);
Interpretation interpretation_from_string(const std::string& s);

std::string ref_id(ChildRef ref);
ChildRef parse_ref_id(const std::string& id);

}  // namespace ddt
