#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "piip/config.hpp"

namespace piip {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double lr = 0.5;
  double momentum = 0.9;
  std::uint64_t seed = 7;
  int train_size = 512;
  int test_size = 128;
};

struct IoConfig {
  std::string checkpoint;   // optional output path
  std::string metrics_csv;  // optional metrics path
};

struct RunConfig {
  PiipConfig model;
  TrainConfig train;
  IoConfig io;
};

namespace detail_cfgio {

using json = nlohmann::ordered_json;

inline void check_keys(const json& obj, const std::vector<std::string>& allowed,
                       const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const auto& k : allowed) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
  }
}

inline std::string attention_str(AttentionType a) {
  return a == AttentionType::kDeformable ? "deformable" : "regular";
}
inline AttentionType attention_from(const std::string& s) {
  if (s == "deformable") return AttentionType::kDeformable;
  if (s == "regular") return AttentionType::kRegular;
  throw ConfigError("config: unknown attention type '" + s + "'");
}

inline std::string direction_str(Direction d) {
  switch (d) {
    case Direction::kAdjacentBidirectional: return "adjacent_bidirectional";
    case Direction::kAdjacentDownOnly: return "adjacent_down_only";
    case Direction::kAdjacentUpOnly: return "adjacent_up_only";
    case Direction::kChainOneWay: return "chain_one_way";
    case Direction::kAllPairsBidirectional: return "all_pairs_bidirectional";
  }
  return "adjacent_bidirectional";
}
inline Direction direction_from(const std::string& s) {
  if (s == "adjacent_bidirectional") return Direction::kAdjacentBidirectional;
  if (s == "adjacent_down_only") return Direction::kAdjacentDownOnly;
  if (s == "adjacent_up_only") return Direction::kAdjacentUpOnly;
  if (s == "chain_one_way") return Direction::kChainOneWay;
  if (s == "all_pairs_bidirectional") return Direction::kAllPairsBidirectional;
  throw ConfigError("config: unknown interaction direction '" + s + "'");
}

inline std::string mode_str(RunMode m) {
  switch (m) {
    case RunMode::kDense: return "dense";
    case RunMode::kClassifyPretrain: return "classify_pretrain";
    case RunMode::kClassifyFinetune: return "classify_finetune";
  }
  return "dense";
}
inline RunMode mode_from(const std::string& s) {
  if (s == "dense") return RunMode::kDense;
  if (s == "classify_pretrain") return RunMode::kClassifyPretrain;
  if (s == "classify_finetune") return RunMode::kClassifyFinetune;
  throw ConfigError("config: unknown mode '" + s + "'");
}

template <typename V>
V get_or(const json& obj, const std::string& key, const V& fallback) {
  if (!obj.contains(key)) return fallback;
  return obj.at(key).get<V>();
}

inline json model_to_json(const PiipConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["branches"] = json::array();
  for (const auto& b : cfg.branches) {
    json bj;
    bj["depth"] = b.depth;
    bj["dim"] = b.dim;
    bj["heads"] = b.heads;
    bj["patch"] = b.patch;
    bj["resolution"] = b.resolution;
    bj["mlp_ratio"] = b.mlp_ratio;
    bj["use_cls_token"] = b.use_cls_token;
    bj["attn_window"] = b.attn_window;
    j["branches"].push_back(bj);
  }
  json ij;
  ij["count"] = cfg.interactions.count;
  ij["attention"] = attention_str(cfg.interactions.attention);
  ij["direction"] = direction_str(cfg.interactions.direction);
  ij["sample_points"] = cfg.interactions.sample_points;
  ij["ffn_ratio"] = cfg.interactions.ffn_ratio;
  ij["value_ratio"] = cfg.interactions.value_ratio;
  ij["scalar_gates"] = cfg.interactions.scalar_gates;
  j["interactions"] = ij;
  j["mode"] = mode_str(cfg.mode);
  j["merge_subset"] = cfg.merge_subset;
  j["num_classes"] = cfg.num_classes;
  j["ablation"] = cfg.ablation;
  return j;
}

inline PiipConfig model_from_json(const json& j) {
  check_keys(j, {"name", "branches", "interactions", "mode", "merge_subset",
                 "num_classes", "ablation"}, "model");
  PiipConfig cfg;
  cfg.name = get_or<std::string>(j, "name", "custom");
  if (!j.contains("branches") || !j.at("branches").is_array() || j.at("branches").empty())
    throw ConfigError("config: model.branches must be a non-empty array");
  for (const auto& bj : j.at("branches")) {
    check_keys(bj, {"depth", "dim", "heads", "patch", "resolution", "mlp_ratio",
                    "use_cls_token", "attn_window"}, "model.branches[]");
    BranchConfig b;
    b.depth = bj.at("depth").get<int>();
    b.dim = bj.at("dim").get<int>();
    b.heads = bj.at("heads").get<int>();
    b.patch = bj.at("patch").get<int>();
    b.resolution = bj.at("resolution").get<int>();
    b.mlp_ratio = get_or<double>(bj, "mlp_ratio", 4.0);
    b.use_cls_token = get_or<bool>(bj, "use_cls_token", false);
    b.attn_window = get_or<int>(bj, "attn_window", 0);
    cfg.branches.push_back(b);
  }
  if (j.contains("interactions")) {
    const json& ij = j.at("interactions");
    check_keys(ij, {"count", "attention", "direction", "sample_points", "ffn_ratio",
                    "value_ratio", "scalar_gates"}, "model.interactions");
    cfg.interactions.count = get_or<int>(ij, "count", 12);
    cfg.interactions.attention =
        attention_from(get_or<std::string>(ij, "attention", "deformable"));
    cfg.interactions.direction =
        direction_from(get_or<std::string>(ij, "direction", "adjacent_bidirectional"));
    cfg.interactions.sample_points = get_or<int>(ij, "sample_points", 4);
    cfg.interactions.ffn_ratio = get_or<double>(ij, "ffn_ratio", 0.25);
    cfg.interactions.value_ratio = get_or<double>(ij, "value_ratio", 0.5);
    cfg.interactions.scalar_gates = get_or<bool>(ij, "scalar_gates", false);
  }
  cfg.mode = mode_from(get_or<std::string>(j, "mode", "dense"));
  cfg.merge_subset = get_or<std::vector<bool>>(j, "merge_subset", {});
  if (cfg.merge_subset.empty() && cfg.mode != RunMode::kClassifyFinetune)
    cfg.merge_subset.assign(cfg.branches.size(), true);
  cfg.num_classes = get_or<int>(j, "num_classes", 1000);
  cfg.ablation = get_or<bool>(j, "ablation", false);
  validate(cfg);
  return cfg;
}

}  // namespace detail_cfgio

// Canonical text form: fixed key order and indentation, so serialization is a
// fixed point (serialize(parse(serialize(x))) == serialize(x)).
inline std::string serialize_config(const RunConfig& rc) {
  using detail_cfgio::json;
  json j;
  j["model"] = detail_cfgio::model_to_json(rc.model);
  json tj;
  tj["epochs"] = rc.train.epochs;
  tj["batch_size"] = rc.train.batch_size;
  tj["lr"] = rc.train.lr;
  tj["momentum"] = rc.train.momentum;
  tj["seed"] = rc.train.seed;
  tj["train_size"] = rc.train.train_size;
  tj["test_size"] = rc.train.test_size;
  j["train"] = tj;
  json ioj;
  ioj["checkpoint"] = rc.io.checkpoint;
  ioj["metrics_csv"] = rc.io.metrics_csv;
  j["io"] = ioj;
  return j.dump(2) + "\n";
}

inline RunConfig parse_config(const std::string& text) {
  using detail_cfgio::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: parse error: ") + e.what());
  }
  detail_cfgio::check_keys(j, {"model", "train", "io"}, "top level");
  if (!j.contains("model")) throw ConfigError("config: missing 'model' section");
  RunConfig rc;
  rc.model = detail_cfgio::model_from_json(j.at("model"));
  if (j.contains("train")) {
    const json& tj = j.at("train");
    detail_cfgio::check_keys(tj, {"epochs", "batch_size", "lr", "momentum", "seed",
                                  "train_size", "test_size"}, "train");
    rc.train.epochs = detail_cfgio::get_or<int>(tj, "epochs", rc.train.epochs);
    rc.train.batch_size = detail_cfgio::get_or<int>(tj, "batch_size", rc.train.batch_size);
    rc.train.lr = detail_cfgio::get_or<double>(tj, "lr", rc.train.lr);
    rc.train.momentum = detail_cfgio::get_or<double>(tj, "momentum", rc.train.momentum);
    rc.train.seed = detail_cfgio::get_or<std::uint64_t>(tj, "seed", rc.train.seed);
    rc.train.train_size = detail_cfgio::get_or<int>(tj, "train_size", rc.train.train_size);
    rc.train.test_size = detail_cfgio::get_or<int>(tj, "test_size", rc.train.test_size);
    if (rc.train.epochs <= 0 || rc.train.batch_size <= 0 || rc.train.train_size <= 0 ||
        rc.train.test_size <= 0)
      throw ConfigError("config: train sizes must be positive");
  }
  if (j.contains("io")) {
    const json& ioj = j.at("io");
    detail_cfgio::check_keys(ioj, {"checkpoint", "metrics_csv"}, "io");
    rc.io.checkpoint = detail_cfgio::get_or<std::string>(ioj, "checkpoint", "");
    rc.io.metrics_csv = detail_cfgio::get_or<std::string>(ioj, "metrics_csv", "");
  }
  return rc;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Serialization of the model section alone; used for deterministic ranking
// keys and checkpoint snapshots.
inline std::string serialize_model_config(const PiipConfig& cfg) {
  return detail_cfgio::model_to_json(cfg).dump(2) + "\n";
}

inline PiipConfig parse_model_config(const std::string& text) {
  using detail_cfgio::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: parse error: ") + e.what());
  }
  return detail_cfgio::model_from_json(j);
}

}  // namespace piip
