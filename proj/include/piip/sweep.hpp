#pragma once

#include <algorithm>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "piip/configfile.hpp"
#include "piip/cost_model.hpp"

namespace piip {

struct SweepEntry {
  std::string config_id;
  PiipConfig cfg;
  std::uint64_t params_total = 0;
  std::uint64_t macs_total = 0;
  std::vector<std::uint64_t> macs_branch;
  std::uint64_t macs_interactions = 0;
  std::uint64_t macs_merge = 0;
};

struct SweepSpec {
  // per-branch tower shapes, branch 1 first; resolutions are swept
  std::vector<BranchConfig> towers;
  std::vector<int> resolution_menu;  // candidate values, ascending
  double budget_macs = 0;            // keep configs at or under this
  InteractionSpec interactions;
  RunMode mode = RunMode::kClassifyFinetune;
  int num_classes = 1000;
};

inline SweepSpec tsb_sweep_spec(double budget_macs) {
  SweepSpec spec;
  spec.towers = {vit_b(128), vit_s(192), vit_t(368)};
  for (auto& t : spec.towers) t.use_cls_token = true;
  for (int r = 96; r <= 448; r += 16) spec.resolution_menu.push_back(r);
  spec.budget_macs = budget_macs;
  spec.interactions.count = 12;
  return spec;
}

namespace detail_sweep {

inline void enumerate(const SweepSpec& spec, size_t branch, int min_res,
                      std::vector<int>& picked, std::vector<std::vector<int>>& out) {
  if (branch == spec.towers.size()) {
    out.push_back(picked);
    return;
  }
  for (int r : spec.resolution_menu) {
    if (r <= min_res) continue;
    if (r % spec.towers[branch].patch != 0) continue;
    picked.push_back(r);
    enumerate(spec, branch + 1, r, picked, out);
    picked.pop_back();
  }
}

inline PiipConfig assemble(const SweepSpec& spec, const std::vector<int>& res) {
  PiipConfig cfg;
  cfg.branches = spec.towers;
  for (size_t j = 0; j < res.size(); ++j)
    cfg.branches[j].resolution = res[j];
  cfg.interactions = spec.interactions;
  cfg.mode = spec.mode;
  cfg.num_classes = spec.num_classes;
  if (cfg.mode != RunMode::kClassifyFinetune)
    cfg.merge_subset.assign(cfg.branches.size(), true);
  std::ostringstream id;
  for (size_t j = 0; j < res.size(); ++j) id << (j ? "-" : "") << res[j];
  cfg.name = "sweep_" + id.str();
  return cfg;
}

}  // namespace detail_sweep

// Enumerates strictly increasing resolution assignments from the menu, keeps
// those whose analytic MAC total fits the budget, and ranks them by largest
// input resolution (descending), then total MACs, then serialized config.
// Fans the cost evaluation out over PIIP_THREADS workers; the final ordering
// never depends on the thread count.
inline std::vector<SweepEntry> run_sweep(const SweepSpec& spec) {
  std::vector<std::vector<int>> assignments;
  std::vector<int> picked;
  detail_sweep::enumerate(spec, 0, 0, picked, assignments);

  std::vector<SweepEntry> entries(assignments.size());
  std::vector<char> keep(assignments.size(), 0);
  const int workers = std::max(1, std::min<int>(worker_count(),
                                                static_cast<int>(assignments.size())));
  auto work = [&](int w) {
    for (size_t i = static_cast<size_t>(w); i < assignments.size();
         i += static_cast<size_t>(workers)) {
      PiipConfig cfg = detail_sweep::assemble(spec, assignments[i]);
      try {
        validate(cfg);
      } catch (const ConfigError&) {
        continue;  // e.g. parameter-inverted ordering violated by the menu
      }
      CostReport report = count_costs(cfg);
      if (static_cast<double>(report.total_macs()) > spec.budget_macs) continue;
      SweepEntry e;
      e.config_id = cfg.name;
      e.cfg = cfg;
      e.params_total = report.total_params();
      e.macs_total = report.total_macs();
      for (size_t j = 0; j < cfg.branches.size(); ++j) {
        const CostRow* row = report.find("branch_" + std::to_string(j + 1));
        e.macs_branch.push_back(row ? row->macs : 0);
      }
      if (const CostRow* row = report.find("interactions")) e.macs_interactions = row->macs;
      if (const CostRow* row = report.find("merging")) e.macs_merge = row->macs;
      entries[i] = std::move(e);
      keep[i] = 1;
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }

  std::vector<SweepEntry> result;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (keep[i]) result.push_back(std::move(entries[i]));
  }
  std::stable_sort(result.begin(), result.end(), [](const SweepEntry& a, const SweepEntry& b) {
    const int ra = a.cfg.branches.back().resolution;
    const int rb = b.cfg.branches.back().resolution;
    if (ra != rb) return ra > rb;
    if (a.macs_total != b.macs_total) return a.macs_total < b.macs_total;
    return serialize_model_config(a.cfg) < serialize_model_config(b.cfg);
  });
  return result;
}

inline std::string sweep_csv(const std::vector<SweepEntry>& entries, int branches) {
  std::ostringstream out;
  out << "config_id,branch_dims,branch_resolutions,params_total,macs_total";
  for (int j = 1; j <= branches; ++j) out << ",macs_branch_" << j;
  out << ",macs_interactions,macs_merge\n";
  for (const auto& e : entries) {
    out << e.config_id << ',';
    for (size_t j = 0; j < e.cfg.branches.size(); ++j)
      out << (j ? "|" : "") << e.cfg.branches[j].dim;
    out << ',';
    for (size_t j = 0; j < e.cfg.branches.size(); ++j)
      out << (j ? "|" : "") << e.cfg.branches[j].resolution;
    out << ',' << e.params_total << ',' << e.macs_total;
    for (std::uint64_t m : e.macs_branch) out << ',' << m;
    out << ',' << e.macs_interactions << ',' << e.macs_merge << '\n';
  }
  return out.str();
}

}  // namespace piip
