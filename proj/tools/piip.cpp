// Command-line front end: model inspection, cost accounting, forward runs,
// gradient checking, toy training and budget sweeps.
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "piip/piip.hpp"

namespace {

using piip::PiipConfig;

PiipConfig resolve_config(const std::string& preset_name, const std::string& config_path) {
  if (!config_path.empty()) return piip::load_config_file(config_path).model;
  if (!preset_name.empty()) return piip::preset(preset_name);
  throw piip::ConfigError("either --preset or --config is required");
}

std::string human(double v) {
  char buf[64];
  if (v >= 1e9) std::snprintf(buf, sizeof(buf), "%.3fG", v / 1e9);
  else if (v >= 1e6) std::snprintf(buf, sizeof(buf), "%.3fM", v / 1e6);
  else if (v >= 1e3) std::snprintf(buf, sizeof(buf), "%.3fK", v / 1e3);
  else std::snprintf(buf, sizeof(buf), "%.0f", v);
  return buf;
}

void print_deviation(const char* label, double got, double ref) {
  if (ref <= 0) return;
  std::cout << "  " << label << ": " << human(got) << " vs reference " << human(ref)
            << " (" << std::showpos << std::fixed << std::setprecision(1)
            << 100.0 * (got - ref) / ref << "%)" << std::noshowpos
            << std::defaultfloat << std::setprecision(6) << "\n";
}

void cmd_params(const PiipConfig& cfg) {
  piip::CostReport report = piip::count_costs(cfg);
  std::cout << "parameters of '" << cfg.name << "'\n";
  for (const auto& row : report.rows) {
    if (row.params == 0) continue;
    std::cout << "  " << std::left << std::setw(24) << row.name << std::right
              << std::setw(14) << row.params << "  (" << human(static_cast<double>(row.params))
              << ")\n";
  }
  std::cout << "  " << std::left << std::setw(24) << "total" << std::right
            << std::setw(14) << report.total_params() << "  ("
            << human(static_cast<double>(report.total_params())) << ")\n";

  piip::ReferenceCosts ref = piip::preset_reference(cfg.name);
  if (ref.valid && !ref.branch_params.empty()) {
    std::cout << "reference comparison:\n";
    for (size_t j = 0; j < ref.branch_params.size(); ++j) {
      // published per-branch numbers include the position embedding
      const auto* row = report.find("branch_" + std::to_string(j + 1));
      const auto* pos = report.find("branch_" + std::to_string(j + 1) + "_pos_embed");
      const double got = (row ? static_cast<double>(row->params) : 0.0) +
                         (pos ? static_cast<double>(pos->params) : 0.0);
      print_deviation(("branch_" + std::to_string(j + 1)).c_str(), got,
                      ref.branch_params[j]);
    }
    const auto* irow = report.find("interactions");
    print_deviation("interactions", irow ? static_cast<double>(irow->params) : 0.0,
                    ref.interaction_params);
    const auto* mrow = report.find("merging");
    print_deviation("merging", mrow ? static_cast<double>(mrow->params) : 0.0,
                    ref.merge_params);
  }
  if (cfg.interactions.count > 0 && cfg.branch_count() > 1) {
    // per-direction breakdown of one interaction point
    std::cout << "interaction unit breakdown (x" << cfg.interactions.count
              << " points):\n";
    for (auto [lo, hi] : piip::interaction_pairs(cfg)) {
      for (int dir = 0; dir < 2; ++dir) {
        if (!piip::direction_active(cfg, lo, hi, dir)) continue;
        const auto& q = cfg.branches[static_cast<size_t>(dir == 0 ? lo : hi)];
        const auto& kv = cfg.branches[static_cast<size_t>(dir == 0 ? hi : lo)];
        const auto p = piip::detail_cost::direction_params(cfg, q.dim, kv.dim, q.heads);
        std::cout << "  branch " << (dir == 0 ? lo : hi) + 1 << " <- branch "
                  << (dir == 0 ? hi : lo) + 1 << ": " << p << " ("
                  << human(static_cast<double>(p)) << ")\n";
      }
    }
  }
}

void cmd_flops(const PiipConfig& cfg) {
  piip::CostReport report = piip::count_costs(cfg);
  std::cout << "MACs of '" << cfg.name << "' at " << cfg.branches.back().resolution
            << "px\n";
  for (const auto& row : report.rows) {
    if (row.macs == 0) continue;
    std::cout << "  " << std::left << std::setw(24) << row.name << std::right
              << std::setw(16) << row.macs << "  (" << human(static_cast<double>(row.macs))
              << ")\n";
  }
  std::cout << "  " << std::left << std::setw(24) << "total" << std::right
            << std::setw(16) << report.total_macs() << "  ("
            << human(static_cast<double>(report.total_macs())) << ")\n";
  piip::ReferenceCosts ref = piip::preset_reference(cfg.name);
  if (ref.valid) {
    std::cout << "reference comparison:\n";
    for (size_t j = 0; j < ref.branch_macs.size(); ++j) {
      const auto* row = report.find("branch_" + std::to_string(j + 1));
      print_deviation(("branch_" + std::to_string(j + 1)).c_str(),
                      row ? static_cast<double>(row->macs) : 0.0, ref.branch_macs[j]);
    }
    if (ref.interaction_macs > 0) {
      const auto* row = report.find("interactions");
      print_deviation("interactions", row ? static_cast<double>(row->macs) : 0.0,
                      ref.interaction_macs);
    }
    if (ref.merge_macs > 0) {
      const auto* row = report.find("merging");
      print_deviation("merging", row ? static_cast<double>(row->macs) : 0.0, ref.merge_macs);
    }
    print_deviation("total", static_cast<double>(report.total_macs()), ref.total_macs);
  }
}

piip::Tensor<float> load_image(const std::string& path, int res) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw piip::ConfigError("cannot open image file '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "PIMG")
    throw piip::ConfigError("image file '" + path + "' lacks the PIMG magic");
  std::int32_t c = 0, h = 0, w = 0;
  in.read(reinterpret_cast<char*>(&c), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  if (!in || c != 3 || h <= 0 || w <= 0)
    throw piip::ConfigError("image file must hold a 3-channel planar float map");
  std::vector<float> data(static_cast<size_t>(c) * h * w);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw piip::ConfigError("image file '" + path + "' is truncated");
  piip::Tensor<float> img = piip::Tensor<float>::from_data({c, h, w}, std::move(data));
  if (h != res || w != res) {
    piip::NoGradGuard guard;
    img = piip::ops::bilinear_resize(img, res, res);
  }
  return img;
}

piip::Tensor<float> synthetic_image(int res, std::uint64_t seed) {
  auto data = piip::make_grating_dataset<float>(1, res, seed);
  return data[0].image;
}

PiipConfig gradcheck_config(const std::string& attention, const std::string& run_mode) {
  PiipConfig cfg;
  cfg.name = "gradcheck-tiny";
  cfg.branches = {{2, 8, 2, 4, 8, 4.0, false, 0}, {2, 4, 1, 4, 16, 4.0, false, 0}};
  cfg.interactions.count = 2;
  cfg.interactions.attention = attention == "regular" ? piip::AttentionType::kRegular
                                                      : piip::AttentionType::kDeformable;
  cfg.num_classes = 4;
  if (run_mode == "classify") {
    cfg.mode = piip::RunMode::kClassifyFinetune;
    for (auto& b : cfg.branches) b.use_cls_token = true;
  } else {
    cfg.mode = piip::RunMode::kDense;
    cfg.merge_subset = {true, true};
  }
  piip::validate(cfg);
  return cfg;
}

double run_gradcheck(const std::string& attention, const std::string& run_mode,
                     std::uint64_t seed, std::ostream& out) {
  PiipConfig cfg = gradcheck_config(attention, run_mode);
  auto model = piip::build_model<double>(cfg, seed);
  piip::randomize_params(model.params, 0.05, seed + 1);
  const int res = cfg.branches.back().resolution;
  auto data = piip::make_grating_dataset<double>(1, res, seed + 2);
  piip::Tensor<double> image = data[0].image;
  auto loss_fn = [&]() {
    piip::Tensor<double> o = piip::forward(model, image).output;
    return piip::ops::sum_all(piip::ops::mul(o, o));
  };
  piip::GradCheckResult r = piip::grad_check<double>(loss_fn, model.params, 1e-5, 200, seed + 3);
  out << "gradcheck " << attention << "/" << run_mode << ": max rel err "
      << std::scientific << std::setprecision(3) << r.max_rel_err << std::defaultfloat
      << " over " << r.checked << " coords";
  if (!r.worst_param.empty())
    out << " (worst: " << r.worst_param << "[" << r.worst_index << "], analytic "
        << r.analytic << ", numeric " << r.numeric << ")";
  out << "\n";
  return r.max_rel_err;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parameter-inverted image pyramid toolkit"};
  app.require_subcommand(1);

  std::string preset_name, config_path, out_path, image_path, attention = "deformable";
  std::string run_mode = "dense", metrics_path;
  std::uint64_t seed = 42;
  bool synthetic = false, with_cost = false;
  double budget_g = 20.0;

  auto add_model_opts = [&](CLI::App* cmd) {
    cmd->add_option("--preset", preset_name,
                    "preset name (piip-micro, piip-b, piip-tsb, piip-sbl, piip-tsbl, "
                    "vit-b, vit-l)");
    cmd->add_option("--config", config_path, "config file path (JSON)");
  };

  CLI::App* c_build = app.add_subcommand("build", "build a model and report its size");
  add_model_opts(c_build);
  c_build->add_option("--seed", seed, "init seed");
  c_build->add_option("--out", out_path, "write a checkpoint here");

  CLI::App* c_params = app.add_subcommand("params", "analytic parameter accounting");
  add_model_opts(c_params);

  CLI::App* c_flops = app.add_subcommand("flops", "analytic MAC accounting");
  add_model_opts(c_flops);

  CLI::App* c_forward = app.add_subcommand("forward", "run one forward pass");
  add_model_opts(c_forward);
  c_forward->add_option("--seed", seed, "init seed");
  c_forward->add_option("--image", image_path, "planar float image file (PIMG)");
  c_forward->add_flag("--synthetic", synthetic, "use a generated input image");
  c_forward->add_flag("--cost", with_cost, "print executed MACs by module");
  c_forward->add_option("--checkpoint", out_path, "load weights from this checkpoint");

  CLI::App* c_grad = app.add_subcommand("gradcheck",
                                        "finite-difference gradient verification");
  c_grad->add_option("--attention", attention, "deformable | regular")
      ->check(CLI::IsMember({"deformable", "regular"}));
  c_grad->add_option("--run-mode", run_mode, "dense | classify")
      ->check(CLI::IsMember({"dense", "classify"}));
  c_grad->add_option("--seed", seed, "seed");

  CLI::App* c_train = app.add_subcommand("train-toy", "train the toy classifier");
  c_train->add_option("--config", config_path, "config file with a train section");
  c_train->add_option("--seed", seed, "seed override");
  c_train->add_option("--metrics", metrics_path, "write per-epoch metrics CSV here");
  c_train->add_option("--out", out_path, "write final checkpoint here");

  CLI::App* c_sweep = app.add_subcommand("sweep", "resolution sweep under a MAC budget");
  c_sweep->add_option("--budget", budget_g, "budget in GMACs (default 20)");
  c_sweep->add_option("--out", out_path, "write the ranked CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_build->parsed()) {
      PiipConfig cfg = resolve_config(preset_name, config_path);
      auto model = piip::build_model<float>(cfg, seed);
      std::cout << "built '" << cfg.name << "': " << model.params.size()
                << " tensors, " << model.param_count() << " parameters ("
                << human(static_cast<double>(model.param_count())) << ")\n";
      if (!out_path.empty()) {
        piip::save_checkpoint(model, out_path);
        std::cout << "checkpoint written to " << out_path << "\n";
      }
    } else if (c_params->parsed()) {
      cmd_params(resolve_config(preset_name, config_path));
    } else if (c_flops->parsed()) {
      cmd_flops(resolve_config(preset_name, config_path));
    } else if (c_forward->parsed()) {
      PiipConfig cfg = resolve_config(preset_name, config_path);
      auto model = piip::build_model<float>(cfg, seed);
      if (!out_path.empty()) piip::load_checkpoint(model, out_path);
      const int res = cfg.branches.back().resolution;
      piip::Tensor<float> image;
      if (!image_path.empty()) image = load_image(image_path, res);
      else if (synthetic) image = synthetic_image(res, seed);
      else throw piip::ConfigError("forward needs --image or --synthetic");
      piip::NoGradGuard guard;
      if (with_cost) {
        piip::cost::Enable enable;
        piip::Tensor<float> out = piip::forward(model, image).output;
        double checksum = 0;
        for (float v : out.data()) checksum += v;
        std::cout << "output " << piip::shape_str(out.shape()) << ", checksum "
                  << std::setprecision(8) << checksum << "\n";
        std::uint64_t total = 0;
        for (const auto& [row, macs] : piip::cost::counter().rows) {
          std::cout << "  " << std::left << std::setw(24) << row << std::right
                    << std::setw(16) << macs << "\n";
          total += macs;
        }
        std::cout << "  " << std::left << std::setw(24) << "total" << std::right
                  << std::setw(16) << total << "\n";
      } else {
        piip::Tensor<float> out = piip::forward(model, image).output;
        double checksum = 0;
        for (float v : out.data()) checksum += v;
        std::cout << "output " << piip::shape_str(out.shape()) << ", checksum "
                  << std::setprecision(8) << checksum << "\n";
      }
    } else if (c_grad->parsed()) {
      const double err = run_gradcheck(attention, run_mode, seed, std::cout);
      if (!(err < 1e-4)) {
        std::cerr << "gradient check failed tolerance 1e-4\n";
        return 2;
      }
    } else if (c_train->parsed()) {
      piip::RunConfig rc;
      rc.model = piip::toy_config();
      if (!config_path.empty()) rc = piip::load_config_file(config_path);
      if (c_train->count("--seed") > 0) rc.train.seed = seed;
      if (!metrics_path.empty()) rc.io.metrics_csv = metrics_path;
      auto model = piip::build_model<float>(rc.model, rc.train.seed);
      const int res = rc.model.branches.back().resolution;
      auto train_data = piip::make_grating_dataset<float>(rc.train.train_size, res,
                                                          rc.train.seed + 1);
      auto test_data = piip::make_grating_dataset<float>(rc.train.test_size, res,
                                                         rc.train.seed + 2);
      piip::TrainReport report =
          piip::train_toy(model, train_data, test_data, rc.train, true, &std::cout);
      const piip::BaselineResult baseline = piip::logistic_baseline(
          train_data, test_data, rc.model.num_classes, rc.train.epochs, 0.01,
          rc.train.seed + 3);
      std::cout << "final: train_acc " << report.final_train_acc << ", test_acc "
                << report.final_test_acc << ", raw-pixel logistic baseline train "
                << baseline.train_acc << " / test " << baseline.test_acc << "\n";
      if (!rc.io.metrics_csv.empty()) {
        std::ofstream mf(rc.io.metrics_csv);
        mf << report.metrics_csv();
        std::cout << "metrics written to " << rc.io.metrics_csv << "\n";
      }
      if (!out_path.empty()) {
        piip::save_checkpoint(model, out_path);
        std::cout << "checkpoint written to " << out_path << "\n";
      }
    } else if (c_sweep->parsed()) {
      piip::SweepSpec spec = piip::tsb_sweep_spec(budget_g * 1e9);
      auto entries = piip::run_sweep(spec);
      const std::string csv = piip::sweep_csv(entries, static_cast<int>(spec.towers.size()));
      if (!out_path.empty()) {
        std::ofstream out(out_path);
        out << csv;
        std::cout << entries.size() << " configs under " << budget_g
                  << "G written to " << out_path << "\n";
      } else {
        std::cout << csv;
      }
    }
  } catch (const piip::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const piip::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const piip::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
