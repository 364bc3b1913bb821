#include <cmath>
#include <random>

#include <doctest.h>

#include "piip/gradcheck.hpp"
#include "piip/model.hpp"
#include "piip/train.hpp"

using piip::AttentionType;
using piip::BranchFeature;
using piip::Direction;
using piip::PiipConfig;
using piip::RunMode;
using piip::Tensor;
namespace ops = piip::ops;

namespace {

PiipConfig tiny_config(AttentionType attn, Direction dir) {
  PiipConfig cfg;
  cfg.name = "tiny";
  cfg.branches = {{2, 8, 2, 4, 8, 4.0, false, 0},
                  {2, 4, 1, 4, 16, 4.0, false, 0},
                  {2, 2, 1, 4, 32, 4.0, false, 0}};
  cfg.interactions.count = 2;
  cfg.interactions.attention = attn;
  cfg.interactions.direction = dir;
  cfg.mode = RunMode::kDense;
  cfg.merge_subset = {true, true, true};
  piip::validate(cfg);
  return cfg;
}

Tensor<double> random_image(int res, std::uint64_t seed) {
  auto data = piip::make_grating_dataset<double>(1, res, seed);
  return data[0].image;
}

}  // namespace

TEST_CASE("position embedding interpolation is identity at native grid") {
  std::mt19937_64 rng(11);
  Tensor<double> pos = Tensor<double>::zeros({16, 8});
  piip::fill_trunc_normal(pos, 1.0, rng);
  Tensor<double> same = piip::interpolate_pos_embed(pos, 4, 4);
  for (size_t i = 0; i < pos.data().size(); ++i) {
    CHECK(same.data()[i] == pos.data()[i]);
  }
  Tensor<double> up = piip::interpolate_pos_embed(pos, 8, 8);
  CHECK(up.shape() == std::vector<int>{64, 8});
}

TEST_CASE("transformer layer with zeroed projections is the identity") {
  piip::BranchConfig bc{1, 8, 2, 4, 16, 4.0, false, 0};
  piip::LayerWeights<double> lw;
  lw.ln1_g = Tensor<double>::full({8}, 1.0);
  lw.ln1_b = Tensor<double>::zeros({8});
  lw.qkv_w = Tensor<double>::zeros({8, 24});
  lw.qkv_b = Tensor<double>::zeros({24});
  lw.out_w = Tensor<double>::zeros({8, 8});
  lw.out_b = Tensor<double>::zeros({8});
  lw.ln2_g = Tensor<double>::full({8}, 1.0);
  lw.ln2_b = Tensor<double>::zeros({8});
  lw.mlp1_w = Tensor<double>::zeros({8, 32});
  lw.mlp1_b = Tensor<double>::zeros({32});
  lw.mlp2_w = Tensor<double>::zeros({32, 8});
  lw.mlp2_b = Tensor<double>::zeros({8});
  std::mt19937_64 rng(12);
  piip::BranchFeature<double> f;
  f.tokens = Tensor<double>::zeros({16, 8});
  f.gh = f.gw = 4;
  piip::fill_trunc_normal(f.tokens, 1.0, rng);
  piip::BranchFeature<double> y = piip::vit_layer(f, bc, lw, 0);
  for (size_t i = 0; i < f.tokens.data().size(); ++i) {
    CHECK(y.tokens.data()[i] == f.tokens.data()[i]);
  }
}

TEST_CASE("regular cross-attention matches a brute-force oracle") {
  const int nq = 3, nk = 5, heads = 2, d = 4, dh = 2;
  std::mt19937_64 rng(13);
  auto rnd = [&](std::vector<int> shape) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    piip::fill_trunc_normal(t, 0.5, rng);
    return t;
  };
  piip::DirectionWeights<double> w;
  w.q_w = rnd({d, d}); w.q_b = rnd({d});
  w.k_w = rnd({d, d}); w.k_b = rnd({d});
  w.v_w = rnd({d, d}); w.v_b = rnd({d});
  w.o_w = rnd({d, d}); w.o_b = rnd({d});
  Tensor<double> query = rnd({nq, d});
  Tensor<double> kv = rnd({nk, d});
  Tensor<double> out = piip::regular_cross_attention(query, kv, w, heads);

  auto proj = [&](const Tensor<double>& x, const Tensor<double>& wm,
                  const Tensor<double>& bm, int row, int col) {
    double acc = bm.data()[static_cast<size_t>(col)];
    for (int i = 0; i < d; ++i)
      acc += x.data()[static_cast<size_t>(row) * d + i] * wm.data()[static_cast<size_t>(i) * d + col];
    return acc;
  };
  for (int q = 0; q < nq; ++q) {
    std::vector<double> merged(d, 0.0);
    for (int h = 0; h < heads; ++h) {
      std::vector<double> scores(nk);
      double mx = -1e30;
      for (int j = 0; j < nk; ++j) {
        double s = 0;
        for (int c = 0; c < dh; ++c) {
          s += proj(query, w.q_w, w.q_b, q, h * dh + c) * proj(kv, w.k_w, w.k_b, j, h * dh + c);
        }
        scores[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, scores[static_cast<size_t>(j)]);
      }
      double z = 0;
      for (double& s : scores) { s = std::exp(s - mx); z += s; }
      for (int c = 0; c < dh; ++c) {
        double ctx = 0;
        for (int j = 0; j < nk; ++j)
          ctx += scores[static_cast<size_t>(j)] / z * proj(kv, w.v_w, w.v_b, j, h * dh + c);
        merged[static_cast<size_t>(h * dh + c)] = ctx;
      }
    }
    for (int c = 0; c < d; ++c) {
      double acc = w.o_b.data()[static_cast<size_t>(c)];
      for (int i = 0; i < d; ++i) acc += merged[static_cast<size_t>(i)] * w.o_w.data()[static_cast<size_t>(i) * d + c];
      CHECK(out.data()[static_cast<size_t>(q) * d + c] == doctest::Approx(acc).epsilon(1e-10));
    }
  }
}

TEST_CASE("deformable attention with zero offsets and logits collapses to the reference sample") {
  const int heads = 2, k = 4, d = 8, dv = 4;
  const int q_gh = 2, q_gw = 2, kv_gh = 4, kv_gw = 4;
  std::mt19937_64 rng(14);
  auto rnd = [&](std::vector<int> shape, double s = 0.5) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    piip::fill_trunc_normal(t, s, rng);
    return t;
  };
  piip::DirectionWeights<double> w;
  w.val_w = rnd({d, dv}); w.val_b = rnd({dv});
  w.off_w = Tensor<double>::zeros({d, heads * k * 2});
  w.off_b = Tensor<double>::zeros({heads * k * 2});
  w.logit_w = Tensor<double>::zeros({d, heads * k});
  w.logit_b = Tensor<double>::zeros({heads * k});
  w.attn_out_w = rnd({dv, d}); w.attn_out_b = rnd({d});
  Tensor<double> query = rnd({q_gh * q_gw, d});
  Tensor<double> kv = rnd({kv_gh * kv_gw, d});
  Tensor<double> out = piip::deformable_cross_attention(query, kv, q_gh, q_gw, kv_gh,
                                                        kv_gw, w, heads, k, dv);
  // oracle: project values, bilinear-sample each head slice at the reference
  // point of each query, then apply the output projection
  Tensor<double> value = ops::linear(kv, w.val_w, w.val_b);
  Tensor<double> vmap = ops::permute(ops::reshape(value, {kv_gh, kv_gw, dv}), {2, 0, 1});
  Tensor<double> ref = piip::detail_inter::reference_points<double>(q_gh, q_gw, 1);
  Tensor<double> sampled = ops::grid_sample_bilinear(vmap, ref);  // [nq, dv]
  Tensor<double> want = ops::linear(sampled, w.attn_out_w, w.attn_out_b);
  for (size_t i = 0; i < want.data().size(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("zero gates keep every branch bit-identical to its standalone run") {
  for (AttentionType attn : {AttentionType::kDeformable, AttentionType::kRegular}) {
    for (Direction dir : {Direction::kAdjacentBidirectional, Direction::kAdjacentDownOnly,
                          Direction::kAdjacentUpOnly, Direction::kChainOneWay,
                          Direction::kAllPairsBidirectional}) {
      PiipConfig cfg = tiny_config(attn, dir);
      auto model = piip::build_model<double>(cfg, 77);
      Tensor<double> image = random_image(cfg.branches.back().resolution, 78);
      piip::NoGradGuard guard;
      auto result = piip::forward(model, image);
      for (int j = 0; j < cfg.branch_count(); ++j) {
        Tensor<double> input = ops::bilinear_resize(image, cfg.branches[static_cast<size_t>(j)].resolution,
                                                    cfg.branches[static_cast<size_t>(j)].resolution);
        BranchFeature<double> solo = piip::run_branch(model, j, input);
        Tensor<double> normed = ops::layer_norm(solo.tokens,
                                                model.branches[static_cast<size_t>(j)].final_ln_g,
                                                model.branches[static_cast<size_t>(j)].final_ln_b);
        const auto& got = result.branch_features[static_cast<size_t>(j)].tokens.data();
        REQUIRE(got.size() == normed.data().size());
        for (size_t i = 0; i < got.size(); ++i) {
          CHECK(got[i] == normed.data()[i]);  // bit-exact
        }
      }
    }
  }
}

TEST_CASE("interaction results do not depend on unit evaluation order") {
  PiipConfig cfg = tiny_config(AttentionType::kDeformable, Direction::kAllPairsBidirectional);
  auto model = piip::build_model<double>(cfg, 80);
  piip::randomize_params(model.params, 0.05, 81);
  Tensor<double> image = random_image(cfg.branches.back().resolution, 82);
  piip::NoGradGuard guard;
  std::vector<BranchFeature<double>> feats;
  for (int j = 0; j < cfg.branch_count(); ++j) {
    Tensor<double> input = ops::bilinear_resize(image, cfg.branches[static_cast<size_t>(j)].resolution,
                                                cfg.branches[static_cast<size_t>(j)].resolution);
    feats.push_back(piip::patch_embed(input, cfg.branches[static_cast<size_t>(j)],
                                      model.branches[static_cast<size_t>(j)]));
  }
  const size_t nunits = model.interactions[0].units.size();
  REQUIRE(nunits == 3);  // adjacent pairs + the (1,3) extra
  std::vector<int> forward_order = {0, 1, 2};
  std::vector<int> shuffled = {2, 0, 1};
  auto a = piip::schedule_interactions(feats, model.interactions, 0, cfg, &forward_order);
  auto b = piip::schedule_interactions(feats, model.interactions, 0, cfg, &shuffled);
  for (int j = 0; j < cfg.branch_count(); ++j) {
    const auto& da = a[static_cast<size_t>(j)].tokens.data();
    const auto& db = b[static_cast<size_t>(j)].tokens.data();
    REQUIRE(da.size() == db.size());
    for (size_t i = 0; i < da.size(); ++i) {
      CHECK(da[i] == db[i]);  // bit-exact
    }
  }
}

TEST_CASE("one-way schemes leave the untouched branch unchanged") {
  PiipConfig cfg = tiny_config(AttentionType::kRegular, Direction::kAdjacentUpOnly);
  auto model = piip::build_model<double>(cfg, 83);
  piip::randomize_params(model.params, 0.05, 84);
  Tensor<double> image = random_image(cfg.branches.back().resolution, 85);
  piip::NoGradGuard guard;
  std::vector<BranchFeature<double>> feats;
  for (int j = 0; j < cfg.branch_count(); ++j) {
    Tensor<double> input = ops::bilinear_resize(image, cfg.branches[static_cast<size_t>(j)].resolution,
                                                cfg.branches[static_cast<size_t>(j)].resolution);
    feats.push_back(piip::patch_embed(input, cfg.branches[static_cast<size_t>(j)],
                                      model.branches[static_cast<size_t>(j)]));
  }
  auto out = piip::schedule_interactions(feats, model.interactions, 0, cfg);
  // up-only: branch 1 is never a query, so its tokens pass through untouched
  const auto& before = feats[0].tokens.data();
  const auto& after = out[0].tokens.data();
  for (size_t i = 0; i < before.size(); ++i) CHECK(after[i] == before[i]);
  // the inactive direction half carries no weights at all
  for (const auto& unit : model.interactions[0].units) {
    CHECK_FALSE(unit.active[0]);
    CHECK(unit.active[1]);
    CHECK_FALSE(unit.dir[0].fc_w.defined());
  }
}

TEST_CASE("merge output sits on the largest grid with branch-1 channels") {
  PiipConfig cfg = piip::preset("piip-micro");
  auto model = piip::build_model<double>(cfg, 86);
  Tensor<double> image = random_image(cfg.branches.back().resolution, 87);
  piip::NoGradGuard guard;
  auto result = piip::forward(model, image);
  Tensor<double> merged = piip::branch_merge(result.branch_features, model.merge, cfg,
                                             cfg.merge_subset);
  const int g = cfg.largest_grid();
  CHECK(merged.shape() == std::vector<int>{cfg.branches[0].dim, g, g});
}

TEST_CASE("merge is linear in the branch weights") {
  PiipConfig cfg = piip::preset("piip-micro");
  auto model = piip::build_model<double>(cfg, 88);
  piip::randomize_params(model.params, 0.05, 89);
  Tensor<double> image = random_image(cfg.branches.back().resolution, 90);
  piip::NoGradGuard guard;
  auto result = piip::forward(model, image);
  const auto& feats = result.branch_features;

  auto with_w = [&](double w1, double w2, double w3) {
    model.merge.w.data() = {w1, w2, w3};
    return piip::branch_merge(feats, model.merge, cfg, cfg.merge_subset);
  };
  Tensor<double> a = with_w(0.3, -0.7, 1.1);
  Tensor<double> b = with_w(0.5, 0.2, -0.4);
  Tensor<double> sum = with_w(0.8, -0.5, 0.7);
  for (size_t i = 0; i < sum.data().size(); ++i) {
    const double super = a.data()[i] + b.data()[i];
    const double denom = std::max(1.0, std::abs(sum.data()[i]));
    CHECK(std::abs(super - sum.data()[i]) / denom < 1e-6);
  }
}

TEST_CASE("all seven subset masks of a three-branch merge run") {
  PiipConfig cfg = piip::preset("piip-micro");
  auto model = piip::build_model<double>(cfg, 91);
  Tensor<double> image = random_image(cfg.branches.back().resolution, 92);
  piip::NoGradGuard guard;
  auto result = piip::forward(model, image);
  const int g = cfg.largest_grid();
  for (int mask = 1; mask < 8; ++mask) {
    std::vector<bool> subset = {(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0};
    Tensor<double> merged = piip::branch_merge(result.branch_features, model.merge, cfg, subset);
    CHECK(merged.shape() == std::vector<int>{cfg.branches[0].dim, g, g});
    CHECK(piip::all_finite(merged));
  }
  CHECK_THROWS_AS(piip::branch_merge(result.branch_features, model.merge, cfg,
                                     {false, false, false}),
                  piip::ConfigError);
}

TEST_CASE("full-model gradients stay below tolerance on a tiny pyramid") {
  PiipConfig cfg = tiny_config(AttentionType::kDeformable, Direction::kAdjacentBidirectional);
  cfg.branches.pop_back();
  cfg.merge_subset = {true, true};
  piip::validate(cfg);
  auto model = piip::build_model<double>(cfg, 93);
  piip::randomize_params(model.params, 0.05, 94);
  Tensor<double> image = random_image(cfg.branches.back().resolution, 95);
  auto loss = [&] {
    Tensor<double> o = piip::forward(model, image).output;
    return ops::sum_all(ops::mul(o, o));
  };
  auto r = piip::grad_check<double>(loss, model.params, 1e-5, 40, 96);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("config validation rejects contract violations") {
  PiipConfig cfg = tiny_config(AttentionType::kDeformable, Direction::kAdjacentBidirectional);
  SUBCASE("resolutions must increase") {
    cfg.branches[2].resolution = cfg.branches[1].resolution;
    CHECK_THROWS_AS(piip::validate(cfg), piip::ConfigError);
  }
  SUBCASE("parameters must decrease without the ablation flag") {
    cfg.branches[2].dim = 16;
    cfg.branches[2].heads = 2;
    CHECK_THROWS_AS(piip::validate(cfg), piip::ConfigError);
    cfg.ablation = true;
    CHECK_NOTHROW(piip::validate(cfg));
  }
  SUBCASE("depth must split evenly across interaction points") {
    cfg.interactions.count = 3;
    CHECK_THROWS_AS(piip::validate(cfg), piip::ConfigError);
  }
  SUBCASE("window must divide the token grid") {
    cfg.branches[2].attn_window = 3;
    CHECK_THROWS_AS(piip::validate(cfg), piip::ConfigError);
  }
  SUBCASE("class tokens only in finetune mode") {
    cfg.branches[0].use_cls_token = true;
    CHECK_THROWS_AS(piip::validate(cfg), piip::ConfigError);
  }
}

TEST_CASE("training is deterministic given the seeds") {
  piip::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.lr = 0.2;
  PiipConfig cfg = piip::toy_config();
  auto train_data = piip::make_grating_dataset<float>(32, cfg.branches.back().resolution, 5);
  auto test_data = piip::make_grating_dataset<float>(16, cfg.branches.back().resolution, 6);
  auto run = [&] {
    auto model = piip::build_model<float>(cfg, 7);
    return piip::train_toy(model, train_data, test_data, tc).metrics_csv();
  };
  CHECK(run() == run());
}
