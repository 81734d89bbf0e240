#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "cakes/search.hpp"
#include "oracles.hpp"

using namespace cakes;

namespace {

const KernelShape k333{3, 3, 3}, k133{1, 3, 3}, k313{3, 1, 3}, k331{3, 3, 1}, k113{1, 1, 3}, k131{1, 3, 1},
    k311{3, 1, 1};

// Residual-free backbone with square replaceable layers (C_i = C_o) so the
// factorised layer lands exactly on 4/9.
BackboneSpec square_backbone(std::size_t width = 8) { return desk_classifier(width, 3, {8, 8, 8}, 4, 2); }

SyntheticTaskSpec tiny_task(std::size_t n = 16) {
  SyntheticTaskSpec s;
  s.dims = {6, 6, 6};
  s.train_size = n;
  s.val_size = 4;
  s.seed = 9;
  return s;
}

double mean_abs_alpha(const AlphaSnapshot& a) {
  double m = 0.0;
  std::size_t n = 0;
  for (const auto& layer : a.values)
    for (const auto& ch : layer)
      for (double v : ch) m += std::abs(v), ++n;
  return m / static_cast<double>(n);
}

}  // namespace

TEST(Penalty, HandExample) {
  const SubKernelSet set(k333, {k333, k133, k113});
  const auto beta = cost_beta(set);
  std::vector<Tensor> alphas{Tensor({1}, std::vector<double>{1.0}, true), Tensor({1}, std::vector<double>{-2.0}, true),
                             Tensor({1}, std::vector<double>{0.5}, true)};
  Tensor p = penalty_loss(alphas, beta, 1e-4);
  EXPECT_NEAR(p.item(), 1e-4 * (9.0 + 6.0 + 0.5) / 13.0, 1e-18);
  EXPECT_NEAR(p.item(), 1.1923e-4, 1e-8);
  p.backward();
  EXPECT_NEAR(alphas[1].grad()[0], -1e-4 * 3.0 / 13.0, 1e-18);

  EXPECT_EQ(penalty_loss(alphas, beta, 0.0).item(), 0.0);
  std::vector<Tensor> zeros{Tensor({3}, 0.0, true), Tensor({3}, 0.0, true), Tensor({3}, 0.0, true)};
  Tensor pz = penalty_loss(zeros, beta, 1.0);
  EXPECT_EQ(pz.item(), 0.0);
  pz.backward();
  for (const auto& z : zeros)
    for (double g : z.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Penalty, SupernetPenaltyMatchesDirectSum) {
  const auto set = default_subkernel_set();
  SuperNet net(square_backbone(4), set, SearchMode::CostPriority, 3);
  Rng rng(8);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < set.size(); ++i) net.set_path_weight(l, c, i, u(rng));
  const auto beta = cost_beta(set);
  double expect = 0.0;
  auto alpha = net.read_path_weights();
  for (const auto& layer : alpha.values)
    for (const auto& ch : layer)
      for (std::size_t i = 0; i < set.size(); ++i) expect += beta[i] * std::abs(ch[i]);
  EXPECT_NEAR(penalty_loss(net, beta, 1e-3).item(), 1e-3 * expect, 1e-15);
}

TEST(Finalize, ArgmaxOfMagnitude) {
  const SubKernelSet set(k333, {k333, k133, k113});
  const std::vector<double> a{0.2, -0.9, 0.5};
  EXPECT_EQ(select_candidate(a, set), 1u);
  AlphaSnapshot snap{set.names(), {"layer1"}, {{a, {0.1, 0.1, 0.1}}}};
  auto cfg = finalize(snap, set);
  ASSERT_EQ(cfg.layers.size(), 1u);
  EXPECT_EQ(cfg.layers[0].shapes[0], k133);
  EXPECT_EQ(cfg.layers[0].shapes[1], k113);  // all equal -> cheapest
}

TEST(Finalize, TiesPreferCheaperThenCandidateOrder) {
  const auto set = default_subkernel_set();
  EXPECT_EQ(set[select_candidate(std::vector<double>(7, 0.4), set)], k113);
  // 1x3x3 and 3x1x3 tie at equal volume: candidate order decides.
  std::vector<double> a(7, 0.1);
  a[set.index_of(k133)] = 0.7;
  a[set.index_of(k313)] = -0.7;
  a[set.index_of(k333)] = 0.7;
  EXPECT_EQ(set[select_candidate(a, set)], k133);
}

TEST(Finalize, InvariantUnderPositiveChannelScaling) {
  const auto set = default_subkernel_set();
  Rng rng(21);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> c(1e-3, 1e3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(7);
    for (auto& v : a) v = n(rng);
    if (trial % 5 == 0) a[3] = a[1] = std::abs(a[0]);  // exercise ties
    auto scaled = a;
    const double k = c(rng);
    for (auto& v : scaled) v *= k;
    EXPECT_EQ(select_candidate(a, set), select_candidate(scaled, set));
  }
}

TEST(ManualConfig, UniformSpreadsCandidatesEvenly) {
  auto spec = desk_classifier(14, 1, {8, 8, 8}, 4);
  auto cfg = manual_config(spec, default_subkernel_set(), ManualScheme::Uniform);
  std::map<std::string, int> counts;
  for (const auto& s : cfg.layers[0].shapes) ++counts[s.str()];
  ASSERT_EQ(counts.size(), 7u);
  for (auto [shape, n] : counts) EXPECT_EQ(n, 2) << shape;
}

TEST(ManualConfig, CostRatiosAgainstFull3D) {
  const auto spec = square_backbone();
  const auto set = default_subkernel_set();
  const auto full = cost_report(spec, manual_config(spec, set, ManualScheme::Full3D));
  const auto pure2d = cost_report(spec, manual_config(spec, set, ManualScheme::Pure2D));
  const auto p3d = cost_report(spec, manual_config(spec, set, ManualScheme::P3D));
  const auto pure1d = cost_report(spec, manual_config(spec, set, ManualScheme::Pure1D));
  EXPECT_EQ(3 * pure2d.replaceable_params, full.replaceable_params);
  EXPECT_EQ(9 * p3d.replaceable_params, 4 * full.replaceable_params);
  EXPECT_EQ(9 * pure1d.replaceable_params, full.replaceable_params);
  EXPECT_LT(pure2d.total_params, full.total_params);
  // Non-replaceable layers are identical across configurations.
  EXPECT_EQ(full.total_params - full.replaceable_params, p3d.total_params - p3d.replaceable_params);
  EXPECT_EQ(p3d.class_counts[static_cast<int>(KernelClass::Conv2D)], 24u);
  EXPECT_EQ(p3d.class_counts[static_cast<int>(KernelClass::Conv1D)], 24u);
}

TEST(ManualConfig, SchemeNeedsItsShapes) {
  const SubKernelSet only3d(k333, {k333});
  EXPECT_THROW(manual_config(square_backbone(), only3d, ManualScheme::Pure2D), ConfigError);
  EXPECT_NO_THROW(manual_config(square_backbone(), only3d, ManualScheme::P3D));
}

TEST(CostReport, HandCountedLayer) {
  auto spec = desk_classifier(4, 1, {8, 8, 8}, 4);
  ReplacementConfig cfg{{{"layer1", false, {k113, k131, k311, k333}}}};
  auto r = cost_report(spec, cfg);
  EXPECT_EQ(r.class_counts[static_cast<int>(KernelClass::Conv1D)], 3u);
  EXPECT_EQ(r.class_counts[static_cast<int>(KernelClass::Conv2D)], 0u);
  EXPECT_EQ(r.class_counts[static_cast<int>(KernelClass::Conv3D)], 1u);
  EXPECT_EQ(r.axis_counts[0], 2u);
  EXPECT_EQ(r.axis_counts[1], 2u);
  EXPECT_EQ(r.axis_counts[2], 2u);
  EXPECT_EQ(r.replaceable_params, 4 * (3 + 3 + 3 + 27));
  // Strided layer: 4^3 output voxels, two flops per multiply-add.
  EXPECT_EQ(r.replaceable_flops, 2 * r.replaceable_params * 64);
}

TEST(CostReport, ConservationAndBound) {
  const auto spec = square_backbone();
  const auto set = default_subkernel_set();
  const auto full = cost_report(spec, manual_config(spec, set, ManualScheme::Full3D));
  for (std::size_t a = 0; a < 3; ++a) EXPECT_EQ(full.axis_counts[a], full.replaced_channels);
  Rng rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    ReplacementConfig cfg = manual_config(spec, set, ManualScheme::Full3D);
    bool all3d = true;
    for (auto& l : cfg.layers)
      for (auto& s : l.shapes) {
        s = set[std::uniform_int_distribution<std::size_t>(0, trial % 3 == 0 ? 0 : 6)(rng)];
        all3d = all3d && s == k333;
      }
    auto r = cost_report(spec, cfg);
    std::size_t sum = 0;
    for (auto c : r.class_counts) sum += c;
    EXPECT_EQ(sum, r.replaced_channels);
    for (auto a : r.axis_counts) EXPECT_LE(a, r.replaced_channels);
    if (all3d) {
      EXPECT_EQ(r.replaceable_params, full.replaceable_params);
    } else {
      EXPECT_LT(r.replaceable_params, full.replaceable_params);
    }
    auto back = cost_report_from_json(cost_report_to_json(r));
    EXPECT_EQ(cost_report_to_json(back).dump(), cost_report_to_json(r).dump());
  }
}

TEST(FinalNetwork, GroupedMatchesPerChannelDefinition) {
  const auto set = default_subkernel_set();
  const auto spec = desk_classifier(6, 2, {6, 6, 6}, 3, 2);
  Rng rng(77);
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    ReplacementConfig cfg = manual_config(spec, set, ManualScheme::Full3D);
    for (auto& l : cfg.layers)
      for (auto& s : l.shapes) s = set[std::uniform_int_distribution<std::size_t>(0, 6)(rng)];
    Network net = build_final_network(spec, cfg, trial);
    for (auto& p : net.parameters())
      if (p.name.find(".bn.") != std::string::npos)
        for (auto& v : p.tensor.mutable_values()) v = std::uniform_real_distribution<double>(-1.5, 1.5)(rng);
    const auto repl = spec.replaceable();
    for (std::size_t li = 0; li < repl.size(); ++li) {
      const ConvSpec& c = *repl[li];
      auto& mod = dynamic_cast<GroupedConv&>(net.replaceable_module(li));
      std::vector<Tensor> rows(c.out_channels);
      for (const auto& g : mod.groups()) {
        const auto& ws = g.weight.shape();
        const std::size_t row = ws[1] * ws[2] * ws[3] * ws[4];
        for (std::size_t j = 0; j < g.channels.size(); ++j) {
          std::vector<double> w(g.weight.values().begin() + j * row, g.weight.values().begin() + (j + 1) * row);
          rows[g.channels[j]] = Tensor({1, ws[1], ws[2], ws[3], ws[4]}, w);
          ASSERT_EQ(g.shape, cfg.layers[li].shapes[g.channels[j]]);
        }
      }
      std::vector<double> gamma, beta;
      for (auto& p : net.parameters()) {
        if (p.name == c.name + ".bn.scale") gamma.assign(p.tensor.values().begin(), p.tensor.values().end());
        if (p.name == c.name + ".bn.shift") beta.assign(p.tensor.values().begin(), p.tensor.values().end());
      }
      ASSERT_EQ(gamma.size(), c.out_channels);
      Tensor x = normal_tensor({2, c.in_channels, 6, 6, 6}, 1.0, rng);
      Tensor got = mod.forward(x, {});
      Tensor want = oracle::naive_heterogeneous_layer(x, rows, c.stride, gamma, beta, c.activation);
      EXPECT_LT(oracle::max_relative_error(got, want), 1e-12) << "trial " << trial << " layer " << c.name;
    }
  }
}

TEST(FinalNetwork, AllBaseMatchesPlainBackboneStructure) {
  const auto spec = square_backbone(4);
  Network plain(spec, 5);
  Network fin = build_final_network(spec, manual_config(spec, default_subkernel_set(), ManualScheme::Full3D), 5);
  auto a = plain.parameters(), b = fin.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].tensor.shape(), b[i].tensor.shape());
  }
  Rng rng(1);
  Tensor x = normal_tensor({2, 1, 8, 8, 8}, 1.0, rng);
  EXPECT_EQ(oracle::max_relative_error(fin.forward(x), plain.forward(x)), 0.0);
}

TEST(FinalNetwork, ParameterCountsFollowConfig) {
  const auto spec = square_backbone();
  const auto set = default_subkernel_set();
  auto count_conv = [&](const ReplacementConfig& cfg) {
    Network n = build_final_network(spec, cfg, 1);
    std::size_t total = 0;
    for (auto& p : n.parameters())
      if (p.name.rfind("layer", 0) == 0 && p.name.find("weight") != std::string::npos) total += p.tensor.size();
    return total;
  };
  EXPECT_EQ(3 * count_conv(manual_config(spec, set, ManualScheme::Pure2D)),
            count_conv(manual_config(spec, set, ManualScheme::Full3D)));
  EXPECT_EQ(9 * count_conv(manual_config(spec, set, ManualScheme::P3D)),
            4 * count_conv(manual_config(spec, set, ManualScheme::Full3D)));
  ReplacementConfig bad = manual_config(spec, set, ManualScheme::Full3D);
  bad.layers[0].shapes.pop_back();
  EXPECT_THROW(build_final_network(spec, bad, 1), ConfigError);
}

TEST(FinalNetwork, P3DMatchesTwoStackedLayers) {
  ConvSpec c{"l", 3, 4, {3, 3, 3}, {2, 2, 2}, true, true, true};
  Rng rng(2);
  P3DConv p3d(c, rng);
  std::vector<NamedParam> params;
  std::vector<NamedStats> stats;
  p3d.collect(params, stats);
  std::map<std::string, Tensor> by_name;
  for (auto& p : params) by_name[p.name] = p.tensor;
  Tensor x = normal_tensor({2, 3, 6, 6, 6}, 1.0, rng);
  auto rows_of = [](const Tensor& w) {
    std::vector<Tensor> rows;
    const auto& s = w.shape();
    const std::size_t r = s[1] * s[2] * s[3] * s[4];
    for (std::size_t o = 0; o < s[0]; ++o)
      rows.push_back(Tensor({1, s[1], s[2], s[3], s[4]},
                            std::vector<double>(w.values().begin() + o * r, w.values().begin() + (o + 1) * r)));
    return rows;
  };
  auto vec = [](const Tensor& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
  Tensor mid = oracle::naive_heterogeneous_layer(x, rows_of(by_name["l.spatial.weight"]), {1, 2, 2},
                                                 vec(by_name["l.spatial.bn.scale"]), vec(by_name["l.spatial.bn.shift"]),
                                                 true);
  Tensor want = oracle::naive_heterogeneous_layer(mid, rows_of(by_name["l.temporal.weight"]), {2, 1, 1},
                                                  vec(by_name["l.temporal.bn.scale"]),
                                                  vec(by_name["l.temporal.bn.shift"]), true);
  EXPECT_LT(oracle::max_relative_error(p3d.forward(x, {}), want), 1e-12);
}

TEST(Config, JsonRoundTrips) {
  SearchConfig c;
  c.lambda = 3e-4;
  c.beta = std::vector<double>{1, 2, 3, 4, 5, 6, 7};
  c.train.iterations = 12;
  Json j = search_config_to_json(c);
  EXPECT_EQ(search_config_to_json(search_config_from_json(j)).dump(), j.dump());
  j["mode"] = "perf";
  EXPECT_THROW(search_config_from_json(j), ConfigError);
  j.erase("beta");
  j["optimizer"]["nesterov"] = true;
  try {
    search_config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "optimizer.nesterov");
  }

  const auto spec = square_backbone();
  auto cfg = manual_config(spec, default_subkernel_set(), ManualScheme::Uniform);
  cfg.layers[1] = {"layer2", true, {}};
  Json cj = replacement_to_json(cfg);
  EXPECT_EQ(cj["layer2"], "p3d");
  EXPECT_EQ(replacement_to_json(replacement_from_json(cj)).dump(), cj.dump());
  cj["layer1"][0] = "2x3x3";
  EXPECT_THROW(replacement_from_json(cj), ConfigError);
}

TEST(Search, ZeroIterationsKeepsInitialAlpha) {
  const auto data = generate(tiny_task());
  const auto spec = desk_classifier(4, 2, {6, 6, 6}, 4);
  for (SearchMode mode : {SearchMode::PerformancePriority, SearchMode::CostPriority}) {
    SuperNet net(spec, default_subkernel_set(), mode, 1);
    SearchConfig cfg;
    cfg.mode = mode;
    cfg.train.iterations = 0;
    auto r = run_search(net, data, cfg);
    for (const auto& layer : r.alpha.values)
      for (const auto& ch : layer)
        for (double v : ch) EXPECT_EQ(v, 1.0);
  }
}

TEST(Search, HugePenaltyShrinksAlpha) {
  const auto data = generate(tiny_task());
  SuperNet net(desk_classifier(4, 2, {6, 6, 6}, 4), default_subkernel_set(), SearchMode::CostPriority, 1);
  SearchConfig cfg;
  cfg.lambda = 1e3;
  cfg.train.iterations = 3;
  cfg.train.batch_size = 2;
  cfg.train.optimizer.learning_rate = 1e-4;
  auto r = run_cost_priority(net, data, cfg);
  EXPECT_LT(mean_abs_alpha(r.alpha), 1.0);
  EXPECT_GT(r.log.rows[0].penalty, 0.0);
}

TEST(Search, ZeroLambdaLogsNoPenalty) {
  const auto data = generate(tiny_task());
  SuperNet net(desk_classifier(4, 2, {6, 6, 6}, 4), default_subkernel_set(), SearchMode::CostPriority, 1);
  SearchConfig cfg;
  cfg.lambda = 0.0;
  cfg.train.iterations = 2;
  cfg.train.batch_size = 2;
  auto r = run_cost_priority(net, data, cfg);
  for (const auto& row : r.log.rows) {
    EXPECT_EQ(row.penalty, 0.0);
    EXPECT_EQ(row.loss, row.task_loss);
  }
}

TEST(Search, PerformancePriorityIsDeterministicAndSamplesPaths) {
  const auto data = generate(tiny_task());
  const auto spec = desk_classifier(4, 2, {6, 6, 6}, 4);
  auto run = [&] {
    SuperNet net(spec, default_subkernel_set(), SearchMode::PerformancePriority, 4);
    SearchConfig cfg;
    cfg.mode = SearchMode::PerformancePriority;
    cfg.train.iterations = 4;
    cfg.train.batch_size = 2;
    return run_performance_priority(net, data, cfg);
  };
  auto a = run(), b = run();
  EXPECT_EQ(alpha_to_json(a.alpha, SearchMode::PerformancePriority).dump(),
            alpha_to_json(b.alpha, SearchMode::PerformancePriority).dump());
  EXPECT_EQ(a.log.to_csv(), b.log.to_csv());
  // Some scales moved, but not all: non-sampled branches see no gradient
  // apart from weight decay.
  std::size_t moved = 0, total = 0;
  for (const auto& layer : a.alpha.values)
    for (const auto& ch : layer)
      for (double v : ch) moved += std::abs(v - 1.0) > 1e-5, ++total;
  EXPECT_GT(moved, 0u);
  EXPECT_LT(moved, total);
}

TEST(Search, ModeMismatchIsRejected) {
  const auto data = generate(tiny_task());
  SuperNet net(desk_classifier(4, 1, {6, 6, 6}, 4), default_subkernel_set(), SearchMode::CostPriority, 1);
  SearchConfig cfg;
  cfg.mode = SearchMode::PerformancePriority;
  EXPECT_THROW(run_search(net, data, cfg), ConfigError);
  cfg.mode = SearchMode::CostPriority;
  cfg.beta = std::vector<double>{1.0};
  EXPECT_THROW(run_search(net, data, cfg), ConfigError);
}
