#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "stal/error.hpp"
#include "stal/evaluation.hpp"
#include "stal/synth.hpp"

using namespace stal;

namespace {

TransitionPoint at(double frame, double strength = 1.0) {
  return {frame, frame, TransitionKind::inflection, strength};
}

DemarcationSet truth(std::vector<std::size_t> frames, std::vector<std::string> names = {}) {
  DemarcationSet d;
  for (std::size_t i = 0; i < frames.size(); ++i)
    d.labels.push_back({names.empty() ? "t" + std::to_string(i + 1) : names[i], frames[i]});
  return d;
}

ClipMatching clip(std::vector<TransitionPoint> p, DemarcationSet t, double tol = 5.0) {
  EvalConfig c;
  c.match_tolerance = tol;
  return match_transitions(p, t, c);
}

// Interpolated precision at rank i taken as the max over all later ranks.
double brute_ap(std::vector<std::pair<double, bool>> ranked, std::size_t truths) {
  std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.first > b.first; });
  double ap = 0.0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (!ranked[i].second) continue;
    double best = 0.0;
    for (std::size_t j = i; j < ranked.size(); ++j) {
      std::size_t tp = 0;
      for (std::size_t k = 0; k <= j; ++k) tp += ranked[k].second;
      best = std::max(best, double(tp) / double(j + 1));
    }
    ap += best / double(truths);
  }
  return 100.0 * ap;
}

}  // namespace

TEST(Match, Examples) {
  const auto m = clip({at(102)}, truth({100}));
  ASSERT_TRUE(m.predictions[0].truth);
  EXPECT_EQ(*m.predictions[0].truth, 0u);

  const auto miss = clip({at(110)}, truth({100}));
  EXPECT_FALSE(miss.predictions[0].truth);
  const auto rows = score_partition("all", {miss}, EvalConfig{});
  EXPECT_EQ(rows[0].fp, 1u);
  EXPECT_EQ(rows[0].fn, 1u);

  const auto greedy = clip({at(99, 1.0), at(103, 2.0)}, truth({100}));
  EXPECT_FALSE(greedy.predictions[0].truth);
  EXPECT_TRUE(greedy.predictions[1].truth);
}

TEST(Match, NearestThenEarlierTruth) {
  const auto m = clip({at(105)}, truth({100, 110}));
  EXPECT_EQ(*m.predictions[0].truth, 0u);
  const auto n = clip({at(107)}, truth({100, 110}));
  EXPECT_EQ(*n.predictions[0].truth, 1u);
  const auto both = clip({at(105, 2.0), at(106, 1.0)}, truth({100, 110}));
  EXPECT_EQ(*both.predictions[0].truth, 0u);
  EXPECT_EQ(*both.predictions[1].truth, 1u);
  EXPECT_FALSE(clip({at(105)}, truth({100}), 4.0).predictions[0].truth);
  EXPECT_TRUE(clip({at(105)}, truth({100}), 5.0).predictions[0].truth);
}

TEST(Latency, Examples) {
  auto m = clip({at(102)}, truth({100}));
  m.fps = 60.0;
  EXPECT_NEAR(*localization_latency({m}), 33.33, 0.01);
  EXPECT_DOUBLE_EQ(*localization_latency({m}), 2000.0 / 60.0);
  auto exact = clip({at(100)}, truth({100}));
  EXPECT_EQ(*localization_latency({exact}), 0.0);
  auto two = clip({at(101), at(203)}, truth({100, 200}));
  EXPECT_NEAR(*localization_latency({two}), 33.33, 0.01);
  EXPECT_FALSE(localization_latency({clip({at(150)}, truth({100}))}));
}

TEST(AveragePrecision, Examples) {
  EXPECT_EQ(*average_precision({clip({at(100, 3), at(200, 2)}, truth({100, 200}))}), 100.0);
  EXPECT_EQ(*average_precision({clip({}, truth({100, 200}))}), 0.0);
  const auto swept = clip({at(100, 3), at(150, 2), at(200, 1)}, truth({100, 200}));
  EXPECT_NEAR(*average_precision({swept}), 83.33, 0.01);
  EXPECT_DOUBLE_EQ(*average_precision({swept}), 100.0 * (1.0 + 2.0 / 3.0) / 2.0);
  EXPECT_FALSE(average_precision({clip({at(5)}, truth({}))}));
}

TEST(AveragePrecision, MatchesBruteForceEnvelope) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + trial % 15, truths = 1 + trial % 7;
    std::vector<TransitionPoint> p;
    std::vector<std::size_t> t;
    for (std::size_t i = 0; i < truths; ++i) t.push_back(100 * (i + 1));
    for (std::size_t i = 0; i < n; ++i) p.push_back(at(std::floor(u(rng) * 100.0 * double(truths + 1)), u(rng)));
    std::sort(p.begin(), p.end(), [](auto& a, auto& b) { return a.frame < b.frame; });
    const auto m = clip(p, truth(t), 8.0);
    std::vector<std::pair<double, bool>> ranked;
    for (const auto& s : m.predictions) ranked.push_back({s.strength, s.truth.has_value()});
    EXPECT_NEAR(*average_precision({m}), brute_ap(ranked, truths), 1e-9);

    // Strictly monotone strength transforms leave the ranking and AP alone.
    auto q = p;
    for (auto& x : q) x.strength = std::exp(3.0 * x.strength) - 7.0;
    EXPECT_DOUBLE_EQ(*average_precision({clip(q, truth(t), 8.0)}), *average_precision({m}));

    // Counting identities and tolerance monotonicity.
    const auto rows = score_partition("all", {m}, EvalConfig{});
    EXPECT_EQ(rows[0].tp + rows[0].fp, n);
    EXPECT_EQ(rows[0].tp + rows[0].fn, truths);
    EXPECT_LE(clip(p, truth(t), 3.0).true_positives(), m.true_positives());
  }
}

TEST(ScorePartition, PerLabelAndRelabelling) {
  const auto a = clip({at(101, 2), at(199, 1), at(300, 0.5)}, truth({100, 200}, {"start", "end"}));
  const auto b = clip({at(101, 2), at(199, 1), at(300, 0.5)}, truth({100, 200}, {"x", "y"}));
  EXPECT_EQ(*localization_latency({a}), *localization_latency({b}));
  EvalConfig c;
  c.per_label = true;
  const auto rows = score_partition("Train", {a}, c);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].label, "start");
  EXPECT_EQ(rows[1].tp, 1u);
  EXPECT_EQ(rows[1].fp, 1u);
  EXPECT_EQ(*rows[1].ap, 100.0);
  EXPECT_EQ(*rows[0].ap, (*rows[1].ap + *rows[2].ap) / 2.0);
}

TEST(ScorePartition, EmptyPredictions) {
  const auto rows = score_partition("all", {clip({}, truth({10})), clip({}, truth({20, 40}))}, EvalConfig{});
  EXPECT_EQ(*rows[0].ap, 0.0);
  EXPECT_FALSE(rows[0].latency_ms);
  EXPECT_EQ(rows[0].fn, 3u);
}

TEST(EvalConfig, Validation) {
  EvalConfig c;
  c.match_tolerance = -1.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.fps_override = 0.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(RunEval, PartitionsDeterminismAndSkips) {
  ModelConfig mc;
  mc.num_blocks = 1;
  mc.embed_dim = 4;
  mc.cheb_k = 2;
  mc.seed = 1;
  const ModelParams p = init_params(mc);
  std::vector<PoseSequence> train, test;
  for (const auto& c : generate_corpus(4, SamplerConfig{}, 5)) train.push_back(c.sequence);
  for (const auto& c : generate_corpus(3, SamplerConfig{}, 6)) test.push_back(c.sequence);
  test[1].demarcations.reset();

  EvalOptions opt;
  const auto r1 = run_eval({{"Train", train}, {"Test", test}}, p, build_mpii_skeleton(), opt);
  const auto r2 = run_eval({{"Train", train}, {"Test", test}}, p, build_mpii_skeleton(), opt);
  EXPECT_EQ(eval_report_csv(r1), eval_report_csv(r2));
  ASSERT_EQ(r1.skipped.size(), 1u);
  EXPECT_NE(r1.skipped[0].find(test[1].clip_id), std::string::npos);
  ASSERT_EQ(r1.rows.size(), 3u);
  EXPECT_EQ(r1.rows[0].partition, "Train");
  EXPECT_EQ(r1.rows[2].partition, "Avg");
  EXPECT_EQ(r1.rows[2].tp, r1.rows[0].tp + r1.rows[1].tp);
  EXPECT_EQ(eval_report_csv(r1).substr(0, 37), "partition,label,ap,latency_ms,tp,fp,f");
  const std::string table = eval_report_table(r1);
  EXPECT_NE(table.find("mAP (%)"), std::string::npos);
  EXPECT_NE(table.find("Avg"), std::string::npos);
  for (const auto& row : r1.rows) {
    ASSERT_TRUE(row.ap);
    EXPECT_GE(*row.ap, 0.0);
    EXPECT_LE(*row.ap, 100.0);
  }

  const auto single = run_eval({{"all", train}}, p, build_mpii_skeleton(), opt);
  ASSERT_EQ(single.rows.size(), 1u);
  EXPECT_EQ(single.rows[0].partition, "all");
}
