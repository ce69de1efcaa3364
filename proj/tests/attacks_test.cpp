// Copyright 2026 The RobustPrompt3D Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "rpd/attacks.hpp"
#include "rpd/error.hpp"
#include "test_util.hpp"

namespace rpd::atk {
namespace {

using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using geo::PointCloud;
using rpd::testing::random_cloud;
using rpd::testing::random_unit_rows;

template <typename Fn>
void expect_error(ErrorCode code, Fn&& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

double max_abs_diff(const PointCloud& a, const PointCloud& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (int c = 0; c < 3; ++c) m = std::max(m, std::abs(double(a.points[i][c]) - b.points[i][c]));
  }
  return m;
}

double mean_knn(const PointCloud& pc, std::size_t k) {
  const auto d = geo::knn_mean_distance(pc, k);
  double s = 0;
  for (double v : d) s += v;
  return s / double(d.size());
}

// Randomly initialized student scored against random class directions. Not
// accurate, but differentiable and deterministic, which is all the
// feasibility properties need. Labels are the model's own predictions so
// every sample starts correctly classified.
class AttackFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(31);
    for (int i = 0; i < 24; ++i) {
      auto pc = geo::normalize_to_unit_sphere(random_cloud(64, rng));
      pc.id = "s" + std::to_string(i);
      clouds.push_back(pc);
    }
    labels = model.predict(clouds);
    for (std::size_t i = 0; i < clouds.size(); ++i) clouds[i].label = labels[i];
  }

  enc::EncoderWeights weights = enc::init_weights(enc::student_architecture(), 8);
  Tensor z_text = [] {
    std::mt19937_64 rng(9);
    return random_unit_rows(4, 32, rng);
  }();
  EmbeddingClassifier model{weights, Tensor(), z_text, 0.07f};
  std::vector<PointCloud> clouds;
  std::vector<std::size_t> labels;
};

TEST_F(AttackFixture, PgdZeroEpsilonIsIdentity) {
  AttackBudget b = default_budget(AttackKind::Pgd);
  b.epsilon = 0.0f;
  const auto res = pgd_attack(model, clouds, labels, b);
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    EXPECT_EQ(res[i].adversarial, clouds[i]);
    EXPECT_FALSE(res[i].success);
  }
}

TEST_F(AttackFixture, PgdRespectsLinfBound) {
  for (float eps : {0.01f, 0.05f, 0.2f}) {
    AttackBudget b = default_budget(AttackKind::Pgd);
    b.epsilon = eps;
    b.seed = 4;
    const auto res = pgd_attack(model, clouds, labels, b);
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      ASSERT_EQ(res[i].adversarial.size(), clouds[i].size());
      EXPECT_LE(max_abs_diff(res[i].adversarial, clouds[i]), eps + 1e-6);
      EXPECT_NEAR(res[i].budget_used, geo::linf_distance(res[i].adversarial, clouds[i]), 1e-6);
      EXPECT_EQ(res[i].adversarial.label, clouds[i].label);
    }
  }
}

TEST_F(AttackFixture, PgdFlipsSomePredictions) {
  const auto res = pgd_attack(model, clouds, labels, default_budget(AttackKind::Pgd));
  const auto flipped = std::count_if(res.begin(), res.end(), [](const auto& r) { return r.success; });
  EXPECT_GT(flipped, 0);
}

TEST_F(AttackFixture, BatchedEqualsSingleSample) {
  AttackBudget b = default_budget(AttackKind::Pgd);
  b.seed = 12;
  const auto batch = pgd_attack(model, std::span(clouds).first(1), std::span(labels).first(1), b);
  const auto single = pgd_attack(model, clouds[0], labels[0], b);
  EXPECT_EQ(batch[0].adversarial, single.adversarial);
}

TEST_F(AttackFixture, AttacksAreDeterministic) {
  for (auto kind : {AttackKind::Pgd, AttackKind::Perturb, AttackKind::Knn, AttackKind::AddCd, AttackKind::AddHd,
                    AttackKind::Drop}) {
    AttackBudget b = default_budget(kind, 64);
    b.steps = std::min<std::size_t>(b.steps, 5);
    b.seed = 77;
    const auto a = run_attack(model, std::span(clouds).first(6), b);
    const auto c = run_attack(model, std::span(clouds).first(6), b);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].adversarial, c[i].adversarial) << attack_name(kind);
  }
}

TEST_F(AttackFixture, InputsAreNotMutated) {
  const auto before = clouds;
  for (auto kind : {AttackKind::Pgd, AttackKind::Perturb, AttackKind::Knn, AttackKind::AddCd, AttackKind::AddHd,
                    AttackKind::Drop}) {
    AttackBudget b = default_budget(kind, 64);
    b.steps = std::min<std::size_t>(b.steps, 3);
    run_attack(model, clouds, b);
    EXPECT_EQ(clouds, before) << attack_name(kind);
  }
}

TEST_F(AttackFixture, PerturbZeroStepsIsIdentity) {
  AttackBudget b = default_budget(AttackKind::Perturb);
  b.steps = 0;
  for (const auto& r : perturb_attack(model, clouds, labels, b)) EXPECT_EQ(r.budget_used, 0.0);
  const auto res = perturb_attack(model, clouds, labels, b);
  for (std::size_t i = 0; i < clouds.size(); ++i) EXPECT_EQ(res[i].adversarial, clouds[i]);
  b.kind = AttackKind::Knn;
  const auto knn = knn_attack(model, clouds, labels, b);
  for (std::size_t i = 0; i < clouds.size(); ++i) EXPECT_EQ(knn[i].adversarial, clouds[i]);
}

TEST_F(AttackFixture, PerturbHugePenaltyStaysPut) {
  AttackBudget b = default_budget(AttackKind::Perturb);
  b.beta = 1e6f;
  const auto res = perturb_attack(model, clouds, labels, b);
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    EXPECT_LT(geo::chamfer_distance(res[i].adversarial, clouds[i]), 1e-4);
    EXPECT_FALSE(res[i].success);
  }
}

TEST_F(AttackFixture, PenaltyBudgetsMatchGeometryOracle) {
  for (auto kind : {AttackKind::Perturb, AttackKind::Knn}) {
    for (float cap : {-1.0f, 0.01f, 0.002f}) {
      AttackBudget b = default_budget(kind);
      b.epsilon = cap;
      const auto res = run_attack(model, clouds, b);
      for (std::size_t i = 0; i < clouds.size(); ++i) {
        ASSERT_EQ(res[i].adversarial.size(), clouds[i].size());
        const double cd = geo::chamfer_distance(res[i].adversarial, clouds[i]);
        EXPECT_NEAR(res[i].budget_used, cd, 1e-6);
        if (cap >= 0.0f) EXPECT_LE(cd, cap + 1e-6);
      }
    }
  }
}

TEST_F(AttackFixture, KnnKeepsClustersTogether) {
  const auto res = knn_attack(model, clouds, labels, default_budget(AttackKind::Knn));
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    EXPECT_LE(mean_knn(res[i].adversarial, 5), 2.0 * mean_knn(clouds[i], 5));
  }
}

TEST_F(AttackFixture, KnnRejectsLargeK) {
  AttackBudget b = default_budget(AttackKind::Knn);
  b.k_nn = 64;
  expect_error(ErrorCode::KTooLarge, [&] { knn_attack(model, clouds, labels, b); });
}

TEST_F(AttackFixture, AddKeepsOriginalsAndCount) {
  for (auto kind : {AttackKind::AddCd, AttackKind::AddHd}) {
    for (std::size_t n_add : {1u, 16u, 64u}) {
      AttackBudget b = default_budget(kind);
      b.count = n_add;
      b.seed = 5;
      const auto res = add_attack(model, clouds, labels, b);
      for (std::size_t i = 0; i < clouds.size(); ++i) {
        const auto& adv = res[i].adversarial;
        ASSERT_EQ(adv.size(), clouds[i].size() + n_add);
        EXPECT_TRUE(std::equal(clouds[i].points.begin(), clouds[i].points.end(), adv.points.begin()));
        PointCloud added;
        added.points.assign(adv.points.begin() + clouds[i].size(), adv.points.end());
        const double oracle = kind == AttackKind::AddHd ? geo::directed_hausdorff(added, clouds[i])
                                                        : geo::directed_chamfer(added, clouds[i]);
        EXPECT_NEAR(res[i].budget_used, oracle, 1e-6);
        EXPECT_LE(oracle, b.epsilon + 1e-6);
      }
    }
  }
}

TEST_F(AttackFixture, AddRejectsZeroCount) {
  AttackBudget b = default_budget(AttackKind::AddCd);
  b.count = 0;
  expect_error(ErrorCode::CountOutOfRange, [&] { add_attack(model, clouds, labels, b); });
}

TEST_F(AttackFixture, DropCounts) {
  EXPECT_EQ(drop_attack(model, clouds[0], labels[0], 0).adversarial, clouds[0]);
  for (std::size_t n : {1u, 12u, 63u}) {
    const auto r = drop_attack(model, clouds[0], labels[0], n);
    EXPECT_EQ(r.adversarial.size(), clouds[0].size() - n);
    EXPECT_EQ(r.budget_used, double(n));
    for (const auto& p : r.adversarial.points) {
      EXPECT_NE(std::find(clouds[0].points.begin(), clouds[0].points.end(), p), clouds[0].points.end());
    }
  }
  expect_error(ErrorCode::DropTooLarge, [&] { drop_attack(model, clouds[0], labels[0], 64); });
}

// Two-class model whose class-0 logit is the squared norm of three chosen
// rows; every other point has zero loss gradient.
class CraftedModel final : public Classifier {
 public:
  explicit CraftedModel(std::vector<std::size_t> rows) : rows_(std::move(rows)) {}
  std::size_t num_classes() const override { return 2; }
  Var logits(Tape& tape, Var points, std::span<const std::size_t> offsets) const override {
    std::vector<Var> per_cloud;
    Var out;
    for (std::size_t g = 0; g + 1 < offsets.size(); ++g) {
      std::vector<std::size_t> idx;
      for (auto r : rows_) idx.push_back(offsets[g] + r);
      Var sel = diff::gather_rows(points, idx);
      Var s = diff::reshape(diff::sum(diff::mul(sel, sel)), Shape{1, 1});
      Var row = diff::matmul(s, tape.constant(Tensor::matrix(1, 2, {1, 0})));
      out = g == 0 ? row : diff::concat_rows(out, row);
    }
    return out;
  }

 private:
  std::vector<std::size_t> rows_;
};

TEST(DropAttack, RemovesExactlyTheGradientCarriers) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    PointCloud pc = random_cloud(40, rng, -0.3f, 0.3f);
    std::vector<std::size_t> chosen{3, 17, 29};
    std::shuffle(pc.points.begin(), pc.points.end(), rng);
    // Carriers sit well outside the bulk so the centroid lies inward.
    pc.points[3] = {0.9f, 0.1f, 0.0f};
    pc.points[17] = {-0.2f, 0.85f, 0.1f};
    pc.points[29] = {0.0f, -0.3f, -0.9f};
    CraftedModel model(chosen);
    const auto r = drop_attack(model, pc, 0, 3);
    ASSERT_EQ(r.adversarial.size(), 37u);
    for (auto c : chosen) {
      EXPECT_EQ(std::find(r.adversarial.points.begin(), r.adversarial.points.end(), pc.points[c]),
                r.adversarial.points.end());
    }
  }
}

class NonDifferentiable final : public Classifier {
 public:
  std::size_t num_classes() const override { return 2; }
  bool differentiable() const override { return false; }
  Var logits(Tape& tape, Var, std::span<const std::size_t> offsets) const override {
    return tape.constant(Tensor(Shape{offsets.size() - 1, 2}));
  }
};

TEST(Attacks, RequireGradients) {
  NonDifferentiable model;
  std::mt19937_64 rng(2);
  const PointCloud pc = random_cloud(10, rng);
  expect_error(ErrorCode::NonDifferentiableModel,
               [&] { pgd_attack(model, pc, 0, default_budget(AttackKind::Pgd)); });
  expect_error(ErrorCode::NonDifferentiableModel, [&] { drop_attack(model, pc, 0, 2); });
}

TEST(Budget, JsonRoundTripAndDefaults) {
  for (auto kind : {AttackKind::Pgd, AttackKind::Perturb, AttackKind::Knn, AttackKind::AddCd, AttackKind::AddHd,
                    AttackKind::Drop}) {
    AttackBudget b = default_budget(kind);
    b.seed = 123456789012345ULL;
    EXPECT_EQ(AttackBudget::from_json(b.to_json()), b);
    EXPECT_EQ(attack_from_name(attack_name(kind)), kind);
  }
  const auto pgd = default_budget(AttackKind::Pgd);
  EXPECT_FLOAT_EQ(pgd.epsilon, 0.05f);
  EXPECT_EQ(pgd.steps, 20u);
  EXPECT_FLOAT_EQ(pgd.step_size, 0.01f);
  EXPECT_EQ(default_budget(AttackKind::Drop, 256).count, 50u);
  EXPECT_EQ(default_budget(AttackKind::AddCd).count, 64u);
}

TEST_F(AttackFixture, ArchiveRoundTripsBitExact) {
  std::vector<AttackBudget> budgets{default_budget(AttackKind::Pgd), default_budget(AttackKind::Drop, 64)};
  budgets[0].steps = 3;
  geo::Dataset data{{"a", "b", "c", "d"}, std::vector<PointCloud>(clouds.begin(), clouds.begin() + 5)};
  const auto archive = transfer_attack_set(model, "surrogate-7", data, budgets);
  ASSERT_EQ(archive.entries.size(), 10u);
  EXPECT_EQ(archive.attack_names(), (std::vector<std::string>{"pgd", "drop"}));
  const auto dir = std::filesystem::temp_directory_path() / "rpd_archive_test";
  std::filesystem::create_directories(dir);
  write_archive(archive, dir);
  const auto back = read_archive(dir);
  EXPECT_EQ(back.class_names, archive.class_names);
  EXPECT_EQ(back.entries, archive.entries);
  EXPECT_EQ(back.entries[0].surrogate_id, "surrogate-7");
  std::filesystem::remove_all(dir);
}

TEST_F(AttackFixture, ZeroBudgetArchiveEntriesClassifyLikeOriginals) {
  AttackBudget b = default_budget(AttackKind::Pgd);
  b.epsilon = 0.0f;
  geo::Dataset data{{"a", "b", "c", "d"}, clouds};
  const auto archive = transfer_attack_set(model, "self", data, std::span(&b, 1));
  EXPECT_EQ(model.predict(archive.clouds_for("pgd")), model.predict(clouds));
}

TEST(Srs, CountsPermutationAndSeed) {
  std::mt19937_64 rng(50);
  const PointCloud pc = random_cloud(101, rng);
  for (float ratio : {0.1f, 0.5f, 0.73f, 1.0f}) {
    const auto out = srs_defense(pc, ratio, 9);
    EXPECT_EQ(out.size(), static_cast<std::size_t>(std::lround(ratio * 101)));
    EXPECT_EQ(out, srs_defense(pc, ratio, 9));
    for (const auto& p : out.points) EXPECT_NE(std::find(pc.points.begin(), pc.points.end(), p), pc.points.end());
  }
  auto full = srs_defense(pc, 1.0f, 3).points;
  auto orig = pc.points;
  std::sort(full.begin(), full.end());
  std::sort(orig.begin(), orig.end());
  EXPECT_EQ(full, orig);
  EXPECT_NE(srs_defense(pc, 0.5f, 1), srs_defense(pc, 0.5f, 2));
  expect_error(ErrorCode::InvalidArgument, [&] { srs_defense(pc, 0.0f, 1); });
}

TEST(Sor, RemovesFarPointOnly) {
  PointCloud pc;
  for (int i = 0; i < 10; ++i) pc.points.push_back({0.01f * i, 0.005f * (i % 3), 0.0f});
  pc.points.push_back({5.0f, 0.0f, 0.0f});
  const auto out = sor_defense(pc, 2, 1.0f);
  ASSERT_EQ(out.size(), 10u);
  EXPECT_TRUE(std::equal(out.points.begin(), out.points.end(), pc.points.begin()));
}

TEST(Sor, IdenticalPointsKeptAndSubset) {
  PointCloud same;
  same.points.assign(12, {0.3f, 0.3f, 0.3f});
  EXPECT_EQ(sor_defense(same, 3, 1.1f).size(), 12u);
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud pc = random_cloud(80, rng);
    const auto out = sor_defense(srs_defense(pc, 0.6f, trial), 2, 1.1f);
    EXPECT_GE(out.size(), 1u);
    for (const auto& p : out.points) EXPECT_NE(std::find(pc.points.begin(), pc.points.end(), p), pc.points.end());
  }
  expect_error(ErrorCode::KTooLarge, [&] { sor_defense(same, 12, 1.0f); });
}

}  // namespace
}  // namespace rpd::atk
