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
#include <fstream>
#include <numeric>
#include <random>

#include "rpd/encoders.hpp"
#include "rpd/error.hpp"
#include "rpd/gradcheck.hpp"
#include "test_util.hpp"

namespace rpd::enc {
namespace {

using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using rpd::testing::random_cloud;
using rpd::testing::random_tensor;

template <typename Fn>
void expect_error(ErrorCode code, Fn&& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

double norm(const Tensor& t, std::size_t row = 0) {
  double n = 0;
  for (float v : t.row(row)) n += double(v) * v;
  return std::sqrt(n);
}

const std::vector<std::string> kNames{"sphere", "cube", "square_pyramid", "torus ring"};

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("rpd_enc_" + name);
}

geo::PointCloud unit_cloud(std::size_t n, std::mt19937_64& rng) {
  return geo::normalize_to_unit_sphere(random_cloud(n, rng));
}

TEST(Tokenize, SplitsOnUnderscoreAndSpace) {
  EXPECT_EQ(tokenize("square_pyramid"), (std::vector<std::string>{"square", "pyramid"}));
  EXPECT_EQ(tokenize("torus ring"), (std::vector<std::string>{"torus", "ring"}));
  EXPECT_EQ(tokenize("cube"), (std::vector<std::string>{"cube"}));
}

TEST(Architecture, DefaultWidths) {
  const auto s = student_architecture();
  EXPECT_EQ(s.shared, (std::vector<std::size_t>{3, 64, 64}));
  EXPECT_EQ(s.head, (std::vector<std::size_t>{64, 32}));
  EXPECT_EQ(s.feature_dim(), 64u);
  const auto t = point_teacher_architecture();
  EXPECT_EQ(t.shared, (std::vector<std::size_t>{3, 128, 128}));
  EXPECT_EQ(t.embed_dim(), 32u);
  const auto i = image_teacher_architecture();
  EXPECT_EQ(i.shared, (std::vector<std::size_t>{1024, 128}));
  EXPECT_EQ(i.head, (std::vector<std::size_t>{128, 32}));
  const auto x = text_architecture(kNames);
  EXPECT_EQ(x.vocab, (std::vector<std::string>{"cube", "pyramid", "ring", "sphere", "square", "torus"}));
  EXPECT_EQ(x.feature_dim(), 32u);
  EXPECT_EQ(Architecture::from_json(x.to_json()), x);
}

TEST(Architecture, ParameterCountsMatchWidths) {
  const auto w = init_weights(student_architecture(), 1);
  EXPECT_EQ(w.parameter_count(), (3 * 64 + 64) + (64 * 64 + 64) + (64 * 32 + 32));
  EXPECT_EQ(w.head_parameter_count(), 64u * 32 + 32);
  const auto t = init_weights(text_architecture(kNames), 1);
  EXPECT_EQ(t.parameter_count(), 6u * 32 + 32 * 32);
}

class StudentFixture : public ::testing::Test {
 protected:
  EncoderWeights w = init_weights(student_architecture(), 5);
  std::mt19937_64 rng{17};
};

TEST_F(StudentFixture, EmbeddingsHaveUnitNorm) {
  for (int i = 0; i < 50; ++i) {
    const auto pc = random_cloud(1 + i * 7, rng);
    EXPECT_NEAR(norm(encode_point_teacher(pc, w)), 1.0, 1e-5);
    PromptParams p = PromptParams::zeros(i % 4, 64, 0, 32);
    p.point_tokens = random_tensor({std::size_t(i % 4), 64}, rng, -2.0f, 2.0f);
    if (i % 4 == 0) p.point_tokens = Tensor();
    EXPECT_NEAR(norm(encode_student(pc, p, w)), 1.0, 1e-5);
  }
}

TEST_F(StudentFixture, PermutationInvariantBitExact) {
  PromptParams p;
  p.point_tokens = random_tensor({4, 64}, rng);
  for (int i = 0; i < 20; ++i) {
    auto pc = random_cloud(64, rng);
    const Tensor a = encode_student(pc, p, w);
    std::shuffle(pc.points.begin(), pc.points.end(), rng);
    EXPECT_EQ(a, encode_student(pc, p, w));
  }
}

TEST_F(StudentFixture, NoTokensMatchesBaseline) {
  for (int i = 0; i < 20; ++i) {
    const auto pc = random_cloud(100, rng);
    EXPECT_EQ(encode_student(pc, PromptParams::zeros(0, 64, 3, 32), w), encode_point_teacher(pc, w));
  }
}

TEST_F(StudentFixture, TokensBelowFeaturesHaveNoEffect) {
  // ReLU features are non-negative, so all-negative tokens never win the pool.
  PromptParams p;
  p.point_tokens = random_tensor({10, 64}, rng, -3.0f, -0.1f);
  const auto pc = random_cloud(80, rng);
  EXPECT_EQ(encode_student(pc, p, w), encode_point_teacher(pc, w));
}

TEST_F(StudentFixture, BatchedMatchesSingleSample) {
  std::vector<geo::PointCloud> clouds;
  for (int i = 0; i < 9; ++i) clouds.push_back(random_cloud(20 + i, rng));
  const Tensor tokens = random_tensor({3, 64}, rng, 0.0f, 1.0f);
  const Tensor z = embed_points(w, clouds, tokens, 4);
  PromptParams p;
  p.point_tokens = tokens;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const Tensor single = encode_student(clouds[i], p, w);
    for (std::size_t e = 0; e < 32; ++e) EXPECT_NEAR(z.at(i, e), single[e], 1e-6);
  }
}

TEST_F(StudentFixture, WrongTokenWidthIsArchitectureMismatch) {
  PromptParams p;
  p.point_tokens = random_tensor({2, 32}, rng);
  expect_error(ErrorCode::ArchitectureMismatch, [&] { encode_student(random_cloud(10, rng), p, w); });
}

TEST_F(StudentFixture, OpCountDiffersOnlyByTokenRows) {
  const auto pc = random_cloud(64, rng);
  const Tensor tokens = random_tensor({10, 64}, rng);
  auto ops = [&](bool with_tokens) {
    Tape tape;
    const auto be = bind(tape, w, false);
    std::vector<std::size_t> offsets{0, pc.size()};
    Var pts = tape.constant(geo::to_tensor(pc));
    Var tok = with_tokens ? tape.constant(tokens) : Var{};
    point_forward(be, pts, offsets, tok);
    return tape.op_count();
  };
  EXPECT_EQ(ops(true), ops(false));
}

TEST_F(StudentFixture, CosineGradientWrtTokensPassesFiniteDifferences) {
  int passed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto pc = random_cloud(30, rng);
    const Tensor target = rpd::testing::random_unit_rows(1, 32, rng);
    // Token 0 wins about half the channels, token 1 stays clear below; both
    // keep a margin so no probe crosses a pooling tie.
    const Tensor pooled = pooled_point_features(w, std::span(&pc, 1));
    Tensor tokens(Shape{2, 64});
    std::uniform_real_distribution<float> gap(0.05f, 0.3f);
    std::bernoulli_distribution above(0.5);
    for (std::size_t c = 0; c < 64; ++c) {
      tokens.at(0, c) = pooled.at(0, c) + (above(rng) ? gap(rng) : -gap(rng));
      tokens.at(1, c) = pooled.at(0, c) - 0.35f - gap(rng);
    }
    const diff::ScalarFn f = [&](Tape& tape, Var tok) {
      const auto be = bind(tape, w, false);
      std::vector<std::size_t> offsets{0, pc.size()};
      Var pts = tape.constant(geo::to_tensor(pc));
      return diff::sum(diff::dot_rows(point_forward(be, pts, offsets, tok), tape.constant(target)));
    };
    passed += diff::finite_diff_check(f, tokens, 1e-3, 1e-3).passed ? 1 : 0;
  }
  EXPECT_EQ(passed, 20);
}

TEST(ImageEncoder, UnitNormAndPermutationInvariance) {
  const auto w = init_weights(image_teacher_architecture(), 3);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10; ++i) {
    auto pc = unit_cloud(200, rng);
    const Tensor a = encode_image_teacher(proj::project_depth(pc), w);
    EXPECT_NEAR(norm(a), 1.0, 1e-5);
    std::shuffle(pc.points.begin(), pc.points.end(), rng);
    EXPECT_EQ(a, encode_image_teacher(proj::project_depth(pc), w));
  }
}

TEST(ImageEncoder, EmptyRenderGivesFixedFiniteEmbedding) {
  const auto w = init_weights(image_teacher_architecture(), 3);
  proj::DepthImageSet blank;
  blank.resolution = 32;
  blank.directions = proj::default_views(6);
  blank.depth.assign(6 * 32 * 32, 0.0f);
  const Tensor a = encode_image_teacher(blank, w);
  for (float v : a.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(norm(a), 1.0, 1e-5);
  EXPECT_EQ(a, encode_image_teacher(blank, w));
}

TEST(ImageEncoder, WrongViewCountIsShapeMismatch) {
  const auto w = init_weights(image_teacher_architecture(), 3);
  std::mt19937_64 rng(5);
  const auto d = proj::project_depth(unit_cloud(50, rng), 32, 4);
  expect_error(ErrorCode::ShapeMismatch, [&] { encode_image_teacher(d, w); });
  const auto small = proj::project_depth(unit_cloud(50, rng), 16, 6);
  expect_error(ErrorCode::ShapeMismatch, [&] { encode_image_teacher(small, w); });
}

class TextFixture : public ::testing::Test {
 protected:
  EncoderWeights w = init_weights(text_architecture(kNames), 9);
  std::mt19937_64 rng{21};
};

TEST_F(TextFixture, RowsHaveUnitNorm) {
  const Tensor z = encode_text(kNames, random_tensor({3, 32}, rng), w);
  ASSERT_EQ(z.shape(), (Shape{4, 32}));
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(norm(z, c), 1.0, 1e-5);
}

TEST_F(TextFixture, EmptyContextUsesTokensAlone) {
  const Tensor z = encode_text(kNames, Tensor(), w);
  // Independent reference: mean of word embeddings, projected, normalized.
  const auto& vocab = w.arch.vocab;
  for (std::size_t c = 0; c < kNames.size(); ++c) {
    const auto words = tokenize(kNames[c]);
    std::vector<double> mean(32, 0.0);
    for (const auto& word : words) {
      const std::size_t id = std::find(vocab.begin(), vocab.end(), word) - vocab.begin();
      for (std::size_t e = 0; e < 32; ++e) mean[e] += w.embedding.at(id, e) / double(words.size());
    }
    std::vector<double> out(32, 0.0);
    for (std::size_t i = 0; i < 32; ++i) {
      for (std::size_t o = 0; o < 32; ++o) out[o] += mean[i] * w.head[0].weight.at(i, o);
    }
    double n = 0;
    for (double v : out) n += v * v;
    n = std::sqrt(n);
    for (std::size_t o = 0; o < 32; ++o) EXPECT_NEAR(z.at(c, o), out[o] / n, 1e-5);
  }
}

TEST_F(TextFixture, ContextPerturbationMovesEveryClass) {
  Tensor ctx = random_tensor({3, 32}, rng);
  const Tensor a = encode_text(kNames, ctx, w);
  ctx.at(1, 7) += 0.5f;
  const Tensor b = encode_text(kNames, ctx, w);
  for (std::size_t c = 0; c < kNames.size(); ++c) {
    double diff = 0;
    for (std::size_t e = 0; e < 32; ++e) diff += std::abs(a.at(c, e) - b.at(c, e));
    EXPECT_GT(diff, 1e-4) << "class " << c;
  }
}

TEST_F(TextFixture, UnknownWordRejected) {
  const std::vector<std::string> names{"sphere", "banana"};
  expect_error(ErrorCode::UnknownToken, [&] { encode_text(names, Tensor(), w); });
}

TEST(NearestClass, TiesGoToLowerIndex) {
  const Tensor zt = Tensor::matrix(3, 2, {0, 1, 0.6f, 0.8f, 0.6f, 0.8f});
  const Tensor z = Tensor::matrix(2, 2, {0.6f, 0.8f, 0, 1});
  EXPECT_EQ(nearest_class(z, zt), (std::vector<std::size_t>{1, 0}));
}

TEST(Weights, InitIsDeterministic) {
  const auto a = init_weights(point_teacher_architecture(), 42);
  const auto b = init_weights(point_teacher_architecture(), 42);
  const auto c = init_weights(point_teacher_architecture(), 43);
  EXPECT_EQ(a.content_hash(), b.content_hash());
  EXPECT_NE(a.content_hash(), c.content_hash());
}

TEST(Weights, RoundTripThroughFile) {
  for (const auto& arch : {student_architecture(), image_teacher_architecture(), text_architecture(kNames)}) {
    auto w = init_weights(arch, 7);
    w.frozen = true;
    const auto path = temp_path(arch.name + ".rpdt");
    save_weights(w, path);
    const auto back = load_weights(path);
    EXPECT_EQ(back.arch, w.arch);
    EXPECT_TRUE(back.frozen);
    EXPECT_EQ(back.content_hash(), w.content_hash());
    std::filesystem::remove(path);
  }
}

TEST(Weights, TruncatedFileIsCorrupt) {
  const auto w = init_weights(student_architecture(), 7);
  const auto path = temp_path("trunc.rpdt");
  save_weights(w, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  expect_error(ErrorCode::CorruptCheckpoint, [&] { load_weights(path); });
  std::filesystem::remove(path);
}

TEST(Weights, FlippedPayloadByteIsCorrupt) {
  const auto w = init_weights(student_architecture(), 7);
  const auto path = temp_path("flip.rpdt");
  save_weights(w, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-5, std::ios::end);
    char byte = 0;
    f.read(&byte, 1);
    f.seekp(-5, std::ios::end);
    byte = static_cast<char>(byte ^ 0x40);
    f.write(&byte, 1);
  }
  expect_error(ErrorCode::CorruptCheckpoint, [&] { load_weights(path); });
  std::filesystem::remove(path);
}

TEST(Weights, ForeignVersionRejected) {
  const auto w = init_weights(student_architecture(), 7);
  const auto path = temp_path("version.rpdt");
  save_weights(w, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('9');
  }
  expect_error(ErrorCode::VersionMismatch, [&] { load_weights(path); });
  std::filesystem::remove(path);
  expect_error(ErrorCode::IoError, [&] { load_weights(temp_path("does_not_exist.rpdt")); });
}

TEST(Weights, LoadingIntoWrongArchitectureIsRejected) {
  auto file = init_weights(student_architecture(), 7).to_file();
  file.tensors[1].second = Tensor(Shape{3, 65});
  expect_error(ErrorCode::ArchitectureMismatch, [&] { EncoderWeights::from_file(file); });
}

TEST(Counters, CountSamples) {
  const auto w = init_weights(student_architecture(), 7);
  std::mt19937_64 rng(3);
  std::vector<geo::PointCloud> clouds;
  for (int i = 0; i < 5; ++i) clouds.push_back(random_cloud(16, rng));
  reset_counters();
  embed_points(w, clouds);
  EXPECT_EQ(counters().point_forwards, 5u);
  EXPECT_EQ(counters().image_forwards, 0u);
  EXPECT_EQ(counters().text_forwards, 0u);
}

// Small-scale bootstrap: cheap enough for the unit suite, and covers the
// determinism and freeze contracts.
geo::Dataset small_train() {
  geo::SyntheticConfig cfg;
  cfg.train_per_class = 12;
  cfg.test_per_class = 1;
  cfg.points = 128;
  cfg.seed = 3;
  return geo::make_synthetic_split(cfg).train;
}

TEST(Bootstrap, SameSeedSameMetricsAndWeights) {
  const auto train = small_train();
  BootstrapConfig cfg;
  cfg.max_epochs = 6;
  cfg.patience = 10;
  const auto text = init_weights(text_architecture(train.class_names), 1);
  const auto a = bootstrap_point_encoder(train, student_architecture(), text, cfg, 5);
  const auto b = bootstrap_point_encoder(train, student_architecture(), text, cfg, 5);
  EXPECT_EQ(a.weights.content_hash(), b.weights.content_hash());
  ASSERT_EQ(a.metrics.epoch_loss.size(), b.metrics.epoch_loss.size());
  for (std::size_t e = 0; e < a.metrics.epoch_loss.size(); ++e) {
    EXPECT_NEAR(a.metrics.epoch_loss[e], b.metrics.epoch_loss[e], 1e-6);
    EXPECT_NEAR(a.metrics.point_accuracy[e], b.metrics.point_accuracy[e], 1e-6);
  }
  EXPECT_TRUE(a.weights.frozen);
}

TEST(Bootstrap, LossDecreasesAndTextIsLeftAlone) {
  const auto train = small_train();
  BootstrapConfig cfg;
  cfg.max_epochs = 6;
  cfg.patience = 10;
  const auto text = init_weights(text_architecture(train.class_names), 1);
  const std::string before = text.content_hash();
  const auto r = bootstrap_point_encoder(train, student_architecture(), text, cfg, 5);
  EXPECT_EQ(text.content_hash(), before);
  ASSERT_GE(r.metrics.epoch_loss.size(), 2u);
  EXPECT_LT(r.metrics.epoch_loss.back(), r.metrics.epoch_loss.front());
}

}  // namespace
}  // namespace rpd::enc
