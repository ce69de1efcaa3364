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

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rpd/autodiff.hpp"
#include "rpd/geometry.hpp"
#include "rpd/projection.hpp"
#include "rpd/tensor_io.hpp"

namespace rpd::enc {

enum class EncoderKind { Point, Image, Text };

std::string_view kind_name(EncoderKind kind);

/// Layer widths of one encoder. `shared` is the per-element MLP including
/// its input width; `head` maps the pooled vector to the embedding width.
/// Every layer except the last head layer is followed by ReLU.
struct Architecture {
  std::string name;
  EncoderKind kind = EncoderKind::Point;
  std::vector<std::size_t> shared;
  std::vector<std::size_t> head;
  bool head_bias = true;
  std::size_t views = 0;       // image encoders
  std::size_t resolution = 0;  // image encoders
  std::vector<std::string> vocab;  // text encoders, sorted

  std::size_t embed_dim() const { return head.back(); }
  /// D_f for point encoders, D_e for the text encoder.
  std::size_t feature_dim() const;

  nlohmann::json to_json() const;
  static Architecture from_json(const nlohmann::json& j);
  bool operator==(const Architecture&) const = default;
};

Architecture student_architecture(std::size_t feature_dim = 64, std::size_t embed_dim = 32);
/// Wider student-family encoder used as the black-box transfer surrogate.
Architecture surrogate_architecture(std::size_t feature_dim = 128, std::size_t embed_dim = 32);
Architecture point_teacher_architecture(std::size_t width = 128, std::size_t embed_dim = 32);
Architecture image_teacher_architecture(std::size_t resolution = 32, std::size_t views = 6,
                                        std::size_t hidden = 128, std::size_t embed_dim = 32);
Architecture text_architecture(std::span<const std::string> class_names, std::size_t token_dim = 32,
                               std::size_t embed_dim = 32);

struct DenseLayer {
  diff::Tensor weight;  // [in, out]
  diff::Tensor bias;    // [out], or empty for a bias-free layer
};

struct EncoderWeights {
  Architecture arch;
  std::vector<DenseLayer> shared;
  std::vector<DenseLayer> head;
  diff::Tensor embedding;  // text encoders: [vocab, D_e]
  bool frozen = false;

  std::size_t parameter_count() const;
  std::size_t head_parameter_count() const;
  std::vector<std::pair<std::string, const diff::Tensor*>> named_tensors() const;
  std::vector<std::pair<std::string, diff::Tensor*>> named_tensors();
  std::string content_hash() const;

  io::TensorFile to_file() const;
  static EncoderWeights from_file(const io::TensorFile& file);
};

/// He-uniform weights, small uniform biases; text embeddings uniform in
/// [-1, 1]. Deterministic in the seed.
EncoderWeights init_weights(const Architecture& arch, std::uint64_t seed);

void save_weights(const EncoderWeights& w, const std::filesystem::path& path);
EncoderWeights load_weights(const std::filesystem::path& path);

struct PromptParams {
  diff::Tensor point_tokens;  // [M_p, D_f]
  diff::Tensor text_context;  // [M_t, D_e]

  std::size_t num_point_tokens() const { return point_tokens.empty() ? 0 : point_tokens.rows(); }
  std::size_t num_context() const { return text_context.empty() ? 0 : text_context.rows(); }
  std::size_t parameter_count() const { return point_tokens.size() + text_context.size(); }
  static PromptParams zeros(std::size_t m_p, std::size_t d_f, std::size_t m_t, std::size_t d_e);
};

/// Whole-word tokens: class names split on whitespace and underscores.
std::vector<std::string> tokenize(std::string_view class_name);

/// Instrumentation. Forward counters count samples (or classes for text);
/// layer_evaluations counts dense layers applied per sample.
struct Counters {
  std::size_t point_forwards = 0;
  std::size_t image_forwards = 0;
  std::size_t text_forwards = 0;
  std::size_t layer_evaluations = 0;
};
Counters& counters();
void reset_counters();

// ---------------------------------------------------------------------------
// Tape-level forwards

struct BoundLayer {
  diff::Var weight;
  diff::Var bias;  // invalid when the layer has no bias
};

/// Encoder weights placed on a tape, as leaves (trainable) or constants.
struct BoundEncoder {
  const EncoderWeights* weights = nullptr;
  std::vector<BoundLayer> shared;
  std::vector<BoundLayer> head;
  diff::Var embedding;

  /// Parameter/gradient pairs, in named_tensors() order. Only meaningful
  /// after backward on a trainable binding.
  std::vector<std::pair<std::string, diff::Var>> parameters() const;
};

BoundEncoder bind(diff::Tape& tape, const EncoderWeights& w, bool trainable);

/// Point encoder over G stacked clouds: shared MLP per point, `tokens`
/// ([M, D_f], may be invalid) appended to every segment before the max
/// pool, then head and normalize. Result [G, D].
diff::Var point_forward(const BoundEncoder& enc, diff::Var points, std::span<const std::size_t> offsets,
                        diff::Var tokens = {});

/// Image encoder over G samples of V stacked view rows ([G*V, res^2]).
diff::Var image_forward(const BoundEncoder& enc, diff::Var views);

/// Text encoder: per class, mean of context vectors (may be invalid) and
/// class-name token embeddings, projected and normalized. Result [C, D].
diff::Var text_forward(const BoundEncoder& enc, std::span<const std::string> class_names,
                       diff::Var context = {});

// ---------------------------------------------------------------------------
// Single-sample value API

diff::Tensor encode_student(const geo::PointCloud& pc, const PromptParams& prompts, const EncoderWeights& w);
diff::Tensor encode_point_teacher(const geo::PointCloud& pc, const EncoderWeights& w);
diff::Tensor encode_image_teacher(const proj::DepthImageSet& d, const EncoderWeights& w);
diff::Tensor encode_text(std::span<const std::string> class_names, const diff::Tensor& context,
                         const EncoderWeights& w);

/// Batched value helpers, [N, D].
diff::Tensor embed_points(const EncoderWeights& w, std::span<const geo::PointCloud> clouds,
                          const diff::Tensor& tokens = {}, std::size_t batch = 64);
diff::Tensor embed_images(const EncoderWeights& w, std::span<const proj::DepthImageSet> images,
                          std::size_t batch = 64);
/// Max-pooled shared-MLP features before the head, [N, D_f], no tokens.
diff::Tensor pooled_point_features(const EncoderWeights& w, std::span<const geo::PointCloud> clouds,
                                   std::size_t batch = 64);
/// Stacks per-sample view tensors into [G*V, res^2].
diff::Tensor stack_views(std::span<const proj::DepthImageSet> images);

/// argmax_j z_i . z_text[j], lower index on ties.
std::vector<std::size_t> nearest_class(const diff::Tensor& z, const diff::Tensor& z_text);

// ---------------------------------------------------------------------------
// Bootstrap

struct BootstrapConfig {
  std::size_t max_epochs = 40;
  std::size_t batch_size = 32;
  float lr = 2e-3f;
  float weight_decay = 1e-4f;
  float tau = 0.07f;
  std::size_t patience = 4;
  double plateau_delta = 0.005;
  std::size_t resolution = 32;
  std::size_t views = 6;
};

struct BootstrapMetrics {
  std::vector<double> epoch_loss;
  std::vector<double> point_accuracy;  // clean training accuracy per epoch
  std::vector<double> image_accuracy;
  std::size_t epochs = 0;
};

struct TeacherSet {
  EncoderWeights point;
  EncoderWeights image;
  EncoderWeights text;
  BootstrapMetrics metrics;
};

/// Jointly trains point teacher, image teacher and text backbone with the
/// symmetric contrastive loss against class-name embeddings until training
/// accuracy plateaus. Returned weights are frozen. Throws NonConvergence
/// when clean accuracy stays below twice chance.
TeacherSet bootstrap_teachers(const geo::Dataset& train, const BootstrapConfig& cfg, std::uint64_t seed);

struct PointBootstrap {
  EncoderWeights weights;
  BootstrapMetrics metrics;
};

/// Trains a point-family encoder against a frozen text backbone (student
/// baseline, transfer surrogate).
PointBootstrap bootstrap_point_encoder(const geo::Dataset& train, const Architecture& arch,
                                       const EncoderWeights& text, const BootstrapConfig& cfg,
                                       std::uint64_t seed);

}  // namespace rpd::enc
