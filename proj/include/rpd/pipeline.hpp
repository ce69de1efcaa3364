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
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpd/attacks.hpp"
#include "rpd/encoders.hpp"
#include "rpd/geometry.hpp"
#include "rpd/losses.hpp"
#include "rpd/optim.hpp"

namespace rpd::pipe {

struct DistillConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  float lr = 1e-3f;
  float weight_decay = 1e-2f;
  std::size_t t_max = 100;
  float eta_min = 1e-5f;
  float tau = 0.07f;
  std::size_t k = 1;
  std::size_t m_p = 10;
  std::size_t m_t = 3;
  float lambda_min = -1.0f;
  float adv_mix = 0.5f;
  float pgd_epsilon = 0.05f;
  std::size_t pgd_steps = 20;
  float pgd_step_size = 0.01f;
  float token_init_quantile = 0.5f;
  std::size_t baseline_epochs = 20;
  std::string teacher_input = "clean";
  std::uint64_t seed = 0;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
  nlohmann::json to_json() const;
  /// key = value lines, one per field.
  std::string to_text() const;
  /// Hex SHA-256 of to_text().
  std::string hash() const;
};

/// Parses `key = value` lines ('#' starts a comment). Keys are DistillConfig
/// field names; unknown keys and malformed values raise ConfigError.
DistillConfig parse_config(std::string_view text, DistillConfig base = {});
DistillConfig load_config(const std::filesystem::path& path, DistillConfig base = {});

/// eta_min + (lr0 - eta_min)(1 + cos(pi step / T_max)) / 2; StepOutOfRange
/// outside [0, T_max].
double cosine_lr(std::size_t step, const DistillConfig& cfg);

/// The four bootstrapped networks a distillation run consumes.
struct ModelSet {
  enc::EncoderWeights student;
  enc::EncoderWeights point_teacher;
  enc::EncoderWeights image_teacher;
  enc::EncoderWeights text;
};

void save_models(const ModelSet& models, const std::filesystem::path& directory);
ModelSet load_models(const std::filesystem::path& directory);

/// Everything the bootstrap stage produces: the model set plus the transfer
/// surrogate and per-network training metrics.
struct BootstrapBundle {
  ModelSet models;
  enc::EncoderWeights surrogate;
  enc::BootstrapMetrics teacher_metrics;
  enc::BootstrapMetrics student_metrics;
  enc::BootstrapMetrics surrogate_metrics;
};

/// Teachers first, then student and surrogate against the frozen text
/// backbone, each from its own seed derived from `seed`.
BootstrapBundle bootstrap_all(const geo::Dataset& train, const enc::BootstrapConfig& cfg, std::uint64_t seed);

/// Percentage of clouds whose prediction equals their label.
double accuracy_percent(const atk::Classifier& model, std::span<const geo::PointCloud> clouds);

struct TrainState {
  enc::PromptParams prompts;
  loss::DynamicWeights lambda;
  optim::AdamW optimizer;
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::mt19937_64 rng;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_total = 0.0;
  std::array<double, 3> mean_losses{};
  std::array<float, 3> lambda{};
  std::array<float, 3> weights{};
  std::array<double, 3> gate_fraction{};
  std::size_t attacked = 0;
};

struct TrainLog {
  std::vector<loss::LossBreakdown> steps;
  std::vector<EpochRecord> epochs;

  /// Columns: step, L_I, L_P, L_T, w_I, w_P, w_T, gate_frac_I, gate_frac_P,
  /// gate_frac_T, total.
  void write_train_log(const std::filesystem::path& path) const;
  /// Columns: epoch, lambda_I, lambda_P, lambda_T, w_I, w_P, w_T.
  void write_lambda_trace(const std::filesystem::path& path) const;
};

/// Algorithm-level trainer. Teacher embeddings of the clean training set
/// are computed once; prompts, context and log-variances are the only
/// learnable values.
class Distiller {
 public:
  Distiller(const geo::Dataset& train, const ModelSet& models, DistillConfig cfg);

  /// Fresh state: point tokens spread over per-channel quantiles (up to
  /// token_init_quantile) of the clean pooled student features, zero
  /// context, zero log-variances.
  TrainState initial_state() const;

  /// Runs epochs until state.epoch == until (or cfg.epochs).
  void train(TrainState& state, TrainLog& log, std::size_t until) const;
  void train(TrainState& state, TrainLog& log) const { train(state, log, cfg_.epochs); }

  const DistillConfig& config() const noexcept { return cfg_; }

 private:
  void run_epoch(TrainState& state, TrainLog& log) const;

  const geo::Dataset* train_;
  const ModelSet* models_;
  DistillConfig cfg_;
  diff::Tensor z_image_;  // clean teacher embeddings, [N, D]
  diff::Tensor z_point_;
  std::vector<std::string> teacher_hashes_;
};

/// Convenience: fresh state, full run.
TrainState distill(const geo::Dataset& train, const ModelSet& models, const DistillConfig& cfg, TrainLog* log = nullptr);

void save_checkpoint(const TrainState& state, const DistillConfig& cfg, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path, DistillConfig* cfg = nullptr);

/// Student with fine-tuned head after adversarial training.
struct AdvTrainResult {
  enc::EncoderWeights student;
  std::size_t added_parameters = 0;
};

/// Fine-tunes only the student head with cross-entropy on a clean/PGD mix
/// (the distillation mix fraction and budget).
AdvTrainResult adv_train_baseline(const geo::Dataset& train, const enc::EncoderWeights& student,
                                  const enc::EncoderWeights& text, const DistillConfig& cfg);

/// argmax_j z_stu . cached_text[j]; lower index on ties. One student
/// forward, no text forward.
std::size_t classify(const geo::PointCloud& pc, const enc::PromptParams& prompts, const diff::Tensor& cached_text,
                     const enc::EncoderWeights& student);

/// Class embeddings for a prompt set, computed once and cached by callers.
diff::Tensor class_embeddings(const geo::Dataset& data, const enc::PromptParams& prompts,
                              const enc::EncoderWeights& text);

// ---------------------------------------------------------------------------
// Evaluation

enum class Preprocess { None, Srs, Sor };

struct DefenseModel {
  std::string name;
  const atk::Classifier* model = nullptr;
  Preprocess preprocess = Preprocess::None;
  float srs_ratio = 0.5f;
  std::size_t sor_k = 2;
  float sor_alpha = 1.1f;
  std::size_t added_parameters = 0;
};

enum class EvalMode { Whitebox, BlackboxArchive };

struct ReportRow {
  std::string defense;
  double clean = 0.0;
  std::vector<double> robust;  // one per attack column
  double average_robust = 0.0;
  std::size_t added_parameters = 0;
};

struct RobustnessReport {
  std::vector<std::string> attacks;
  std::vector<ReportRow> rows;
  nlohmann::json meta = nlohmann::json::object();

  const ReportRow& row(std::string_view defense) const;
  double cell(std::string_view defense, std::string_view attack) const;
};

/// The comparison rows of the robustness table: the undefended student,
/// SRS and SOR in front of it, the adversarially fine-tuned head (when
/// given) and the prompted student (when given). Owns the classifiers.
class DefenseSuite {
 public:
  DefenseSuite(const ModelSet& models, const std::vector<std::string>& class_names, float tau,
               const enc::PromptParams* prompts = nullptr, const AdvTrainResult* adv = nullptr);
  DefenseSuite(const DefenseSuite&) = delete;
  DefenseSuite& operator=(const DefenseSuite&) = delete;

  std::span<const DefenseModel> defenses() const noexcept { return rows_; }
  const atk::Classifier& baseline() const { return *classifiers_.front(); }
  /// The prompted student; throws InvalidArgument when none was given.
  const atk::Classifier& prompted() const;

 private:
  std::vector<std::unique_ptr<atk::EmbeddingClassifier>> classifiers_;
  std::vector<DefenseModel> rows_;
  const atk::Classifier* prompted_ = nullptr;
};

/// White-box mode regenerates every attack against the defended model's
/// underlying classifier, then applies the preprocessing. Archive mode
/// replays the archived clouds. Accuracies are percentages.
RobustnessReport evaluate_robustness(std::span<const DefenseModel> defenses, const geo::Dataset& test,
                                     std::span<const atk::AttackBudget> attacks, EvalMode mode,
                                     const atk::AdversarialArchive* archive = nullptr, std::uint64_t seed = 0);

/// report.csv plus report.json metadata.
void write_report(const RobustnessReport& report, const std::filesystem::path& directory);
/// Reads report.csv and recomputes Avg. R from the attack cells.
RobustnessReport read_report(const std::filesystem::path& directory);

/// One row per sample sorted by id: id, label, e0..e{D-1}. With a budget,
/// samples are first attacked against `model`.
std::string export_embeddings(const enc::EncoderWeights& student, const enc::PromptParams& prompts,
                              const geo::Dataset& test, const atk::Classifier* model = nullptr,
                              const atk::AttackBudget* budget = nullptr);

}  // namespace rpd::pipe
