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
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rpd/autodiff.hpp"
#include "rpd/encoders.hpp"
#include "rpd/geometry.hpp"

namespace rpd::atk {

/// A model the attacks can query: logits [G, C] for G stacked clouds.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::size_t num_classes() const = 0;
  virtual bool differentiable() const { return true; }
  virtual diff::Var logits(diff::Tape& tape, diff::Var points, std::span<const std::size_t> offsets) const = 0;

  /// Batched argmax predictions, lower class index on ties.
  std::vector<std::size_t> predict(std::span<const geo::PointCloud> clouds, std::size_t batch = 64) const;
};

/// Point encoder (optionally prompted) scored against cached class
/// embeddings: logits = z z_text^T / tau.
class EmbeddingClassifier final : public Classifier {
 public:
  EmbeddingClassifier(const enc::EncoderWeights& weights, diff::Tensor tokens, diff::Tensor z_text, float tau);

  std::size_t num_classes() const override { return z_text_.rows(); }
  diff::Var logits(diff::Tape& tape, diff::Var points, std::span<const std::size_t> offsets) const override;

  const enc::EncoderWeights& weights() const noexcept { return *weights_; }

 private:
  const enc::EncoderWeights* weights_;
  diff::Tensor tokens_;
  diff::Tensor z_text_;
  float tau_;
};

std::size_t argmax_row(const diff::Tensor& logits, std::size_t row);

// ---------------------------------------------------------------------------
// Budgets and results

enum class AttackKind { Pgd, Perturb, Knn, AddCd, AddHd, Drop };

std::string_view attack_name(AttackKind kind);
AttackKind attack_from_name(std::string_view name);

/// `epsilon` is the L-infinity bound for PGD and the distortion cap for the
/// penalty kinds (Chamfer for Perturb/KNN, the add metric for ADD); a
/// negative cap means uncapped. `count` is n_add or n_drop.
struct AttackBudget {
  AttackKind kind = AttackKind::Pgd;
  float epsilon = 0.05f;
  std::size_t steps = 20;
  float step_size = 0.01f;
  std::uint64_t seed = 0;
  float beta = 5.0f;
  float beta_knn = 1.0f;
  std::size_t k_nn = 5;
  std::size_t count = 0;

  nlohmann::json to_json() const;
  static AttackBudget from_json(const nlohmann::json& j);
  bool operator==(const AttackBudget&) const = default;
};

/// Defaults per kind for clouds of `points` points.
AttackBudget default_budget(AttackKind kind, std::size_t points = 256);

struct AttackResult {
  geo::PointCloud adversarial;
  bool success = false;
  double budget_used = 0.0;
  std::size_t forwards = 0;
  std::size_t backwards = 0;
};

/// Per-sample seed used for sample `index` of a batch.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t index);

// Batched attacks. Sample i of a batch uses sample_seed(budget.seed, i); the
// single-sample forms equal a batch of one.
std::vector<AttackResult> pgd_attack(const Classifier& model, std::span<const geo::PointCloud> clouds,
                                     std::span<const std::size_t> labels, const AttackBudget& budget);
std::vector<AttackResult> perturb_attack(const Classifier& model, std::span<const geo::PointCloud> clouds,
                                         std::span<const std::size_t> labels, const AttackBudget& budget);
std::vector<AttackResult> knn_attack(const Classifier& model, std::span<const geo::PointCloud> clouds,
                                     std::span<const std::size_t> labels, const AttackBudget& budget);
std::vector<AttackResult> add_attack(const Classifier& model, std::span<const geo::PointCloud> clouds,
                                     std::span<const std::size_t> labels, const AttackBudget& budget);
std::vector<AttackResult> drop_attack(const Classifier& model, std::span<const geo::PointCloud> clouds,
                                      std::span<const std::size_t> labels, std::size_t n_drop);

AttackResult pgd_attack(const Classifier& model, const geo::PointCloud& pc, std::size_t label,
                        const AttackBudget& budget);
AttackResult perturb_attack(const Classifier& model, const geo::PointCloud& pc, std::size_t label,
                            const AttackBudget& budget);
AttackResult knn_attack(const Classifier& model, const geo::PointCloud& pc, std::size_t label,
                        const AttackBudget& budget);
AttackResult add_attack(const Classifier& model, const geo::PointCloud& pc, std::size_t label,
                        const AttackBudget& budget);
AttackResult drop_attack(const Classifier& model, const geo::PointCloud& pc, std::size_t label, std::size_t n_drop);

/// Dispatch on budget.kind over a whole dataset, in chunks of `batch`.
std::vector<AttackResult> run_attack(const Classifier& model, std::span<const geo::PointCloud> clouds,
                                     const AttackBudget& budget, std::size_t batch = 32);

// ---------------------------------------------------------------------------
// Transfer archive

struct ArchiveEntry {
  std::string id;
  std::string source_id;
  std::string attack;
  AttackBudget budget;
  std::string surrogate_id;
  geo::PointCloud cloud;
  bool operator==(const ArchiveEntry&) const = default;
};

struct AdversarialArchive {
  std::vector<std::string> class_names;
  std::vector<ArchiveEntry> entries;

  std::vector<std::string> attack_names() const;
  std::vector<geo::PointCloud> clouds_for(std::string_view attack) const;
};

/// Runs every budget against the surrogate over the dataset and records
/// provenance.
AdversarialArchive transfer_attack_set(const Classifier& surrogate, std::string_view surrogate_id,
                                       const geo::Dataset& data, std::span<const AttackBudget> budgets);

/// `<stem>.json` holds the manifest with provenance, `<stem>.rpdt` the
/// point data in the shared tensor layout.
void write_archive(const AdversarialArchive& archive, const std::filesystem::path& directory,
                   const std::string& stem = "archive");
AdversarialArchive read_archive(const std::filesystem::path& directory, const std::string& stem = "archive");

// ---------------------------------------------------------------------------
// Preprocessing defenses

/// Uniform random subset of round(ratio N) points (at least one), in input
/// order.
geo::PointCloud srs_defense(const geo::PointCloud& pc, float ratio, std::uint64_t seed);

/// Drops points whose mean k-NN distance exceeds mean + alpha std. Keeps the
/// minimum-distance point if the threshold would remove everything.
geo::PointCloud sor_defense(const geo::PointCloud& pc, std::size_t k, float alpha);

}  // namespace rpd::atk
