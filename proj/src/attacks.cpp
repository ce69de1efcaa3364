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

#include "rpd/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "rpd/error.hpp"
#include "rpd/tensor_io.hpp"

namespace rpd::atk {

using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using geo::PointCloud;

// ---------------------------------------------------------------------------
// Classifiers

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const auto r = logits.row(row);
  std::size_t best = 0;
  for (std::size_t j = 1; j < r.size(); ++j) {
    if (r[j] > r[best]) best = j;
  }
  return best;
}

std::vector<std::size_t> Classifier::predict(std::span<const PointCloud> clouds, std::size_t batch) const {
  std::vector<std::size_t> out;
  out.reserve(clouds.size());
  for (std::size_t start = 0; start < clouds.size(); start += batch) {
    const auto chunk = clouds.subspan(start, std::min(batch, clouds.size() - start));
    Tape tape;
    std::vector<std::size_t> offsets;
    Var pts = tape.constant(geo::stack_points(chunk, offsets));
    const Tensor& l = logits(tape, pts, offsets).value();
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(argmax_row(l, i));
  }
  return out;
}

EmbeddingClassifier::EmbeddingClassifier(const enc::EncoderWeights& weights, Tensor tokens, Tensor z_text, float tau)
    : weights_(&weights), tokens_(std::move(tokens)), z_text_(std::move(z_text)), tau_(tau) {
  if (weights.arch.kind != enc::EncoderKind::Point) {
    throw Error(ErrorCode::ArchitectureMismatch, "classifier needs a point encoder");
  }
  if (z_text_.cols() != weights.arch.embed_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "class embeddings do not match the encoder width");
  }
}

Var EmbeddingClassifier::logits(Tape& tape, Var points, std::span<const std::size_t> offsets) const {
  const enc::BoundEncoder enc = enc::bind(tape, *weights_, false);
  Var tokens = tokens_.empty() ? Var{} : tape.constant(tokens_);
  Var z = enc::point_forward(enc, points, offsets, tokens);
  return diff::scale(diff::matmul_nt(z, tape.constant(z_text_)), 1.0f / tau_);
}

// ---------------------------------------------------------------------------
// Budgets

std::string_view attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::Pgd: return "pgd";
    case AttackKind::Perturb: return "perturb";
    case AttackKind::Knn: return "knn";
    case AttackKind::AddCd: return "add_cd";
    case AttackKind::AddHd: return "add_hd";
    case AttackKind::Drop: return "drop";
  }
  return "unknown";
}

AttackKind attack_from_name(std::string_view name) {
  for (auto k : {AttackKind::Pgd, AttackKind::Perturb, AttackKind::Knn, AttackKind::AddCd, AttackKind::AddHd,
                 AttackKind::Drop}) {
    if (attack_name(k) == name) return k;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown attack '" + std::string(name) + "'");
}

nlohmann::json AttackBudget::to_json() const {
  return {{"kind", attack_name(kind)}, {"epsilon", epsilon}, {"steps", steps},   {"step_size", step_size},
          {"seed", seed},              {"beta", beta},       {"beta_knn", beta_knn}, {"k_nn", k_nn},
          {"count", count}};
}

AttackBudget AttackBudget::from_json(const nlohmann::json& j) {
  AttackBudget b;
  b.kind = attack_from_name(j.at("kind").get<std::string>());
  b.epsilon = j.at("epsilon").get<float>();
  b.steps = j.at("steps").get<std::size_t>();
  b.step_size = j.at("step_size").get<float>();
  b.seed = j.at("seed").get<std::uint64_t>();
  b.beta = j.at("beta").get<float>();
  b.beta_knn = j.at("beta_knn").get<float>();
  b.k_nn = j.at("k_nn").get<std::size_t>();
  b.count = j.at("count").get<std::size_t>();
  return b;
}

AttackBudget default_budget(AttackKind kind, std::size_t points) {
  AttackBudget b;
  b.kind = kind;
  switch (kind) {
    case AttackKind::Pgd:
      break;
    case AttackKind::Perturb:
    case AttackKind::Knn:
      b.epsilon = 0.01f;
      b.step_size = 0.05f;
      break;
    case AttackKind::AddCd:
    case AttackKind::AddHd:
      b.epsilon = kind == AttackKind::AddCd ? 0.02f : 0.2f;
      b.step_size = 0.05f;
      b.count = 64;
      break;
    case AttackKind::Drop:
      b.epsilon = 0.0f;
      b.steps = 1;
      b.count = points * 50 / 256;
      break;
  }
  return b;
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Attack machinery

namespace {

void require_batch(const Classifier& model, std::span<const PointCloud> clouds, std::span<const std::size_t> labels) {
  if (!model.differentiable()) throw Error(ErrorCode::NonDifferentiableModel, "attack needs input gradients");
  if (clouds.size() != labels.size()) throw Error(ErrorCode::RowCountMismatch, "one label per cloud required");
  for (const auto& pc : clouds) {
    if (pc.points.empty()) throw Error(ErrorCode::EmptyCloud, "cannot attack an empty cloud");
  }
  for (auto y : labels) {
    if (y >= model.num_classes()) throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(y));
  }
}

PointCloud with_points(const PointCloud& like, std::vector<geo::Vec3> points) {
  PointCloud out;
  out.points = std::move(points);
  out.label = like.label;
  out.id = like.id;
  return out;
}

std::vector<geo::Vec3> rows_of(const Tensor& t, std::size_t begin, std::size_t end) {
  std::vector<geo::Vec3> out(end - begin);
  for (std::size_t r = begin; r < end; ++r) out[r - begin] = {t.at(r, 0), t.at(r, 1), t.at(r, 2)};
  return out;
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

void fill_success(const Classifier& model, std::vector<AttackResult>& results, std::span<const std::size_t> labels) {
  std::vector<PointCloud> advs;
  advs.reserve(results.size());
  for (const auto& r : results) advs.push_back(r.adversarial);
  const auto pred = model.predict(advs);
  for (std::size_t i = 0; i < results.size(); ++i) {
    results[i].success = pred[i] != labels[i];
    results[i].forwards += 1;
  }
}

// Largest blend t in [0, 1] of base + t (target - base) whose distortion
// stays within the cap. t = 0 must be feasible.
template <typename Distortion>
std::vector<geo::Vec3> cap_blend(const std::vector<geo::Vec3>& base, const std::vector<geo::Vec3>& target, double cap,
                                 Distortion distortion) {
  auto blend = [&](double t) {
    std::vector<geo::Vec3> out(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      for (int c = 0; c < 3; ++c) {
        out[i][c] = static_cast<float>(base[i][c] + t * (double(target[i][c]) - base[i][c]));
      }
    }
    return out;
  };
  if (distortion(target) <= cap) return target;
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    (distortion(blend(mid)) <= cap ? lo : hi) = mid;
  }
  auto out = blend(lo);
  if (distortion(out) > cap) out = base;
  return out;
}

double sample_cross_entropy(const Tensor& logits, std::size_t row, std::size_t label) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits.row(row)) mx = std::max(mx, double(v));
  double z = 0.0;
  for (float v : logits.row(row)) z += std::exp(double(v) - mx);
  return mx + std::log(z) - logits.at(row, label);
}

// Gradient ascent on CE minus the Chamfer (and optionally k-NN) penalty.
// A step that lowers a sample's objective is rolled back and that sample's
// step size halved, so very large penalties stay stable.
std::vector<AttackResult> penalty_attack(const Classifier& model, std::span<const PointCloud> clouds,
                                         std::span<const std::size_t> labels, const AttackBudget& b, bool knn_term) {
  require_batch(model, clouds, labels);
  std::vector<std::size_t> offsets;
  const Tensor original = geo::stack_points(clouds, offsets);
  const std::size_t g = clouds.size();

  struct Track {
    bool found = false;
    double distortion = 0.0;
    std::vector<geo::Vec3> points;
    double objective = -std::numeric_limits<double>::infinity();
    float step = 0.0f;
  };
  std::vector<Track> track(g);
  for (auto& t : track) t.step = b.step_size;
  std::vector<AttackResult> results(g);

  Tensor accepted = original;  // last accepted iterate per sample
  Tensor accepted_grad(original.shape());
  Tensor candidate = original;

  for (std::size_t step = 0; step <= b.steps; ++step) {
    Tape tape;
    Var x = tape.leaf(candidate, step < b.steps);
    Var logits = model.logits(tape, x, offsets);
    Var x0 = tape.constant(original);
    std::vector<Var> penalties(g);
    for (std::size_t i = 0; i < g; ++i) {
      const auto idx = range(offsets[i], offsets[i + 1]);
      Var xi = diff::gather_rows(x, idx);
      Var penalty = diff::scale(geo::chamfer_distance(xi, diff::gather_rows(x0, idx)), b.beta);
      if (knn_term) {
        penalty = diff::add(penalty, diff::scale(diff::mean(geo::knn_mean_distance(xi, b.k_nn)), b.beta_knn));
      }
      penalties[i] = penalty;
    }
    const bool last = step == b.steps;
    if (!last) {
      Var objective = diff::softmax_cross_entropy(logits, labels, diff::Reduction::Sum);
      for (const Var& p : penalties) objective = diff::sub(objective, p);
      tape.backward(objective);
    }

    for (std::size_t i = 0; i < g; ++i) {
      ++results[i].forwards;
      if (!last) ++results[i].backwards;
      auto& t = track[i];
      const double obj = sample_cross_entropy(logits.value(), i, labels[i]) - penalties[i].value().item();
      const bool accept = step == 0 || (std::isfinite(obj) && obj >= t.objective);
      if (accept) {
        t.objective = obj;
        for (std::size_t r = offsets[i]; r < offsets[i + 1]; ++r) {
          for (std::size_t c = 0; c < 3; ++c) {
            accepted.at(r, c) = candidate.at(r, c);
            if (!last) accepted_grad.at(r, c) = x.grad().at(r, c);
          }
        }
        if (step > 0 && argmax_row(logits.value(), i) != labels[i]) {
          const auto pts = rows_of(accepted, offsets[i], offsets[i + 1]);
          const double cd = geo::chamfer_distance(with_points(clouds[i], pts), clouds[i]);
          if (!t.found || cd < t.distortion) {
            t.found = true;
            t.distortion = cd;
            t.points = pts;
          }
        }
      } else {
        t.step *= 0.5f;
      }
      if (last) continue;
      for (std::size_t r = offsets[i]; r < offsets[i + 1]; ++r) {
        for (std::size_t c = 0; c < 3; ++c) candidate.at(r, c) = accepted.at(r, c) + t.step * accepted_grad.at(r, c);
      }
    }
  }

  for (std::size_t i = 0; i < g; ++i) {
    auto pts = track[i].found ? track[i].points : rows_of(accepted, offsets[i], offsets[i + 1]);
    if (b.epsilon >= 0.0f) {
      pts = cap_blend(clouds[i].points, pts, b.epsilon, [&](const std::vector<geo::Vec3>& p) {
        return geo::chamfer_distance(with_points(clouds[i], p), clouds[i]);
      });
    }
    results[i].adversarial = with_points(clouds[i], std::move(pts));
    results[i].budget_used = geo::chamfer_distance(results[i].adversarial, clouds[i]);
  }
  fill_success(model, results, labels);
  return results;
}

}  // namespace

std::vector<AttackResult> pgd_attack(const Classifier& model, std::span<const PointCloud> clouds,
                                     std::span<const std::size_t> labels, const AttackBudget& b) {
  require_batch(model, clouds, labels);
  if (b.epsilon < 0.0f) throw Error(ErrorCode::InvalidArgument, "epsilon must be nonnegative");
  std::vector<std::size_t> offsets;
  const Tensor original = geo::stack_points(clouds, offsets);
  const std::size_t g = clouds.size();
  const float eps = b.epsilon;
  Tensor delta(original.shape());
  if (eps > 0.0f) {
    for (std::size_t i = 0; i < g; ++i) {
      std::mt19937_64 rng(sample_seed(b.seed, i));
      std::uniform_real_distribution<float> u(-eps, eps);
      for (std::size_t r = offsets[i]; r < offsets[i + 1]; ++r) {
        for (std::size_t c = 0; c < 3; ++c) delta.at(r, c) = u(rng);
      }
    }
  }
  std::vector<AttackResult> results(g);
  const auto x0 = original.data();
  Tensor adv = original;
  for (std::size_t step = 0; step < b.steps && eps > 0.0f; ++step) {
    for (std::size_t k = 0; k < x0.size(); ++k) adv.data()[k] = x0[k] + delta.data()[k];
    Tape tape;
    Var x = tape.leaf(adv);
    Var loss = diff::softmax_cross_entropy(model.logits(tape, x, offsets), labels, diff::Reduction::Sum);
    tape.backward(loss);
    const auto grad = x.grad().data();
    auto d = delta.data();
    for (std::size_t k = 0; k < d.size(); ++k) {
      const float s = grad[k] > 0.0f ? 1.0f : (grad[k] < 0.0f ? -1.0f : 0.0f);
      d[k] = std::clamp(d[k] + b.step_size * s, -eps, eps);
    }
    for (auto& r : results) {
      ++r.forwards;
      ++r.backwards;
    }
  }
  for (std::size_t k = 0; k < x0.size(); ++k) adv.data()[k] = x0[k] + delta.data()[k];
  for (std::size_t i = 0; i < g; ++i) {
    results[i].adversarial = with_points(clouds[i], rows_of(adv, offsets[i], offsets[i + 1]));
    results[i].budget_used = geo::linf_distance(results[i].adversarial, clouds[i]);
  }
  fill_success(model, results, labels);
  return results;
}

std::vector<AttackResult> perturb_attack(const Classifier& model, std::span<const PointCloud> clouds,
                                         std::span<const std::size_t> labels, const AttackBudget& b) {
  return penalty_attack(model, clouds, labels, b, false);
}

std::vector<AttackResult> knn_attack(const Classifier& model, std::span<const PointCloud> clouds,
                                     std::span<const std::size_t> labels, const AttackBudget& b) {
  for (const auto& pc : clouds) {
    if (b.k_nn == 0 || b.k_nn >= pc.size()) throw Error(ErrorCode::KTooLarge, "k_nn must be in [1, N)");
  }
  return penalty_attack(model, clouds, labels, b, true);
}

std::vector<AttackResult> add_attack(const Classifier& model, std::span<const PointCloud> clouds,
                                     std::span<const std::size_t> labels, const AttackBudget& b) {
  require_batch(model, clouds, labels);
  if (b.count < 1) throw Error(ErrorCode::CountOutOfRange, "add attack needs n_add >= 1");
  const bool hausdorff = b.kind == AttackKind::AddHd;
  const std::size_t g = clouds.size(), m = b.count;
  auto metric = [&](const PointCloud& added, const PointCloud& orig) {
    return hausdorff ? geo::directed_hausdorff(added, orig) : geo::directed_chamfer(added, orig);
  };

  std::vector<std::size_t> orig_offsets;
  const Tensor original = geo::stack_points(clouds, orig_offsets);
  Tensor seeds(Shape{g * m, 3});
  Tensor added(Shape{g * m, 3});
  for (std::size_t i = 0; i < g; ++i) {
    std::mt19937_64 rng(sample_seed(b.seed, i));
    std::uniform_int_distribution<std::size_t> pick(0, clouds[i].size() - 1);
    std::uniform_real_distribution<float> jitter(-0.01f, 0.01f);
    for (std::size_t j = 0; j < m; ++j) {
      const auto& p = clouds[i].points[pick(rng)];
      for (std::size_t c = 0; c < 3; ++c) {
        seeds.at(i * m + j, c) = p[c];
        added.at(i * m + j, c) = p[c] + jitter(rng);
      }
    }
  }
  // Row order of the attacked batch: cloud 0, its added points, cloud 1, ...
  std::vector<std::size_t> order, offsets{0};
  const std::size_t total_orig = original.rows();
  for (std::size_t i = 0; i < g; ++i) {
    for (std::size_t r = orig_offsets[i]; r < orig_offsets[i + 1]; ++r) order.push_back(r);
    for (std::size_t j = 0; j < m; ++j) order.push_back(total_orig + i * m + j);
    offsets.push_back(order.size());
  }

  std::vector<AttackResult> results(g);
  for (std::size_t step = 0; step < b.steps; ++step) {
    Tape tape;
    Var a = tape.leaf(added);
    Var x0 = tape.constant(original);
    Var x = diff::gather_rows(diff::concat_rows(x0, a), order);
    Var objective = diff::softmax_cross_entropy(model.logits(tape, x, offsets), labels, diff::Reduction::Sum);
    for (std::size_t i = 0; i < g; ++i) {
      Var ai = diff::gather_rows(a, range(i * m, (i + 1) * m));
      Var oi = diff::gather_rows(x0, range(orig_offsets[i], orig_offsets[i + 1]));
      Var d = hausdorff ? geo::directed_hausdorff(ai, oi) : geo::directed_chamfer(ai, oi);
      objective = diff::sub(objective, diff::scale(d, b.beta));
    }
    tape.backward(objective);
    const auto grad = a.grad().data();
    auto p = added.data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] += b.step_size * grad[k];
    for (auto& r : results) {
      ++r.forwards;
      ++r.backwards;
    }
  }

  for (std::size_t i = 0; i < g; ++i) {
    auto pts = rows_of(added, i * m, (i + 1) * m);
    if (b.epsilon >= 0.0f) {
      pts = cap_blend(rows_of(seeds, i * m, (i + 1) * m), pts, b.epsilon, [&](const std::vector<geo::Vec3>& p) {
        return metric(with_points(clouds[i], p), clouds[i]);
      });
    }
    results[i].budget_used = metric(with_points(clouds[i], pts), clouds[i]);
    std::vector<geo::Vec3> all = clouds[i].points;
    all.insert(all.end(), pts.begin(), pts.end());
    results[i].adversarial = with_points(clouds[i], std::move(all));
  }
  fill_success(model, results, labels);
  return results;
}

std::vector<AttackResult> drop_attack(const Classifier& model, std::span<const PointCloud> clouds,
                                      std::span<const std::size_t> labels, std::size_t n_drop) {
  require_batch(model, clouds, labels);
  for (const auto& pc : clouds) {
    if (n_drop >= pc.size()) {
      throw Error(ErrorCode::DropTooLarge, "cannot drop " + std::to_string(n_drop) + " of " +
                                               std::to_string(pc.size()) + " points");
    }
  }
  const std::size_t g = clouds.size();
  std::vector<AttackResult> results(g);
  if (n_drop == 0) {
    for (std::size_t i = 0; i < g; ++i) results[i].adversarial = clouds[i];
    fill_success(model, results, labels);
    return results;
  }
  std::vector<std::size_t> offsets;
  Tape tape;
  Var x = tape.leaf(geo::stack_points(clouds, offsets));
  tape.backward(diff::softmax_cross_entropy(model.logits(tape, x, offsets), labels, diff::Reduction::Sum));
  const Tensor& grad = x.grad();

  for (std::size_t i = 0; i < g; ++i) {
    const auto& pts = clouds[i].points;
    const std::size_t n = pts.size();
    geo::Vec3 centroid{0.0f, 0.0f, 0.0f};
    for (const auto& p : pts) {
      for (int c = 0; c < 3; ++c) centroid[c] += p[c] / static_cast<float>(n);
    }
    // Moving a point onto the centroid approximates removing it; the
    // saliency is the first-order loss change along that direction.
    std::vector<double> saliency(n);
    for (std::size_t j = 0; j < n; ++j) {
      double norm = 0.0, inner = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double gv = grad.at(offsets[i] + j, c);
        norm += gv * gv;
        inner += gv * (double(centroid[c]) - pts[j][c]);
      }
      saliency[j] = std::sqrt(norm) * (inner > 0.0 ? 1.0 : (inner < 0.0 ? -1.0 : 0.0));
    }
    std::vector<std::size_t> rank(n);
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return saliency[a] > saliency[b]; });
    std::vector<bool> dropped(n, false);
    for (std::size_t j = 0; j < n_drop; ++j) dropped[rank[j]] = true;
    std::vector<geo::Vec3> kept;
    for (std::size_t j = 0; j < n; ++j) {
      if (!dropped[j]) kept.push_back(pts[j]);
    }
    results[i].adversarial = with_points(clouds[i], std::move(kept));
    results[i].budget_used = static_cast<double>(n - results[i].adversarial.size());
    results[i].forwards = results[i].backwards = 1;
  }
  fill_success(model, results, labels);
  return results;
}

AttackResult pgd_attack(const Classifier& model, const PointCloud& pc, std::size_t label, const AttackBudget& b) {
  return pgd_attack(model, std::span(&pc, 1), std::span(&label, 1), b).front();
}
AttackResult perturb_attack(const Classifier& model, const PointCloud& pc, std::size_t label, const AttackBudget& b) {
  return perturb_attack(model, std::span(&pc, 1), std::span(&label, 1), b).front();
}
AttackResult knn_attack(const Classifier& model, const PointCloud& pc, std::size_t label, const AttackBudget& b) {
  return knn_attack(model, std::span(&pc, 1), std::span(&label, 1), b).front();
}
AttackResult add_attack(const Classifier& model, const PointCloud& pc, std::size_t label, const AttackBudget& b) {
  return add_attack(model, std::span(&pc, 1), std::span(&label, 1), b).front();
}
AttackResult drop_attack(const Classifier& model, const PointCloud& pc, std::size_t label, std::size_t n_drop) {
  return drop_attack(model, std::span(&pc, 1), std::span(&label, 1), n_drop).front();
}

std::vector<AttackResult> run_attack(const Classifier& model, std::span<const PointCloud> clouds,
                                     const AttackBudget& budget, std::size_t batch) {
  std::vector<AttackResult> out;
  out.reserve(clouds.size());
  for (std::size_t start = 0; start < clouds.size(); start += batch) {
    const auto chunk = clouds.subspan(start, std::min(batch, clouds.size() - start));
    std::vector<std::size_t> labels;
    for (const auto& pc : chunk) labels.push_back(pc.label);
    AttackBudget b = budget;
    b.seed = sample_seed(budget.seed, 1'000'000 + start);
    std::vector<AttackResult> part;
    switch (budget.kind) {
      case AttackKind::Pgd: part = pgd_attack(model, chunk, labels, b); break;
      case AttackKind::Perturb: part = perturb_attack(model, chunk, labels, b); break;
      case AttackKind::Knn: part = knn_attack(model, chunk, labels, b); break;
      case AttackKind::AddCd:
      case AttackKind::AddHd: part = add_attack(model, chunk, labels, b); break;
      case AttackKind::Drop: part = drop_attack(model, chunk, labels, budget.count); break;
    }
    for (auto& r : part) out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transfer archive

std::vector<std::string> AdversarialArchive::attack_names() const {
  std::vector<std::string> names;
  for (const auto& e : entries) {
    if (std::find(names.begin(), names.end(), e.attack) == names.end()) names.push_back(e.attack);
  }
  return names;
}

std::vector<PointCloud> AdversarialArchive::clouds_for(std::string_view attack) const {
  std::vector<PointCloud> out;
  for (const auto& e : entries) {
    if (e.attack == attack) out.push_back(e.cloud);
  }
  return out;
}

AdversarialArchive transfer_attack_set(const Classifier& surrogate, std::string_view surrogate_id,
                                       const geo::Dataset& data, std::span<const AttackBudget> budgets) {
  AdversarialArchive archive;
  archive.class_names = data.class_names;
  for (const auto& budget : budgets) {
    const std::string name(attack_name(budget.kind));
    auto results = run_attack(surrogate, data.samples, budget);
    for (std::size_t i = 0; i < results.size(); ++i) {
      ArchiveEntry e;
      e.source_id = data.samples[i].id;
      e.id = name + "/" + e.source_id;
      e.attack = name;
      e.budget = budget;
      e.surrogate_id = std::string(surrogate_id);
      e.cloud = std::move(results[i].adversarial);
      archive.entries.push_back(std::move(e));
    }
  }
  return archive;
}

void write_archive(const AdversarialArchive& archive, const std::filesystem::path& directory, const std::string& stem) {
  std::filesystem::create_directories(directory);
  nlohmann::json manifest;
  manifest["format_version"] = io::kFormatVersion;
  manifest["class_names"] = archive.class_names;
  manifest["entries"] = nlohmann::json::array();
  io::TensorFile points;
  for (const auto& e : archive.entries) {
    manifest["entries"].push_back({{"id", e.id},
                                   {"source_id", e.source_id},
                                   {"class_name", archive.class_names.at(e.cloud.label)},
                                   {"label", e.cloud.label},
                                   {"attack", e.attack},
                                   {"epsilon", e.budget.epsilon},
                                   {"steps", e.budget.steps},
                                   {"seed", e.budget.seed},
                                   {"surrogate_id", e.surrogate_id},
                                   {"points", e.cloud.size()},
                                   {"budget", e.budget.to_json()}});
    points.tensors.emplace_back(e.id, geo::to_tensor(e.cloud));
  }
  points.meta["manifest"] = stem + ".json";
  std::ofstream out(directory / (stem + ".json"));
  if (!out) throw Error(ErrorCode::IoError, "cannot write archive manifest in " + directory.string());
  out << manifest.dump(1) << '\n';
  io::write_tensor_file(directory / (stem + ".rpdt"), points);
}

AdversarialArchive read_archive(const std::filesystem::path& directory, const std::string& stem) {
  std::ifstream in(directory / (stem + ".json"));
  if (!in) throw Error(ErrorCode::IoError, "cannot open archive manifest in " + directory.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, e.what());
  }
  if (manifest.value("format_version", -1) != io::kFormatVersion) {
    throw Error(ErrorCode::VersionMismatch, "archive manifest version");
  }
  const io::TensorFile points = io::read_tensor_file(directory / (stem + ".rpdt"));
  AdversarialArchive archive;
  archive.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  for (const auto& j : manifest.at("entries")) {
    ArchiveEntry e;
    e.id = j.at("id").get<std::string>();
    e.source_id = j.at("source_id").get<std::string>();
    e.attack = j.at("attack").get<std::string>();
    e.budget = AttackBudget::from_json(j.at("budget"));
    e.surrogate_id = j.at("surrogate_id").get<std::string>();
    e.cloud.points = geo::points_from_tensor(points.get(e.id));
    e.cloud.label = j.at("label").get<std::size_t>();
    e.cloud.id = e.source_id;
    archive.entries.push_back(std::move(e));
  }
  return archive;
}

// ---------------------------------------------------------------------------
// Defenses

PointCloud srs_defense(const PointCloud& pc, float ratio, std::uint64_t seed) {
  if (!(ratio > 0.0f && ratio <= 1.0f)) throw Error(ErrorCode::InvalidArgument, "SRS ratio must be in (0, 1]");
  const std::size_t n = pc.size();
  const auto keep = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(double(ratio) * n)), 1, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  std::vector<geo::Vec3> pts;
  for (auto i : idx) pts.push_back(pc.points[i]);
  return with_points(pc, std::move(pts));
}

PointCloud sor_defense(const PointCloud& pc, std::size_t k, float alpha) {
  const auto d = geo::knn_mean_distance(pc, k);
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  double var = 0.0;
  for (double v : d) var += (v - mean) * (v - mean);
  const double threshold = mean + alpha * std::sqrt(var / static_cast<double>(d.size()));
  std::vector<geo::Vec3> kept;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] <= threshold) kept.push_back(pc.points[i]);
  }
  if (kept.empty()) kept.push_back(pc.points[std::min_element(d.begin(), d.end()) - d.begin()]);
  return with_points(pc, std::move(kept));
}

}  // namespace rpd::atk
