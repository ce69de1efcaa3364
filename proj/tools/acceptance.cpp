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

// Acceptance run. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Artifacts (models, reports, traces) go
// to the directory given as the first argument.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rpd/attacks.hpp"
#include "rpd/autodiff.hpp"
#include "rpd/encoders.hpp"
#include "rpd/error.hpp"
#include "rpd/geometry.hpp"
#include "rpd/gradcheck.hpp"
#include "rpd/losses.hpp"
#include "rpd/pipeline.hpp"
#include "rpd/projection.hpp"

namespace fs = std::filesystem;
using namespace rpd;
using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;
};

std::vector<Outcome> outcomes;

void record(int id, std::string title, bool pass, std::string detail) {
  std::printf("criterion %2d %s  %s: %s\n", id, pass ? "PASS" : "FAIL", title.c_str(), detail.c_str());
  std::fflush(stdout);
  outcomes.push_back({id, std::move(title), pass, std::move(detail)});
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = u(rng);
  return t;
}

Tensor random_unit_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Tensor t = random_tensor({rows, cols}, rng);
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0.0;
    for (float v : t.row(r)) n += double(v) * v;
    const float inv = static_cast<float>(1.0 / std::sqrt(n));
    for (float& v : t.row(r)) v *= inv;
  }
  return t;
}

// Symmetric contrastive loss in double precision, written from the
// definition: mean over rows and over columns of lse minus the diagonal.
double symmetric_oracle(const Tensor& a, const Tensor& b, double tau) {
  const std::size_t n = a.rows(), d = a.cols();
  std::vector<double> s(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += double(a.at(i, c)) * double(b.at(j, c));
      s[i * n + j] = acc / tau;
    }
  }
  auto lse = [](const std::vector<double>& v) {
    const double m = *std::max_element(v.begin(), v.end());
    double acc = 0.0;
    for (double x : v) acc += std::exp(x - m);
    return m + std::log(acc);
  };
  double rows = 0.0, cols = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> r(n), c(n);
    for (std::size_t j = 0; j < n; ++j) {
      r[j] = s[i * n + j];
      c[j] = s[j * n + i];
    }
    rows += lse(r) - s[i * n + i];
    cols += lse(c) - s[i * n + i];
  }
  return 0.5 * (rows + cols) / double(n);
}

double percent(std::span<const std::size_t> pred, std::span<const geo::PointCloud> clouds) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == clouds[i].label;
  return 100.0 * double(hit) / double(std::max<std::size_t>(pred.size(), 1));
}

std::vector<geo::PointCloud> adversarial_of(const std::vector<atk::AttackResult>& results) {
  std::vector<geo::PointCloud> out;
  out.reserve(results.size());
  for (const auto& r : results) out.push_back(r.adversarial);
  return out;
}

double median3(std::array<double, 3> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

// ---------------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::array<int, 5> passed{};
  std::array<double, 5> worst{};
  auto note = [&](std::size_t slot, const diff::GradCheckReport& r) {
    passed[slot] += r.passed;
    worst[slot] = std::max(worst[slot], r.max_rel_error);
  };

  for (int trial = 0; trial < 100; ++trial) {
    const Tensor target = random_tensor({3, 5}, rng);
    diff::ScalarFn f = [&](Tape& t, Var x) { return diff::sum(diff::mul(diff::l2_normalize(x), t.constant(target))); };
    note(0, diff::finite_diff_check(f, random_tensor({3, 5}, rng, 0.2f, 1.0f)));
  }

  std::uniform_int_distribution<std::size_t> cls(0, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::vector<std::size_t> labels{cls(rng), cls(rng), cls(rng), cls(rng)};
    diff::ScalarFn f = [&](Tape&, Var x) { return diff::softmax_cross_entropy(x, labels); };
    note(1, diff::finite_diff_check(f, random_tensor({4, 5}, rng, -2.0f, 2.0f)));
  }

  for (int trial = 0; trial < 100; ++trial) {
    // Distinct, well separated entries keep each probe clear of the max kinks.
    std::vector<float> values(6 * 4);
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = 0.05f * float(i) - 0.6f;
    std::shuffle(values.begin(), values.end(), rng);
    const Tensor w = random_tensor({4, 3}, rng);
    diff::ScalarFn f = [&](Tape& t, Var x) {
      return diff::sum(diff::matmul(diff::reshape(diff::set_max_pool(x), Shape{1, 4}), t.constant(w)));
    };
    note(2, diff::finite_diff_check(f, Tensor(Shape{6, 4}, values)));
  }

  std::bernoulli_distribution coin(0.7);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor ref = random_unit_rows(5, 6, rng);
    loss::GateMask mask;
    for (std::size_t i = 0; i < 5; ++i) {
      mask.bits.push_back(i < 2 || coin(rng));
      mask.selected_count += mask.bits.back();
    }
    diff::ScalarFn f = [&](Tape& t, Var x) {
      return loss::cgc_loss(diff::l2_normalize(x), t.constant(ref), mask, 0.5f).loss;
    };
    note(3, diff::finite_diff_check(f, random_tensor({5, 6}, rng)));
  }

  std::uniform_real_distribution<float> l(0.0f, 5.0f);
  int strict = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::array<float, 3> losses{l(rng), l(rng), l(rng)};
    diff::ScalarFn f = [&](Tape& t, Var lam) {
      const std::array<Var, 3> v{t.constant(Tensor::scalar(losses[0])), t.constant(Tensor::scalar(losses[1])),
                                 t.constant(Tensor::scalar(losses[2]))};
      return loss::total_loss(v, lam).total;
    };
    const auto report = diff::finite_diff_check(f, random_tensor({3}, rng), 0.0078125);
    note(4, report);
    strict += report.max_rel_error < 1e-4;
  }

  const double secs = seconds_since(t0);
  const bool all = std::all_of(passed.begin(), passed.end(), [](int p) { return p == 100; });
  record(1, "gradient suite", all && secs < 30.0,
         fmt("rel err < 1e-3 on l2=%d ce=%d maxpool=%d cgc=%d total=%d of 100; worst %.2e %.2e %.2e %.2e %.2e; "
             "total below 1e-4 on %d/100; %.1fs",
             passed[0], passed[1], passed[2], passed[3], passed[4], worst[0], worst[1], worst[2], worst[3], worst[4],
             strict, secs));
}

void gate_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> value(-3, 3);  // a narrow range forces ties
  std::uniform_int_distribution<std::size_t> label(0, 9), kdist(1, 10);
  std::size_t matched = 0, ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor logits({8, 10});
    for (float& v : logits.data()) v = float(value(rng));
    std::vector<std::size_t> labels(8);
    for (auto& y : labels) y = label(rng);
    const std::size_t k = kdist(rng);
    const auto mask = loss::confidence_mask(logits, labels, k);

    bool same = mask.size() == 8;
    std::size_t count = 0;
    for (std::size_t i = 0; i < 8 && same; ++i) {
      std::vector<std::size_t> order(10);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return logits.at(i, a) > logits.at(i, b); });
      const bool expect = std::find(order.begin(), order.begin() + k, labels[i]) != order.begin() + k;
      same = mask.bits[i] == expect;
      count += expect;
      for (std::size_t j = 0; j < 10; ++j) ties += j != labels[i] && logits.at(i, j) == logits.at(i, labels[i]);
    }
    matched += same && count == mask.selected_count;
  }
  const double secs = seconds_since(t0);
  record(2, "gate oracle", matched == 1000 && secs < 5.0,
         fmt("%zu/1000 exact matches (%zu tied label logits), %.2fs", matched, ties, secs));
}

void loss_identities() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<std::size_t> rows(2, 12), dims(3, 16);
  std::uniform_real_distribution<float> taus(0.05f, 1.0f);
  double worst_cgc = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = rows(rng), d = dims(rng);
    const float tau = taus(rng);
    const Tensor a = random_unit_rows(n, d, rng), b = random_unit_rows(n, d, rng);
    Tape tape;
    const auto got = loss::cgc_loss(tape.constant(a), tape.constant(b), loss::GateMask::all(n), tau);
    const double want = symmetric_oracle(a, b, tau);
    worst_cgc = std::max(worst_cgc, std::abs(double(got.loss.value().item()) - want) / std::max(1.0, std::abs(want)));
  }

  std::uniform_real_distribution<float> l(0.0f, 5.0f), lam(-1.0f, 2.0f);
  double worst_sum = 0.0, worst_grad = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::array<float, 3> losses{l(rng), l(rng), l(rng)};
    for (bool at_zero : {true, false}) {
      const std::array<float, 3> lambdas = at_zero ? std::array<float, 3>{} : std::array{lam(rng), lam(rng), lam(rng)};
      Tape tape;
      const std::array<Var, 3> v{tape.constant(Tensor::scalar(losses[0])), tape.constant(Tensor::scalar(losses[1])),
                                 tape.constant(Tensor::scalar(losses[2]))};
      Var lv = tape.leaf(Tensor::vector({lambdas[0], lambdas[1], lambdas[2]}));
      const auto out = loss::total_loss(v, lv);
      tape.backward(out.total);
      if (at_zero) {
        const double sum = double(losses[0]) + losses[1] + losses[2];
        worst_sum = std::max(worst_sum, std::abs(out.total.value().item() - sum) / std::max(1.0, sum));
      }
      for (std::size_t k = 0; k < 3; ++k) {
        const double term = std::exp(-double(lambdas[k])) * losses[k];
        const double want = -term + 1.0;
        worst_grad = std::max(worst_grad, std::abs(lv.grad()[k] - want) / std::max(1.0, term));
      }
    }
  }
  const double tol = 1e-6;
  record(3, "loss identities", worst_cgc <= tol && worst_sum <= tol && worst_grad <= tol,
         fmt("max rel dev: cgc(all-ones) vs oracle %.2e, total(0) vs sum %.2e, dtotal/dlambda %.2e (tol %.0e)",
             worst_cgc, worst_sum, worst_grad, tol));
}

// ---------------------------------------------------------------------------

struct World {
  geo::SyntheticSplit split;
  pipe::BootstrapBundle bundle;
  double point_teacher = 0.0;
  double image_teacher = 0.0;
  double surrogate = 0.0;
  double bootstrap_seconds = 0.0;
};

World build_world(const fs::path& out) {
  World w;
  geo::SyntheticConfig sc;
  sc.seed = 0;
  w.split = geo::make_synthetic_split(sc);
  geo::write_manifest(w.split.train_manifest, out / "train_manifest.json");
  geo::write_manifest(w.split.test_manifest, out / "test_manifest.json");

  const auto t0 = Clock::now();
  w.bundle = pipe::bootstrap_all(w.split.train, enc::BootstrapConfig{}, 0);
  w.bootstrap_seconds = seconds_since(t0);
  fs::create_directories(out / "models");
  pipe::save_models(w.bundle.models, out / "models");
  enc::save_weights(w.bundle.surrogate, out / "models" / "surrogate.rpdt");

  const auto& test = w.split.test;
  const auto& m = w.bundle.models;
  const Tensor z_text = pipe::class_embeddings(test, enc::PromptParams{}, m.text);
  w.point_teacher = percent(enc::nearest_class(enc::embed_points(m.point_teacher, test.samples), z_text), test.samples);
  std::vector<proj::DepthImageSet> depth;
  for (const auto& s : test.samples) depth.push_back(proj::project_depth(s));
  w.image_teacher = percent(enc::nearest_class(enc::embed_images(m.image_teacher, depth), z_text), test.samples);
  w.surrogate = percent(enc::nearest_class(enc::embed_points(w.bundle.surrogate, test.samples), z_text), test.samples);
  std::printf("world: bootstrap %.0fs, test accuracy point teacher %.2f image teacher %.2f surrogate %.2f\n",
              w.bootstrap_seconds, w.point_teacher, w.image_teacher, w.surrogate);
  return w;
}

struct Accuracy {
  double clean = 0.0;
  double pgd = 0.0;
};

Accuracy clean_and_pgd(const atk::Classifier& model, const geo::Dataset& test) {
  Accuracy a;
  a.clean = percent(model.predict(test.samples), test.samples);
  const auto adv = adversarial_of(atk::run_attack(model, test.samples, atk::default_budget(atk::AttackKind::Pgd)));
  a.pgd = percent(model.predict(adv), test.samples);
  return a;
}

void attack_feasibility(const World& w) {
  const auto& m = w.bundle.models;
  const auto& test = w.split.test;
  const Tensor z_text = pipe::class_embeddings(test, enc::PromptParams{}, m.text);
  const atk::EmbeddingClassifier model(m.student, {}, z_text, pipe::DistillConfig{}.tau);
  const std::span<const geo::PointCloud> clouds(test.samples.data(), 200);
  const std::size_t n_points = clouds.front().size();

  std::vector<std::string> failures;
  std::size_t checked = 0;
  for (auto kind : {atk::AttackKind::Pgd, atk::AttackKind::Perturb, atk::AttackKind::Knn, atk::AttackKind::AddCd,
                    atk::AttackKind::AddHd, atk::AttackKind::Drop}) {
    auto budget = atk::default_budget(kind, n_points);
    budget.seed = 404;
    const auto results = atk::run_attack(model, clouds, budget);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      const auto& adv = results[i].adversarial;
      const auto& src = clouds[i];
      bool ok = true;
      switch (kind) {
        case atk::AttackKind::Pgd: {
          const double linf = geo::linf_distance(adv, src);
          ok = adv.size() == src.size() && linf <= budget.epsilon + 1e-6 &&
               std::abs(results[i].budget_used - linf) <= 1e-6;
          break;
        }
        case atk::AttackKind::Perturb:
        case atk::AttackKind::Knn: {
          const double cd = geo::chamfer_distance(adv, src);
          ok = adv.size() == src.size() && cd <= budget.epsilon + 1e-6 && std::abs(results[i].budget_used - cd) <= 1e-6;
          break;
        }
        case atk::AttackKind::AddCd:
        case atk::AttackKind::AddHd: {
          ok = adv.size() == src.size() + budget.count &&
               std::equal(src.points.begin(), src.points.end(), adv.points.begin());
          geo::PointCloud added;
          added.points.assign(adv.points.begin() + std::ptrdiff_t(std::min(src.size(), adv.size())), adv.points.end());
          const double d = kind == atk::AttackKind::AddHd ? geo::directed_hausdorff(added, src)
                                                          : geo::directed_chamfer(added, src);
          ok = ok && d <= budget.epsilon + 1e-6 && std::abs(results[i].budget_used - d) <= 1e-6;
          break;
        }
        case atk::AttackKind::Drop: {
          ok = adv.size() + budget.count == src.size() && results[i].budget_used == double(budget.count);
          for (const auto& p : adv.points) {
            ok = ok && std::find(src.points.begin(), src.points.end(), p) != src.points.end();
          }
          break;
        }
      }
      bad += !ok;
      ++checked;
    }
    if (bad) failures.push_back(fmt("%s:%zu", std::string(atk::attack_name(kind)).c_str(), bad));
  }
  std::string detail = fmt("%zu attacked samples over 6 kinds (200 each)", checked);
  for (const auto& f : failures) detail += " violation " + f;
  record(4, "attack feasibility", failures.empty(), detail);
}

Accuracy undefended_collapse(const World& w) {
  const auto t0 = Clock::now();
  const auto& m = w.bundle.models;
  const Tensor z_text = pipe::class_embeddings(w.split.test, enc::PromptParams{}, m.text);
  const atk::EmbeddingClassifier model(m.student, {}, z_text, pipe::DistillConfig{}.tau);
  const Accuracy a = clean_and_pgd(model, w.split.test);
  const double secs = seconds_since(t0);
  const bool teachers = w.point_teacher >= 90.0 && w.image_teacher >= 90.0;
  const double ratio = a.pgd / a.clean;
  record(5, "undefended collapse", teachers && ratio <= 0.30 && secs < 180.0,
         fmt("teachers %.2f/%.2f; student clean %.2f pgd %.2f (ratio %.3f, bound 0.300); %.0fs", w.point_teacher,
             w.image_teacher, a.clean, a.pgd, ratio, secs));
  return a;
}

struct DistillRun {
  std::uint64_t seed = 0;
  pipe::TrainState state;
  pipe::TrainLog log;
  Accuracy acc;
  double seconds = 0.0;
};

DistillRun run_distill(const World& w, std::uint64_t seed, const fs::path& dir) {
  DistillRun r;
  r.seed = seed;
  pipe::DistillConfig cfg;
  cfg.seed = seed;
  const auto t0 = Clock::now();
  pipe::Distiller d(w.split.train, w.bundle.models, cfg);
  r.state = d.initial_state();
  d.train(r.state, r.log);
  r.seconds = seconds_since(t0);

  fs::create_directories(dir);
  pipe::save_checkpoint(r.state, cfg, dir / "state.rpdt");
  r.log.write_train_log(dir / "train_log.csv");
  r.log.write_lambda_trace(dir / "lambda_trace.csv");
  std::ofstream(dir / "config.txt") << cfg.to_text();

  const Tensor z_text = pipe::class_embeddings(w.split.test, r.state.prompts, w.bundle.models.text);
  const atk::EmbeddingClassifier model(w.bundle.models.student, r.state.prompts.point_tokens, z_text, cfg.tau);
  r.acc = clean_and_pgd(model, w.split.test);
  std::printf("distill seed %llu: %.0fs, clean %.2f pgd %.2f\n", static_cast<unsigned long long>(seed), r.seconds,
              r.acc.clean, r.acc.pgd);
  std::fflush(stdout);
  return r;
}

// Index of the run with the median PGD gain.
std::size_t distillation_gain(const std::vector<DistillRun>& runs, const Accuracy& base) {
  std::array<double, 3> gain{}, drop{};
  double slowest = 0.0;
  std::string per_seed;
  for (std::size_t i = 0; i < 3; ++i) {
    gain[i] = runs[i].acc.pgd - base.pgd;
    drop[i] = base.clean - runs[i].acc.clean;
    slowest = std::max(slowest, runs[i].seconds);
    per_seed += fmt(" [seed %llu: %+.2f pgd, %+.2f clean]", static_cast<unsigned long long>(runs[i].seed), gain[i],
                    -drop[i]);
  }
  const double g = median3(gain), dr = median3(drop);
  record(6, "distillation gain", g >= 15.0 && dr <= 5.0 && slowest < 900.0,
         fmt("median pgd gain %+.2f (need >= +15), median clean drop %.2f (need <= 5), slowest run %.0fs;", g, dr,
             slowest) +
             per_seed);
  std::vector<std::size_t> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return gain[a] < gain[b]; });
  return order[1];
}

void blackbox_transfer(const World& w, const DistillRun& run, const fs::path& out) {
  const auto& test = w.split.test;
  const auto& m = w.bundle.models;
  const float tau = pipe::DistillConfig{}.tau;
  const Tensor plain_text = pipe::class_embeddings(test, enc::PromptParams{}, m.text);
  const atk::EmbeddingClassifier surrogate(w.bundle.surrogate, {}, plain_text, tau);
  std::vector<atk::AttackBudget> budgets;
  for (auto kind : {atk::AttackKind::Perturb, atk::AttackKind::Knn, atk::AttackKind::AddCd, atk::AttackKind::AddHd,
                    atk::AttackKind::Drop}) {
    budgets.push_back(atk::default_budget(kind, test.samples.front().size()));
  }
  const auto archive = atk::transfer_attack_set(surrogate, "surrogate", test, budgets);
  atk::write_archive(archive, out / "archive");

  const pipe::DefenseSuite suite(m, test.class_names, tau, &run.state.prompts);
  const auto report = pipe::evaluate_robustness(suite.defenses(), test, {}, pipe::EvalMode::BlackboxArchive, &archive);
  pipe::write_report(report, out / "blackbox");

  std::size_t wins = 0;
  std::string cells;
  for (const auto& name : report.attacks) {
    const double b = report.cell("clean_model", name), p = report.cell("mrpd", name);
    wins += p >= b;
    cells += fmt(" %s %.2f/%.2f", name.c_str(), p, b);
  }
  record(7, "black-box transfer", wins >= 4 && report.attacks.size() == 5,
         fmt("distilled >= baseline on %zu of %zu archived kinds (distilled/baseline):", wins, report.attacks.size()) +
             cells);
}

// ---------------------------------------------------------------------------

pipe::RobustnessReport short_report(const World& w, const enc::PromptParams& prompts, const fs::path& dir) {
  geo::Dataset subset{w.split.test.class_names, {}};
  for (std::size_t i = 0; i < w.split.test.size(); i += 5) subset.samples.push_back(w.split.test.samples[i]);
  const pipe::DefenseSuite suite(w.bundle.models, subset.class_names, pipe::DistillConfig{}.tau, &prompts);
  const std::vector<atk::AttackBudget> budgets{atk::default_budget(atk::AttackKind::Pgd)};
  auto report = pipe::evaluate_robustness(suite.defenses(), subset, budgets, pipe::EvalMode::Whitebox, nullptr, 7);
  pipe::write_report(report, dir);
  return pipe::read_report(dir);
}

double report_distance(const pipe::RobustnessReport& a, const pipe::RobustnessReport& b) {
  if (a.attacks != b.attacks || a.rows.size() != b.rows.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t r = 0; r < a.rows.size(); ++r) {
    const auto& x = a.rows[r];
    const auto& y = b.rows[r];
    if (x.defense != y.defense || x.robust.size() != y.robust.size()) return INFINITY;
    worst = std::max({worst, std::abs(x.clean - y.clean), std::abs(x.average_robust - y.average_robust)});
    for (std::size_t c = 0; c < x.robust.size(); ++c) worst = std::max(worst, std::abs(x.robust[c] - y.robust[c]));
  }
  return worst;
}

double tensor_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

void determinism_and_resume(const World& w, const fs::path& out) {
  pipe::DistillConfig cfg;
  cfg.epochs = 4;
  cfg.t_max = 4;
  cfg.seed = 17;
  const pipe::Distiller d(w.split.train, w.bundle.models, cfg);

  auto straight = [&] {
    auto s = d.initial_state();
    pipe::TrainLog log;
    d.train(s, log);
    return s;
  };
  const auto first = straight();
  const auto second = straight();

  auto head = d.initial_state();
  pipe::TrainLog log;
  d.train(head, log, 2);
  pipe::save_checkpoint(head, cfg, out / "resume" / "mid.rpdt");
  auto resumed = pipe::load_checkpoint(out / "resume" / "mid.rpdt");
  d.train(resumed, log);

  const auto r1 = short_report(w, first.prompts, out / "rerun_a");
  const auto r2 = short_report(w, second.prompts, out / "rerun_b");
  const auto r3 = short_report(w, resumed.prompts, out / "resume");
  const double rerun = report_distance(r1, r2), resume = report_distance(r1, r3);
  const double params = std::max({tensor_distance(first.prompts.point_tokens, resumed.prompts.point_tokens),
                                  tensor_distance(first.prompts.text_context, resumed.prompts.text_context)});
  double lambda = 0.0;
  for (std::size_t k = 0; k < 3; ++k) lambda = std::max(lambda, double(std::abs(first.lambda.lambda[k] - resumed.lambda.lambda[k])));
  record(8, "determinism and resume", rerun <= 1e-6 && resume <= 1e-6 && params <= 1e-6 && lambda <= 1e-6,
         fmt("rerun report max diff %.2e, resumed-vs-straight report %.2e, prompts %.2e, lambda %.2e", rerun, resume,
             params, lambda));
}

void zero_overhead(const World& w, const DistillRun& run) {
  const auto& m = w.bundle.models;
  const auto& test = w.split.test;
  const Tensor cached_plain = pipe::class_embeddings(test, enc::PromptParams{}, m.text);
  const Tensor cached_prompted = pipe::class_embeddings(test, run.state.prompts, m.text);

  std::size_t equal = 0;
  const std::size_t n = 50;
  for (std::size_t i = 0; i < n; ++i) {
    enc::reset_counters();
    pipe::classify(test.samples[i], enc::PromptParams{}, cached_plain, m.student);
    const enc::Counters plain = enc::counters();
    enc::reset_counters();
    pipe::classify(test.samples[i], run.state.prompts, cached_prompted, m.student);
    const enc::Counters prompted = enc::counters();
    equal += plain.point_forwards == prompted.point_forwards && plain.image_forwards == prompted.image_forwards &&
             plain.text_forwards == prompted.text_forwards &&
             plain.layer_evaluations == prompted.layer_evaluations && prompted.text_forwards == 0 &&
             prompted.point_forwards == 1;
  }

  const pipe::DistillConfig cfg;
  const std::size_t d_f = m.student.arch.feature_dim(), d_e = m.text.arch.feature_dim();
  const std::size_t expected = cfg.m_p * d_f + cfg.m_t * d_e + 3;
  const std::size_t counted = run.state.prompts.point_tokens.size() + run.state.prompts.text_context.size() +
                              run.state.lambda.lambda.size();
  const pipe::DefenseSuite suite(m, test.class_names, cfg.tau, &run.state.prompts);
  std::size_t reported = 0;
  for (const auto& row : suite.defenses()) {
    if (row.name == "mrpd") reported = row.added_parameters;
  }
  record(9, "zero-overhead inference", equal == n && counted == expected && reported == expected,
         fmt("identical encoder counters on %zu/%zu classify calls; added parameters %zu (reported %zu), "
             "M_p*D_f + M_t*D_e + 3 = %zu*%zu + %zu*%zu + 3 = %zu",
             equal, n, counted, reported, cfg.m_p, d_f, cfg.m_t, d_e, expected));
}

void lambda_telemetry(const DistillRun& run, const fs::path& path) {
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  std::size_t rows = 0, bad = 0;
  std::array<double, 6> last{};
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != 7) {
      ++bad;
      continue;
    }
    for (std::size_t k = 0; k < 3; ++k) bad += std::abs(v[4 + k] - std::exp(-v[1 + k])) > 1e-4 * v[4 + k];
    std::copy(v.begin() + 1, v.end(), last.begin());
    ++rows;
  }
  const bool ok = fs::exists(path) && rows == run.log.epochs.size() && rows > 0 && bad == 0;
  const char* ordering = (last[4] > last[5] && last[3] > last[5]) ? "w_P, w_I > w_T" : "w_P, w_I > w_T not observed";
  record(10, "lambda telemetry", ok,
         fmt("%s has %zu epoch rows; final w_I %.3f w_P %.3f w_T %.3f (observation: %s)", path.filename().c_str(),
             rows, last[3], last[4], last[5], ordering));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::create_directories(out);
  const auto t0 = Clock::now();
  try {
    gradient_suite();
    gate_oracle();
    loss_identities();

    const World world = build_world(out);
    attack_feasibility(world);
    const Accuracy base = undefended_collapse(world);

    std::vector<DistillRun> runs;
    for (std::uint64_t seed : {0, 1, 2}) runs.push_back(run_distill(world, seed, out / fmt("seed%llu", static_cast<unsigned long long>(seed))));
    const std::size_t median = distillation_gain(runs, base);
    blackbox_transfer(world, runs[median], out);
    determinism_and_resume(world, out);
    zero_overhead(world, runs[median]);
    lambda_telemetry(runs[median], out / fmt("seed%llu", static_cast<unsigned long long>(runs[median].seed)) /
                                       "lambda_trace.csv");
  } catch (const Error& e) {
    std::printf("aborted: %s\n", e.what());
    return 2;
  }

  const auto failed = std::count_if(outcomes.begin(), outcomes.end(), [](const Outcome& o) { return !o.pass; });
  std::printf("%zu/10 criteria passed in %.0fs\n", outcomes.size() - std::size_t(failed), seconds_since(t0));
  return failed == 0 && outcomes.size() == 10 ? 0 : 1;
}
