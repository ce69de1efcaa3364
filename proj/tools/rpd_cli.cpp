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

// Command-line driver: data generation, bootstrap, distillation, attack
// archives, evaluation and reporting. Every stage reads and writes plain
// files under --out so stages can be rerun independently.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rpd/attacks.hpp"
#include "rpd/encoders.hpp"
#include "rpd/error.hpp"
#include "rpd/geometry.hpp"
#include "rpd/pipeline.hpp"
#include "rpd/projection.hpp"

namespace fs = std::filesystem;
using namespace rpd;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";

  pipe::DistillConfig distill_config() const {
    pipe::DistillConfig cfg = config.empty() ? pipe::DistillConfig{} : pipe::load_config(config);
    if (seed) cfg.seed = *seed;
    return cfg;
  }
  std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(fallback); }
  fs::path out_dir() const {
    fs::create_directories(out);
    return out;
  }
};

geo::Dataset load_split(const fs::path& data_dir, const std::string& which) {
  const fs::path manifest = data_dir / (which + "_manifest.json");
  return geo::load_from_manifest(geo::read_manifest(manifest), data_dir);
}

std::vector<atk::AttackBudget> parse_attacks(const std::vector<std::string>& names, std::size_t points,
                                             std::uint64_t seed) {
  std::vector<atk::AttackBudget> out;
  for (const auto& n : names) {
    auto b = atk::default_budget(atk::attack_from_name(n), points);
    b.seed = seed;
    out.push_back(b);
  }
  return out;
}

std::size_t points_per_cloud(const geo::Dataset& d) { return d.samples.empty() ? 0 : d.samples.front().size(); }

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json metrics_json(const enc::BootstrapMetrics& m) {
  return {{"epochs", m.epochs},
          {"epoch_loss", m.epoch_loss},
          {"point_accuracy", m.point_accuracy},
          {"image_accuracy", m.image_accuracy}};
}

void print_report(const pipe::RobustnessReport& r) {
  std::printf("%-12s %8s", "defense", "clean");
  for (const auto& a : r.attacks) std::printf(" %8s", a.c_str());
  std::printf(" %8s %10s\n", "avg_R", "+params");
  for (const auto& row : r.rows) {
    std::printf("%-12s %8.2f", row.defense.c_str(), row.clean);
    for (double v : row.robust) std::printf(" %8.2f", v);
    std::printf(" %8.2f %10zu\n", row.average_robust, row.added_parameters);
  }
}

// ---------------------------------------------------------------------------

void run_gen_data(const Globals& g, const geo::SyntheticConfig& base, std::size_t pgm_samples) {
  geo::SyntheticConfig sc = base;
  sc.seed = g.seed_or(0);
  const auto split = geo::make_synthetic_split(sc);
  const fs::path out = g.out_dir();
  geo::write_manifest(split.train_manifest, out / "train_manifest.json");
  geo::write_manifest(split.test_manifest, out / "test_manifest.json");
  for (std::size_t i = 0; i < std::min(pgm_samples, split.test.size()); ++i) {
    const auto& s = split.test.samples[i];
    proj::write_pgm(proj::project_depth(s), out / "depth", s.id);
  }
  std::printf("wrote %zu train / %zu test samples over %zu classes to %s\n", split.train.size(), split.test.size(),
              split.train.num_classes(), out.string().c_str());
}

void run_bootstrap(const Globals& g, const fs::path& data) {
  const auto train = load_split(data, "train");
  const auto test = load_split(data, "test");
  const auto bundle = pipe::bootstrap_all(train, enc::BootstrapConfig{}, g.seed_or(0));
  const fs::path dir = g.out_dir() / "models";
  fs::create_directories(dir);
  pipe::save_models(bundle.models, dir);
  enc::save_weights(bundle.surrogate, dir / "surrogate.rpdt");

  const auto text = pipe::class_embeddings(test, enc::PromptParams{}, bundle.models.text);
  auto test_accuracy = [&](const enc::EncoderWeights& w) {
    return pipe::accuracy_percent(atk::EmbeddingClassifier(w, {}, text, 0.07f), test.samples);
  };
  std::vector<proj::DepthImageSet> depth;
  for (const auto& s : test.samples) depth.push_back(proj::project_depth(s));
  const auto pred = enc::nearest_class(enc::embed_images(bundle.models.image_teacher, depth), text);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.samples[i].label;

  const nlohmann::json summary = {
      {"seed", g.seed_or(0)},
      {"test_accuracy",
       {{"point_teacher", test_accuracy(bundle.models.point_teacher)},
        {"image_teacher", 100.0 * double(hit) / double(std::max<std::size_t>(pred.size(), 1))},
        {"student", test_accuracy(bundle.models.student)},
        {"surrogate", test_accuracy(bundle.surrogate)}}},
      {"teachers", metrics_json(bundle.teacher_metrics)},
      {"student", metrics_json(bundle.student_metrics)},
      {"surrogate", metrics_json(bundle.surrogate_metrics)},
      {"hashes",
       {{"student", bundle.models.student.content_hash()},
        {"point_teacher", bundle.models.point_teacher.content_hash()},
        {"image_teacher", bundle.models.image_teacher.content_hash()},
        {"text", bundle.models.text.content_hash()},
        {"surrogate", bundle.surrogate.content_hash()}}}};
  write_json(g.out_dir() / "bootstrap.json", summary);
  std::cout << summary["test_accuracy"].dump(2) << '\n';
}

void run_distill(const Globals& g, const fs::path& data, const fs::path& models_dir, const std::string& resume,
                 std::size_t checkpoint_every) {
  pipe::DistillConfig cfg = g.distill_config();
  const auto train = load_split(data, "train");
  const auto models = pipe::load_models(models_dir);
  pipe::Distiller d(train, models, cfg);
  pipe::TrainState state = resume.empty() ? d.initial_state() : pipe::load_checkpoint(resume);
  const fs::path out = g.out_dir();
  pipe::TrainLog log;
  const std::size_t every = checkpoint_every == 0 ? cfg.epochs : checkpoint_every;
  while (state.epoch < cfg.epochs) {
    d.train(state, log, std::min(cfg.epochs, state.epoch + every));
    const auto& rec = log.epochs.back();
    std::printf("epoch %zu lr %.2e total %.4f w_I %.3f w_P %.3f w_T %.3f\n", rec.epoch + 1, rec.lr, rec.mean_total,
                rec.weights[0], rec.weights[1], rec.weights[2]);
    pipe::save_checkpoint(state, cfg, out / "state.rpdt");
  }
  log.write_train_log(out / "train_log.csv");
  log.write_lambda_trace(out / "lambda_trace.csv");
  std::ofstream(out / "config.txt") << cfg.to_text();
}

void run_attack_gen(const Globals& g, const fs::path& data, const fs::path& models_dir,
                    const std::vector<std::string>& attacks) {
  const auto test = load_split(data, "test");
  const auto text = enc::load_weights(models_dir / "text.rpdt");
  const auto surrogate = enc::load_weights(models_dir / "surrogate.rpdt");
  const auto z_text = pipe::class_embeddings(test, enc::PromptParams{}, text);
  const atk::EmbeddingClassifier model(surrogate, {}, z_text, 0.07f);
  const auto budgets = parse_attacks(attacks, points_per_cloud(test), g.seed_or(0));
  const auto archive = atk::transfer_attack_set(model, "surrogate:" + surrogate.content_hash().substr(0, 16), test,
                                                budgets);
  atk::write_archive(archive, g.out_dir());
  std::printf("surrogate clean %.2f%%\n", pipe::accuracy_percent(model, test.samples));
  for (const auto& name : archive.attack_names()) {
    std::printf("surrogate on %-8s %.2f%%\n", name.c_str(), pipe::accuracy_percent(model, archive.clouds_for(name)));
  }
}

void run_evaluate(const Globals& g, const fs::path& data, const fs::path& models_dir, const std::string& state_path,
                  const std::string& archive_dir, bool adv_train, const std::vector<std::string>& attacks) {
  const pipe::DistillConfig cfg = g.distill_config();
  const auto train = load_split(data, "train");
  const auto test = load_split(data, "test");
  const auto models = pipe::load_models(models_dir);
  std::optional<pipe::TrainState> state;
  if (!state_path.empty()) state = pipe::load_checkpoint(state_path);
  std::optional<pipe::AdvTrainResult> adv;
  if (adv_train) adv = pipe::adv_train_baseline(train, models.student, models.text, cfg);

  const pipe::DefenseSuite suite(models, test.class_names, cfg.tau, state ? &state->prompts : nullptr,
                                 adv ? &*adv : nullptr);
  const auto budgets = parse_attacks(attacks, points_per_cloud(test), g.seed_or(0));
  auto report = pipe::evaluate_robustness(suite.defenses(), test, budgets, pipe::EvalMode::Whitebox, nullptr,
                                          g.seed_or(0));
  report.meta["config_hash"] = cfg.hash();
  pipe::write_report(report, g.out_dir());
  print_report(report);

  if (!archive_dir.empty()) {
    const auto archive = atk::read_archive(archive_dir);
    auto bb = pipe::evaluate_robustness(suite.defenses(), test, {}, pipe::EvalMode::BlackboxArchive, &archive,
                                        g.seed_or(0));
    bb.meta["config_hash"] = cfg.hash();
    pipe::write_report(bb, g.out_dir() / "blackbox");
    std::printf("\nblack-box transfer\n");
    print_report(bb);
  }
}

void run_export(const Globals& g, const fs::path& data, const fs::path& models_dir, const std::string& state_path,
                const std::string& attack) {
  const auto test = load_split(data, "test");
  const auto models = pipe::load_models(models_dir);
  enc::PromptParams prompts;
  if (!state_path.empty()) prompts = pipe::load_checkpoint(state_path).prompts;
  const fs::path out = g.out_dir() / "embeddings.csv";
  std::string csv;
  if (attack.empty()) {
    csv = pipe::export_embeddings(models.student, prompts, test);
  } else {
    const auto z_text = pipe::class_embeddings(test, prompts, models.text);
    const atk::EmbeddingClassifier model(models.student, prompts.point_tokens, z_text, g.distill_config().tau);
    auto budget = atk::default_budget(atk::attack_from_name(attack), points_per_cloud(test));
    budget.seed = g.seed_or(0);
    csv = pipe::export_embeddings(models.student, prompts, test, &model, &budget);
  }
  std::ofstream(out) << csv;
  std::printf("wrote %s\n", out.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust prompt distillation for point-cloud classifiers"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "DistillConfig file (key = value lines)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for data, bootstrap, training and attacks");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  std::string data = "run/data", models = "run/bootstrap/models", state, archive, in_dir = "run/eval", attack, resume;
  std::vector<std::string> attacks{"pgd", "perturb", "knn", "add_cd", "add_hd", "drop"};

  auto* gen = app.add_subcommand("gen-data", "Write synthetic train/test manifests");
  geo::SyntheticConfig sc;
  std::size_t pgm = 0;
  gen->add_option("--train-per-class", sc.train_per_class)->capture_default_str();
  gen->add_option("--test-per-class", sc.test_per_class)->capture_default_str();
  gen->add_option("--points", sc.points)->capture_default_str();
  gen->add_option("--noise", sc.noise)->capture_default_str();
  gen->add_option("--pgm", pgm, "Dump depth images of the first N test samples")->capture_default_str();

  auto* boot = app.add_subcommand("bootstrap", "Train teachers, student and transfer surrogate");
  boot->add_option("--data", data, "Directory holding the manifests")->capture_default_str();

  auto* dist = app.add_subcommand("distill", "Learn point prompts, text context and loss weights");
  std::size_t checkpoint_every = 0;
  dist->add_option("--data", data)->capture_default_str();
  dist->add_option("--models", models)->capture_default_str();
  dist->add_option("--resume", resume, "Training checkpoint to continue from")->check(CLI::ExistingFile);
  dist->add_option("--checkpoint-every", checkpoint_every, "Epochs between checkpoints (0: at the end)");

  auto* agen = app.add_subcommand("attack-gen", "Build the black-box archive against the surrogate");
  agen->add_option("--data", data)->capture_default_str();
  agen->add_option("--models", models)->capture_default_str();
  agen->add_option("--attacks", attacks)->capture_default_str();

  auto* eval = app.add_subcommand("evaluate", "White-box robustness grid, optional archive replay");
  bool adv_train = false;
  eval->add_option("--data", data)->capture_default_str();
  eval->add_option("--models", models)->capture_default_str();
  eval->add_option("--state", state, "Distillation checkpoint for the prompted row")->check(CLI::ExistingFile);
  eval->add_option("--archive", archive, "Archive directory for black-box rows")->check(CLI::ExistingDirectory);
  eval->add_flag("--adv-train", adv_train, "Include the adversarially fine-tuned head");
  eval->add_option("--attacks", attacks)->capture_default_str();

  auto* exp = app.add_subcommand("export-embeddings", "Student embeddings of the test split as CSV");
  exp->add_option("--data", data)->capture_default_str();
  exp->add_option("--models", models)->capture_default_str();
  exp->add_option("--state", state)->check(CLI::ExistingFile);
  exp->add_option("--attack", attack, "Attack the samples first (pgd, perturb, ...)");

  auto* rep = app.add_subcommand("report", "Print a stored report with Avg. R recomputed");
  rep->add_option("--in", in_dir, "Directory holding report.csv")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) run_gen_data(g, sc, pgm);
    if (*boot) run_bootstrap(g, data);
    if (*dist) run_distill(g, data, models, resume, checkpoint_every);
    if (*agen) run_attack_gen(g, data, models, attacks);
    if (*eval) run_evaluate(g, data, models, state, archive, adv_train, attacks);
    if (*exp) run_export(g, data, models, state, attack);
    if (*rep) {
      const auto r = pipe::read_report(in_dir);
      print_report(r);
      if (!r.meta.empty()) std::cout << r.meta.dump(2) << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
