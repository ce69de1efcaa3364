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

#include "rpd/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "rpd/error.hpp"
#include "rpd/projection.hpp"
#include "rpd/tensor_io.hpp"

namespace rpd::pipe {

using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw Error(ErrorCode::ConfigError, "bad value '" + std::string(text) + "' for " + std::string(key));
  }
  return value;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void DistillConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::ConfigError, msg); };
  if (epochs == 0 || batch_size < 2) fail("epochs must be positive and batch_size at least 2");
  if (!(lr > 0.0f) || !(eta_min > 0.0f) || eta_min > lr) fail("need 0 < eta_min <= lr");
  if (weight_decay < 0.0f) fail("weight_decay must be nonnegative");
  if (t_max == 0) fail("t_max must be positive");
  if (!(tau > 0.0f)) fail("tau must be positive");
  if (k == 0) fail("k must be at least 1");
  if (lambda_min > 0.0f) fail("lambda_min must be <= 0");
  if (adv_mix < 0.0f || adv_mix > 1.0f) fail("adv_mix must be in [0, 1]");
  if (pgd_epsilon < 0.0f || pgd_step_size < 0.0f) fail("PGD budget must be nonnegative");
  if (token_init_quantile < 0.0f || token_init_quantile > 1.0f) fail("token_init_quantile must be in [0, 1]");
  if (teacher_input != "clean" && teacher_input != "attacked") fail("teacher_input must be clean or attacked");
}

nlohmann::json DistillConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"t_max", t_max},
          {"eta_min", eta_min},
          {"tau", tau},
          {"k", k},
          {"m_p", m_p},
          {"m_t", m_t},
          {"lambda_min", lambda_min},
          {"adv_mix", adv_mix},
          {"pgd_epsilon", pgd_epsilon},
          {"pgd_steps", pgd_steps},
          {"pgd_step_size", pgd_step_size},
          {"token_init_quantile", token_init_quantile},
          {"baseline_epochs", baseline_epochs},
          {"teacher_input", teacher_input},
          {"seed", seed}};
}

std::string DistillConfig::to_text() const {
  std::ostringstream out;
  const nlohmann::json j = to_json();
  for (const auto& [key, value] : j.items()) {
    out << key << " = ";
    if (value.is_string()) {
      out << value.get<std::string>();
    } else if (value.is_number_float()) {
      out << format_float(value.get<double>());
    } else {
      out << value.dump();
    }
    out << '\n';
  }
  return out.str();
}

std::string DistillConfig::hash() const { return io::sha256_hex(to_text()); }

DistillConfig parse_config(std::string_view text, DistillConfig cfg) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorCode::ConfigError, "line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (key == "epochs") cfg.epochs = parse_number<std::size_t>(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_number<std::size_t>(key, value);
    else if (key == "lr") cfg.lr = parse_number<float>(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_number<float>(key, value);
    else if (key == "t_max") cfg.t_max = parse_number<std::size_t>(key, value);
    else if (key == "eta_min") cfg.eta_min = parse_number<float>(key, value);
    else if (key == "tau") cfg.tau = parse_number<float>(key, value);
    else if (key == "k") cfg.k = parse_number<std::size_t>(key, value);
    else if (key == "m_p") cfg.m_p = parse_number<std::size_t>(key, value);
    else if (key == "m_t") cfg.m_t = parse_number<std::size_t>(key, value);
    else if (key == "lambda_min") cfg.lambda_min = parse_number<float>(key, value);
    else if (key == "adv_mix") cfg.adv_mix = parse_number<float>(key, value);
    else if (key == "pgd_epsilon") cfg.pgd_epsilon = parse_number<float>(key, value);
    else if (key == "pgd_steps") cfg.pgd_steps = parse_number<std::size_t>(key, value);
    else if (key == "pgd_step_size") cfg.pgd_step_size = parse_number<float>(key, value);
    else if (key == "token_init_quantile") cfg.token_init_quantile = parse_number<float>(key, value);
    else if (key == "baseline_epochs") cfg.baseline_epochs = parse_number<std::size_t>(key, value);
    else if (key == "teacher_input") cfg.teacher_input = std::string(value);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
    else throw Error(ErrorCode::ConfigError, "unknown config key '" + std::string(key) + "'");
  }
  cfg.validate();
  return cfg;
}

DistillConfig load_config(const std::filesystem::path& path, DistillConfig base) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), std::move(base));
}

double cosine_lr(std::size_t step, const DistillConfig& cfg) {
  if (step > cfg.t_max) {
    throw Error(ErrorCode::StepOutOfRange, "step " + std::to_string(step) + " beyond T_max " + std::to_string(cfg.t_max));
  }
  return optim::cosine_schedule(double(step), double(cfg.t_max), cfg.lr, cfg.eta_min);
}

// ---------------------------------------------------------------------------
// Models

void save_models(const ModelSet& m, const std::filesystem::path& dir) {
  enc::save_weights(m.student, dir / "student.rpdt");
  enc::save_weights(m.point_teacher, dir / "point_teacher.rpdt");
  enc::save_weights(m.image_teacher, dir / "image_teacher.rpdt");
  enc::save_weights(m.text, dir / "text.rpdt");
}

ModelSet load_models(const std::filesystem::path& dir) {
  return {enc::load_weights(dir / "student.rpdt"), enc::load_weights(dir / "point_teacher.rpdt"),
          enc::load_weights(dir / "image_teacher.rpdt"), enc::load_weights(dir / "text.rpdt")};
}

BootstrapBundle bootstrap_all(const geo::Dataset& train, const enc::BootstrapConfig& cfg, std::uint64_t seed) {
  BootstrapBundle out;
  auto teachers = enc::bootstrap_teachers(train, cfg, atk::sample_seed(seed, 0));
  auto student = enc::bootstrap_point_encoder(train, enc::student_architecture(), teachers.text, cfg,
                                              atk::sample_seed(seed, 1));
  auto surrogate = enc::bootstrap_point_encoder(train, enc::surrogate_architecture(), teachers.text, cfg,
                                                atk::sample_seed(seed, 2));
  out.models = {std::move(student.weights), std::move(teachers.point), std::move(teachers.image),
                std::move(teachers.text)};
  out.surrogate = std::move(surrogate.weights);
  out.teacher_metrics = std::move(teachers.metrics);
  out.student_metrics = std::move(student.metrics);
  out.surrogate_metrics = std::move(surrogate.metrics);
  return out;
}

// ---------------------------------------------------------------------------
// Logs

void TrainLog::write_train_log(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << "step,L_I,L_P,L_T,w_I,w_P,w_T,gate_frac_I,gate_frac_P,gate_frac_T,total\n";
  for (const auto& b : steps) {
    out << b.step;
    for (float v : b.losses) out << ',' << format_float(v);
    for (float v : b.weights) out << ',' << format_float(v);
    for (float v : b.gate_fraction) out << ',' << format_float(v);
    out << ',' << format_float(b.total) << '\n';
  }
}

void TrainLog::write_lambda_trace(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << "epoch,lambda_I,lambda_P,lambda_T,w_I,w_P,w_T\n";
  for (const auto& e : epochs) {
    out << e.epoch;
    for (float v : e.lambda) out << ',' << format_float(v);
    for (float v : e.weights) out << ',' << format_float(v);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Distillation

namespace {

std::vector<std::string> hashes(const ModelSet& m) {
  return {m.student.content_hash(), m.point_teacher.content_hash(), m.image_teacher.content_hash(),
          m.text.content_hash()};
}

geo::PointCloud inside_unit_sphere(geo::PointCloud pc) {
  for (auto& p : pc.points) {
    const float r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    if (r > 1.0f) {
      for (float& c : p) c /= r;
    }
  }
  return pc;
}

Tensor gather(const Tensor& t, std::span<const std::size_t> rows) {
  Tensor out(Shape{rows.size(), t.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(t.row(rows[i]).begin(), t.cols(), out.row(i).begin());
  return out;
}

}  // namespace

Distiller::Distiller(const geo::Dataset& train, const ModelSet& models, DistillConfig cfg)
    : train_(&train), models_(&models), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (train.samples.empty()) throw Error(ErrorCode::InvalidArgument, "empty training set");
  if (models.student.arch.kind != enc::EncoderKind::Point || models.point_teacher.arch.kind != enc::EncoderKind::Point ||
      models.image_teacher.arch.kind != enc::EncoderKind::Image || models.text.arch.kind != enc::EncoderKind::Text) {
    throw Error(ErrorCode::ArchitectureMismatch, "model set has the wrong encoder kinds");
  }
  if (cfg_.k > train.num_classes()) throw Error(ErrorCode::KOutOfRange, "k exceeds the class count");
  teacher_hashes_ = hashes(models);
  if (cfg_.teacher_input == "clean") {
    std::vector<proj::DepthImageSet> depth;
    depth.reserve(train.size());
    for (const auto& s : train.samples) {
      depth.push_back(proj::project_depth(s, models.image_teacher.arch.resolution, models.image_teacher.arch.views));
    }
    z_image_ = enc::embed_images(models.image_teacher, depth);
    z_point_ = enc::embed_points(models.point_teacher, train.samples);
  }
}

TrainState Distiller::initial_state() const {
  TrainState s;
  s.rng.seed(cfg_.seed);
  s.optimizer = optim::AdamW({0.9f, 0.999f, 1e-8f, cfg_.weight_decay});
  s.lambda.lambda_min = cfg_.lambda_min;
  const std::size_t d_f = models_->student.arch.feature_dim();
  const std::size_t d_e = models_->text.arch.feature_dim();
  s.prompts = enc::PromptParams::zeros(cfg_.m_p, d_f, cfg_.m_t, d_e);
  if (cfg_.m_p > 0) {
    // ReLU features are nonnegative, so tokens at zero would never win the
    // max pool. Token m starts at the (m+1)/M_p * q quantile of each pooled
    // channel over the clean training set.
    const Tensor pooled = enc::pooled_point_features(models_->student, train_->samples);
    std::vector<float> column(pooled.rows());
    for (std::size_t d = 0; d < d_f; ++d) {
      for (std::size_t i = 0; i < pooled.rows(); ++i) column[i] = pooled.at(i, d);
      std::sort(column.begin(), column.end());
      for (std::size_t m = 0; m < cfg_.m_p; ++m) {
        const double q = cfg_.token_init_quantile * double(m + 1) / double(cfg_.m_p);
        const auto idx = static_cast<std::size_t>(std::floor(q * double(column.size() - 1)));
        s.prompts.point_tokens.at(m, d) = column[idx];
      }
    }
  }
  return s;
}

void Distiller::run_epoch(TrainState& state, TrainLog& log) const {
  const auto& train = *train_;
  const auto& m = *models_;
  const std::size_t n = train.size();
  const float lr = static_cast<float>(cosine_lr(std::min(state.epoch, cfg_.t_max), cfg_));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), state.rng);

  EpochRecord rec;
  rec.epoch = state.epoch;
  rec.lr = lr;
  std::size_t batches = 0;

  for (std::size_t start = 0; start < n; start += cfg_.batch_size) {
    const std::size_t b = std::min(cfg_.batch_size, n - start);
    if (b < 2) continue;
    const std::span<const std::size_t> idx(order.data() + start, b);
    std::vector<std::size_t> labels(b), attacked_pos;
    std::vector<geo::PointCloud> inputs(b);
    std::bernoulli_distribution coin(cfg_.adv_mix);
    for (std::size_t i = 0; i < b; ++i) {
      labels[i] = train.samples[idx[i]].label;
      inputs[i] = train.samples[idx[i]];
      if (coin(state.rng)) attacked_pos.push_back(i);
    }
    const std::uint64_t attack_seed = state.rng();
    if (!attacked_pos.empty() && cfg_.pgd_steps > 0 && cfg_.pgd_epsilon > 0.0f) {
      const Tensor z_text_now = enc::encode_text(train.class_names, state.prompts.text_context, m.text);
      const atk::EmbeddingClassifier current(m.student, state.prompts.point_tokens, z_text_now, cfg_.tau);
      std::vector<geo::PointCloud> victims;
      std::vector<std::size_t> victim_labels;
      for (auto i : attacked_pos) {
        victims.push_back(inputs[i]);
        victim_labels.push_back(labels[i]);
      }
      atk::AttackBudget budget;
      budget.kind = atk::AttackKind::Pgd;
      budget.epsilon = cfg_.pgd_epsilon;
      budget.steps = cfg_.pgd_steps;
      budget.step_size = cfg_.pgd_step_size;
      budget.seed = attack_seed;
      auto adv = atk::pgd_attack(current, victims, victim_labels, budget);
      for (std::size_t j = 0; j < attacked_pos.size(); ++j) inputs[attacked_pos[j]] = std::move(adv[j].adversarial);
      rec.attacked += attacked_pos.size();
    }

    Tape tape;
    const enc::BoundEncoder student = enc::bind(tape, m.student, false);
    const enc::BoundEncoder text = enc::bind(tape, m.text, false);
    Var tokens = state.prompts.point_tokens.empty() ? Var{} : tape.leaf(state.prompts.point_tokens);
    Var context = state.prompts.text_context.empty() ? Var{} : tape.leaf(state.prompts.text_context);
    Var lambda = tape.leaf(Tensor(Shape{3}, std::vector<float>(state.lambda.lambda.begin(), state.lambda.lambda.end())));

    Var z_text = enc::text_forward(text, train.class_names, context);
    std::vector<std::size_t> offsets;
    Var points = tape.constant(geo::stack_points(inputs, offsets));
    Var z_stu = enc::point_forward(student, points, offsets, tokens);

    Tensor z_img, z_pt;
    if (cfg_.teacher_input == "clean") {
      z_img = gather(z_image_, idx);
      z_pt = gather(z_point_, idx);
    } else {
      std::vector<proj::DepthImageSet> depth;
      std::vector<geo::PointCloud> bounded;
      for (const auto& pc : inputs) {
        bounded.push_back(inside_unit_sphere(pc));
        depth.push_back(proj::project_depth(bounded.back(), m.image_teacher.arch.resolution, m.image_teacher.arch.views));
      }
      z_img = enc::embed_images(m.image_teacher, depth);
      z_pt = enc::embed_points(m.point_teacher, bounded);
    }

    Var ref_text = loss::text_reference(z_text, labels);
    const std::array<Tensor, 3> refs{z_img, z_pt, ref_text.value()};
    std::array<Var, 3> ref_vars{tape.constant(z_img), tape.constant(z_pt), ref_text};
    std::array<Var, 3> losses;
    loss::LossBreakdown breakdown;
    for (std::size_t t = 0; t < 3; ++t) {
      const auto mask = loss::confidence_mask(loss::reference_logits(refs[t], z_text.value(), cfg_.tau), labels, cfg_.k);
      losses[t] = loss::cgc_loss(z_stu, ref_vars[t], mask, cfg_.tau).loss;
      breakdown.gate_fraction[t] = static_cast<float>(mask.fraction());
    }
    loss::TotalLoss total;
    try {
      total = loss::total_loss(losses, lambda);
    } catch (const Error& e) {
      throw Error(e.code(), "step " + std::to_string(state.step) + ": " + e.what());
    }
    tape.backward(total.total);

    std::vector<optim::ParamRef> params;
    if (tokens.valid()) params.push_back({"point_tokens", &state.prompts.point_tokens, &tokens.grad(), true});
    if (context.valid()) params.push_back({"text_context", &state.prompts.text_context, &context.grad(), true});
    Tensor lambda_value = lambda.value();
    params.push_back({"lambda", &lambda_value, &lambda.grad(), false});
    state.optimizer.step(params, lr);
    std::copy(lambda_value.data().begin(), lambda_value.data().end(), state.lambda.lambda.begin());
    state.lambda.clamp();

    breakdown = {state.step, total.breakdown.losses, total.breakdown.lambda, total.breakdown.weights,
                 breakdown.gate_fraction, total.breakdown.total};
    log.steps.push_back(breakdown);
    rec.mean_total += breakdown.total;
    for (std::size_t t = 0; t < 3; ++t) {
      rec.mean_losses[t] += breakdown.losses[t];
      rec.gate_fraction[t] += breakdown.gate_fraction[t];
    }
    ++batches;
    ++state.step;
  }
  const double denom = double(std::max<std::size_t>(batches, 1));
  rec.mean_total /= denom;
  for (std::size_t t = 0; t < 3; ++t) {
    rec.mean_losses[t] /= denom;
    rec.gate_fraction[t] /= denom;
  }
  rec.lambda = state.lambda.lambda;
  rec.weights = state.lambda.effective();
  log.epochs.push_back(rec);
  ++state.epoch;
}

void Distiller::train(TrainState& state, TrainLog& log, std::size_t until) const {
  until = std::min(until, cfg_.epochs);
  while (state.epoch < until) run_epoch(state, log);
  if (hashes(*models_) != teacher_hashes_) {
    throw Error(ErrorCode::FrozenViolation, "a frozen network changed during distillation");
  }
}

TrainState distill(const geo::Dataset& train, const ModelSet& models, const DistillConfig& cfg, TrainLog* log) {
  Distiller d(train, models, cfg);
  TrainState state = d.initial_state();
  TrainLog local;
  d.train(state, log ? *log : local);
  return state;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const TrainState& s, const DistillConfig& cfg, const std::filesystem::path& path) {
  io::TensorFile f;
  if (!s.prompts.point_tokens.empty()) f.put("prompt.point_tokens", s.prompts.point_tokens);
  if (!s.prompts.text_context.empty()) f.put("prompt.text_context", s.prompts.text_context);
  f.put("lambda", Tensor(Shape{3}, std::vector<float>(s.lambda.lambda.begin(), s.lambda.lambda.end())));
  s.optimizer.save(f);
  std::ostringstream rng;
  rng << s.rng;
  f.meta["kind"] = "train_state";
  f.meta["epoch"] = s.epoch;
  f.meta["step"] = s.step;
  f.meta["rng"] = rng.str();
  f.meta["lambda_min"] = s.lambda.lambda_min;
  f.meta["config"] = cfg.to_json();
  f.meta["config_text"] = cfg.to_text();
  io::write_tensor_file(path, f);
}

TrainState load_checkpoint(const std::filesystem::path& path, DistillConfig* cfg) {
  const io::TensorFile f = io::read_tensor_file(path);
  if (f.meta.value("kind", std::string()) != "train_state") {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + " is not a training checkpoint");
  }
  TrainState s;
  if (const Tensor* t = f.find("prompt.point_tokens")) s.prompts.point_tokens = *t;
  if (const Tensor* t = f.find("prompt.text_context")) s.prompts.text_context = *t;
  const Tensor& lambda = f.get("lambda");
  std::copy(lambda.data().begin(), lambda.data().end(), s.lambda.lambda.begin());
  s.lambda.lambda_min = f.meta.at("lambda_min").get<float>();
  const DistillConfig stored = parse_config(f.meta.at("config_text").get<std::string>());
  s.optimizer = optim::AdamW({0.9f, 0.999f, 1e-8f, stored.weight_decay});
  s.optimizer.load(f);
  s.epoch = f.meta.at("epoch").get<std::size_t>();
  s.step = f.meta.at("step").get<std::size_t>();
  std::istringstream rng(f.meta.at("rng").get<std::string>());
  rng >> s.rng;
  if (cfg != nullptr) *cfg = stored;
  return s;
}

// ---------------------------------------------------------------------------
// Baseline and inference

AdvTrainResult adv_train_baseline(const geo::Dataset& train, const enc::EncoderWeights& student,
                                  const enc::EncoderWeights& text, const DistillConfig& cfg) {
  cfg.validate();
  const std::string backbone = [&] {
    io::TensorFile f;
    for (std::size_t i = 0; i < student.shared.size(); ++i) f.put(std::to_string(i), student.shared[i].weight);
    return io::content_hash(f.tensors);
  }();
  AdvTrainResult out;
  out.student = student;
  out.student.frozen = false;
  out.added_parameters = student.head_parameter_count();
  const Tensor z_text = enc::encode_text(train.class_names, Tensor(), text);
  optim::AdamW opt({0.9f, 0.999f, 1e-8f, cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  DistillConfig sched = cfg;
  sched.t_max = std::max<std::size_t>(cfg.baseline_epochs, 1);

  for (std::size_t epoch = 0; epoch < cfg.baseline_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const float lr = static_cast<float>(cosine_lr(epoch, sched));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - start);
      if (b < 2) continue;
      std::vector<geo::PointCloud> inputs;
      std::vector<std::size_t> labels, attacked_pos;
      std::bernoulli_distribution coin(cfg.adv_mix);
      for (std::size_t i = 0; i < b; ++i) {
        inputs.push_back(train.samples[order[start + i]]);
        labels.push_back(inputs.back().label);
        if (coin(rng)) attacked_pos.push_back(i);
      }
      const std::uint64_t attack_seed = rng();
      if (!attacked_pos.empty()) {
        const atk::EmbeddingClassifier current(out.student, Tensor(), z_text, cfg.tau);
        std::vector<geo::PointCloud> victims;
        std::vector<std::size_t> victim_labels;
        for (auto i : attacked_pos) {
          victims.push_back(inputs[i]);
          victim_labels.push_back(labels[i]);
        }
        atk::AttackBudget budget;
        budget.epsilon = cfg.pgd_epsilon;
        budget.steps = cfg.pgd_steps;
        budget.step_size = cfg.pgd_step_size;
        budget.seed = attack_seed;
        auto adv = atk::pgd_attack(current, victims, victim_labels, budget);
        for (std::size_t j = 0; j < attacked_pos.size(); ++j) inputs[attacked_pos[j]] = std::move(adv[j].adversarial);
      }
      Tape tape;
      const enc::BoundEncoder enc = enc::bind(tape, out.student, true);
      std::vector<std::size_t> offsets;
      Var pts = tape.constant(geo::stack_points(inputs, offsets));
      Var z = enc::point_forward(enc, pts, offsets);
      Var logits = diff::scale(diff::matmul_nt(z, tape.constant(z_text)), 1.0f / cfg.tau);
      tape.backward(diff::softmax_cross_entropy(logits, labels));
      std::vector<optim::ParamRef> params;
      auto tensors = out.student.named_tensors();
      const auto vars = enc.parameters();
      for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].first.rfind("head.", 0) != 0) continue;
        params.push_back({tensors[i].first, tensors[i].second, &vars[i].second.grad(),
                          tensors[i].first.find("bias") == std::string::npos});
      }
      opt.step(params, lr);
    }
  }
  io::TensorFile check;
  for (std::size_t i = 0; i < out.student.shared.size(); ++i) check.put(std::to_string(i), out.student.shared[i].weight);
  if (io::content_hash(check.tensors) != backbone) throw Error(ErrorCode::FrozenViolation, "backbone changed");
  out.student.arch.name = "student_adv";
  out.student.frozen = true;
  return out;
}

std::size_t classify(const geo::PointCloud& pc, const enc::PromptParams& prompts, const Tensor& cached_text,
                     const enc::EncoderWeights& student) {
  const Tensor z = enc::encode_student(pc, prompts, student);
  return enc::nearest_class(z.reshaped({1, z.size()}), cached_text).front();
}

Tensor class_embeddings(const geo::Dataset& data, const enc::PromptParams& prompts, const enc::EncoderWeights& text) {
  return enc::encode_text(data.class_names, prompts.text_context, text);
}

// ---------------------------------------------------------------------------
// Evaluation

const ReportRow& RobustnessReport::row(std::string_view defense) const {
  for (const auto& r : rows) {
    if (r.defense == defense) return r;
  }
  throw Error(ErrorCode::InvalidArgument, "no report row '" + std::string(defense) + "'");
}

double RobustnessReport::cell(std::string_view defense, std::string_view attack) const {
  const auto& r = row(defense);
  for (std::size_t a = 0; a < attacks.size(); ++a) {
    if (attacks[a] == attack) return r.robust[a];
  }
  throw Error(ErrorCode::InvalidArgument, "no report column '" + std::string(attack) + "'");
}

namespace {

std::vector<geo::PointCloud> preprocess(const DefenseModel& d, const std::vector<geo::PointCloud>& clouds,
                                        std::uint64_t seed) {
  if (d.preprocess == Preprocess::None) return clouds;
  std::vector<geo::PointCloud> out;
  out.reserve(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    if (d.preprocess == Preprocess::Srs) {
      out.push_back(atk::srs_defense(clouds[i], d.srs_ratio, atk::sample_seed(seed, i)));
    } else {
      out.push_back(atk::sor_defense(clouds[i], d.sor_k, d.sor_alpha));
    }
  }
  return out;
}

}  // namespace

double accuracy_percent(const atk::Classifier& model, std::span<const geo::PointCloud> clouds) {
  const auto pred = model.predict(clouds);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < clouds.size(); ++i) hit += pred[i] == clouds[i].label ? 1 : 0;
  return clouds.empty() ? 0.0 : 100.0 * double(hit) / double(clouds.size());
}

DefenseSuite::DefenseSuite(const ModelSet& models, const std::vector<std::string>& class_names, float tau,
                           const enc::PromptParams* prompts, const AdvTrainResult* adv) {
  const Tensor plain_text = class_embeddings(geo::Dataset{class_names, {}}, enc::PromptParams{}, models.text);
  classifiers_.push_back(std::make_unique<atk::EmbeddingClassifier>(models.student, Tensor(), plain_text, tau));
  const atk::Classifier* base = classifiers_.back().get();
  rows_.push_back({"clean_model", base});
  rows_.push_back({"srs", base, Preprocess::Srs});
  rows_.push_back({"sor", base, Preprocess::Sor});
  if (adv != nullptr) {
    classifiers_.push_back(std::make_unique<atk::EmbeddingClassifier>(adv->student, Tensor(), plain_text, tau));
    rows_.push_back({"adv_train", classifiers_.back().get()});
    rows_.back().added_parameters = adv->added_parameters;
  }
  if (prompts != nullptr) {
    const Tensor text = class_embeddings(geo::Dataset{class_names, {}}, *prompts, models.text);
    classifiers_.push_back(std::make_unique<atk::EmbeddingClassifier>(models.student, prompts->point_tokens, text, tau));
    prompted_ = classifiers_.back().get();
    rows_.push_back({"mrpd", prompted_});
    rows_.back().added_parameters = prompts->parameter_count() + 3;
  }
}

const atk::Classifier& DefenseSuite::prompted() const {
  if (prompted_ == nullptr) throw Error(ErrorCode::InvalidArgument, "suite has no prompted student");
  return *prompted_;
}

RobustnessReport evaluate_robustness(std::span<const DefenseModel> defenses, const geo::Dataset& test,
                                     std::span<const atk::AttackBudget> attacks, EvalMode mode,
                                     const atk::AdversarialArchive* archive, std::uint64_t seed) {
  RobustnessReport report;
  if (mode == EvalMode::BlackboxArchive) {
    if (archive == nullptr) throw Error(ErrorCode::ArchiveMismatch, "archive mode needs an archive");
    if (archive->class_names != test.class_names) {
      throw Error(ErrorCode::ArchiveMismatch, "archive classes differ from the test set");
    }
    report.attacks = archive->attack_names();
  } else {
    for (const auto& b : attacks) report.attacks.emplace_back(atk::attack_name(b.kind));
  }

  std::map<std::pair<const atk::Classifier*, std::size_t>, std::vector<geo::PointCloud>> cache;
  for (const auto& d : defenses) {
    if (d.model == nullptr) throw Error(ErrorCode::InvalidArgument, "defense '" + d.name + "' has no model");
    ReportRow row;
    row.defense = d.name;
    row.added_parameters = d.added_parameters;
    row.clean = accuracy_percent(*d.model, preprocess(d, test.samples, seed));
    for (std::size_t a = 0; a < report.attacks.size(); ++a) {
      std::vector<geo::PointCloud> adv;
      if (mode == EvalMode::BlackboxArchive) {
        adv = archive->clouds_for(report.attacks[a]);
      } else {
        auto& cached = cache[{d.model, a}];
        if (cached.empty()) {
          for (auto& r : atk::run_attack(*d.model, test.samples, attacks[a])) cached.push_back(std::move(r.adversarial));
        }
        adv = cached;
      }
      row.robust.push_back(accuracy_percent(*d.model, preprocess(d, adv, seed + 1 + a)));
    }
    row.average_robust = row.robust.empty() ? 0.0
                                            : std::accumulate(row.robust.begin(), row.robust.end(), 0.0) /
                                                  double(row.robust.size());
    report.rows.push_back(std::move(row));
  }
  report.meta["mode"] = mode == EvalMode::Whitebox ? "whitebox" : "blackbox-archive";
  report.meta["seed"] = seed;
  report.meta["test_size"] = test.size();
  report.meta["budgets"] = nlohmann::json::array();
  for (const auto& b : attacks) report.meta["budgets"].push_back(b.to_json());
  return report;
}

void write_report(const RobustnessReport& report, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  std::ofstream csv(directory / "report.csv");
  if (!csv) throw Error(ErrorCode::IoError, "cannot write report.csv in " + directory.string());
  csv << "defense,clean";
  for (const auto& a : report.attacks) csv << ',' << a;
  csv << ",avg_robust,added_params\n";
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  for (const auto& r : report.rows) {
    csv << r.defense << ',' << num(r.clean);
    for (double v : r.robust) csv << ',' << num(v);
    csv << ',' << num(r.average_robust) << ',' << r.added_parameters << '\n';
  }
  nlohmann::json meta = report.meta;
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  meta["timestamp"] = std::chrono::duration_cast<std::chrono::seconds>(now).count();
  meta["columns"] = report.attacks;
  std::ofstream side(directory / "report.json");
  side << meta.dump(2) << '\n';
}

RobustnessReport read_report(const std::filesystem::path& directory) {
  std::ifstream csv(directory / "report.csv");
  if (!csv) throw Error(ErrorCode::IoError, "cannot open report.csv in " + directory.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  RobustnessReport report;
  std::string line;
  if (!std::getline(csv, line)) throw Error(ErrorCode::ParseError, "empty report.csv");
  const auto header = split(line);
  if (header.size() < 4) throw Error(ErrorCode::ParseError, "report.csv header too short");
  report.attacks.assign(header.begin() + 2, header.end() - 2);
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw Error(ErrorCode::ParseError, "ragged report row");
    ReportRow row;
    row.defense = cells[0];
    row.clean = std::stod(cells[1]);
    for (std::size_t a = 0; a < report.attacks.size(); ++a) row.robust.push_back(std::stod(cells[2 + a]));
    row.average_robust = row.robust.empty() ? 0.0
                                            : std::accumulate(row.robust.begin(), row.robust.end(), 0.0) /
                                                  double(row.robust.size());
    row.added_parameters = std::stoull(cells.back());
    report.rows.push_back(std::move(row));
  }
  if (std::ifstream side(directory / "report.json"); side) report.meta = nlohmann::json::parse(side);
  return report;
}

std::string export_embeddings(const enc::EncoderWeights& student, const enc::PromptParams& prompts,
                              const geo::Dataset& test, const atk::Classifier* model,
                              const atk::AttackBudget* budget) {
  std::vector<geo::PointCloud> clouds = test.samples;
  if (budget != nullptr) {
    if (model == nullptr) throw Error(ErrorCode::InvalidArgument, "attacked export needs a model");
    clouds.clear();
    for (auto& r : atk::run_attack(*model, test.samples, *budget)) clouds.push_back(std::move(r.adversarial));
  }
  const Tensor z = enc::embed_points(student, clouds, prompts.point_tokens);
  std::vector<std::size_t> order(clouds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return clouds[a].id < clouds[b].id; });
  std::ostringstream out;
  out << "id,label";
  for (std::size_t e = 0; e < z.cols(); ++e) out << ",e" << e;
  out << '\n';
  for (auto i : order) {
    out << clouds[i].id << ',' << clouds[i].label;
    for (float v : z.row(i)) out << ',' << format_float(v);
    out << '\n';
  }
  return out.str();
}

}  // namespace rpd::pipe
