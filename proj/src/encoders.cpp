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

#include "rpd/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "rpd/error.hpp"
#include "rpd/losses.hpp"
#include "rpd/optim.hpp"

namespace rpd::enc {

using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

std::string_view kind_name(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::Point: return "point";
    case EncoderKind::Image: return "image";
    case EncoderKind::Text: return "text";
  }
  return "unknown";
}

namespace {

EncoderKind kind_from_name(std::string_view name) {
  for (auto k : {EncoderKind::Point, EncoderKind::Image, EncoderKind::Text}) {
    if (kind_name(k) == name) return k;
  }
  throw Error(ErrorCode::ArchitectureMismatch, "unknown encoder kind '" + std::string(name) + "'");
}

void require_kind(const EncoderWeights& w, EncoderKind kind) {
  if (w.arch.kind != kind) {
    throw Error(ErrorCode::ArchitectureMismatch, "expected a " + std::string(kind_name(kind)) +
                                                     " encoder, got '" + w.arch.name + "' (" +
                                                     std::string(kind_name(w.arch.kind)) + ")");
  }
}

Var dense(Var x, const BoundLayer& layer, bool activation) {
  Var h = diff::matmul(x, layer.weight);
  if (layer.bias.valid()) h = diff::add_bias(h, layer.bias);
  return activation ? diff::relu(h) : h;
}

Var run_shared(const BoundEncoder& enc, Var x) {
  for (const auto& layer : enc.shared) x = dense(x, layer, true);
  return x;
}

Var run_head(const BoundEncoder& enc, Var x) {
  for (std::size_t i = 0; i < enc.head.size(); ++i) x = dense(x, enc.head[i], i + 1 < enc.head.size());
  return diff::l2_normalize(x);
}

std::vector<DenseLayer> make_layers(const std::vector<std::size_t>& widths, bool bias) {
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers.push_back({Tensor(Shape{widths[i], widths[i + 1]}), bias ? Tensor(Shape{widths[i + 1]}) : Tensor()});
  }
  return layers;
}

std::size_t vocab_index(const Architecture& arch, const std::string& token) {
  const auto it = std::lower_bound(arch.vocab.begin(), arch.vocab.end(), token);
  if (it == arch.vocab.end() || *it != token) {
    throw Error(ErrorCode::UnknownToken, "token '" + token + "' is not in the vocabulary");
  }
  return static_cast<std::size_t>(it - arch.vocab.begin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Architectures

std::size_t Architecture::feature_dim() const {
  return kind == EncoderKind::Text ? head.front() : shared.back();
}

nlohmann::json Architecture::to_json() const {
  return {{"name", name},
          {"kind", kind_name(kind)},
          {"shared", shared},
          {"head", head},
          {"head_bias", head_bias},
          {"views", views},
          {"resolution", resolution},
          {"vocab", vocab}};
}

Architecture Architecture::from_json(const nlohmann::json& j) {
  Architecture a;
  a.name = j.at("name").get<std::string>();
  a.kind = kind_from_name(j.at("kind").get<std::string>());
  a.shared = j.at("shared").get<std::vector<std::size_t>>();
  a.head = j.at("head").get<std::vector<std::size_t>>();
  a.head_bias = j.at("head_bias").get<bool>();
  a.views = j.at("views").get<std::size_t>();
  a.resolution = j.at("resolution").get<std::size_t>();
  a.vocab = j.at("vocab").get<std::vector<std::string>>();
  return a;
}

Architecture student_architecture(std::size_t feature_dim, std::size_t embed_dim) {
  return {"student", EncoderKind::Point, {3, feature_dim, feature_dim}, {feature_dim, embed_dim}, true, 0, 0, {}};
}

Architecture surrogate_architecture(std::size_t feature_dim, std::size_t embed_dim) {
  Architecture a = student_architecture(feature_dim, embed_dim);
  a.name = "surrogate";
  return a;
}

Architecture point_teacher_architecture(std::size_t width, std::size_t embed_dim) {
  return {"point_teacher", EncoderKind::Point, {3, width, width}, {width, embed_dim}, true, 0, 0, {}};
}

Architecture image_teacher_architecture(std::size_t resolution, std::size_t views, std::size_t hidden,
                                        std::size_t embed_dim) {
  return {"image_teacher", EncoderKind::Image, {resolution * resolution, hidden}, {hidden, embed_dim},
          true, views, resolution, {}};
}

Architecture text_architecture(std::span<const std::string> class_names, std::size_t token_dim,
                               std::size_t embed_dim) {
  std::set<std::string> words;
  for (const auto& name : class_names) {
    for (auto& t : tokenize(name)) words.insert(std::move(t));
  }
  Architecture a{"text", EncoderKind::Text, {}, {token_dim, embed_dim}, false, 0, 0, {}};
  a.vocab.assign(words.begin(), words.end());
  return a;
}

std::vector<std::string> tokenize(std::string_view class_name) {
  std::vector<std::string> out;
  std::string current;
  for (char ch : class_name) {
    if (ch == '_' || std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(ch);
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

// ---------------------------------------------------------------------------
// Weights

std::vector<std::pair<std::string, const Tensor*>> EncoderWeights::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  auto add_layers = [&](const std::vector<DenseLayer>& layers, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.emplace_back(prefix + std::to_string(i) + ".weight", &layers[i].weight);
      if (!layers[i].bias.empty()) out.emplace_back(prefix + std::to_string(i) + ".bias", &layers[i].bias);
    }
  };
  if (!embedding.empty()) out.emplace_back("embedding", &embedding);
  add_layers(shared, "shared.");
  add_layers(head, "head.");
  return out;
}

std::vector<std::pair<std::string, Tensor*>> EncoderWeights::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (const auto& [name, t] : std::as_const(*this).named_tensors()) out.emplace_back(name, const_cast<Tensor*>(t));
  return out;
}

std::size_t EncoderWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& entry : named_tensors()) n += entry.second->size();
  return n;
}

std::size_t EncoderWeights::head_parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : head) n += l.weight.size() + l.bias.size();
  return n;
}

io::TensorFile EncoderWeights::to_file() const {
  io::TensorFile f;
  for (const auto& [name, t] : named_tensors()) f.tensors.emplace_back(name, *t);
  f.meta["architecture"] = arch.to_json();
  f.meta["frozen"] = frozen;
  return f;
}

std::string EncoderWeights::content_hash() const { return io::content_hash(to_file().tensors); }

EncoderWeights EncoderWeights::from_file(const io::TensorFile& file) {
  if (!file.meta.contains("architecture")) {
    throw Error(ErrorCode::ArchitectureMismatch, "tensor file carries no architecture descriptor");
  }
  EncoderWeights w;
  w.arch = Architecture::from_json(file.meta.at("architecture"));
  w.frozen = file.meta.value("frozen", false);
  w.shared = make_layers(w.arch.shared, true);
  w.head = make_layers(w.arch.head, w.arch.head_bias);
  if (w.arch.kind == EncoderKind::Text) w.embedding = Tensor(Shape{w.arch.vocab.size(), w.arch.head.front()});
  for (auto& [name, t] : w.named_tensors()) {
    const Tensor& stored = file.get(name);
    if (stored.shape() != t->shape()) {
      throw Error(ErrorCode::ArchitectureMismatch, name + " has shape " + diff::shape_string(stored.shape()) +
                                                       ", expected " + diff::shape_string(t->shape()));
    }
    *t = stored;
  }
  return w;
}

EncoderWeights init_weights(const Architecture& arch, std::uint64_t seed) {
  EncoderWeights w;
  w.arch = arch;
  w.shared = make_layers(arch.shared, true);
  w.head = make_layers(arch.head, arch.head_bias);
  std::mt19937_64 rng(seed);
  if (arch.kind == EncoderKind::Text) {
    if (arch.vocab.empty()) throw Error(ErrorCode::ArchitectureMismatch, "text encoder needs a vocabulary");
    w.embedding = Tensor(Shape{arch.vocab.size(), arch.head.front()});
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (float& v : w.embedding.data()) v = u(rng);
  }
  auto fill = [&](std::vector<DenseLayer>& layers) {
    for (auto& l : layers) {
      const float bound = std::sqrt(6.0f / static_cast<float>(l.weight.dim(0)));
      std::uniform_real_distribution<float> uw(-bound, bound);
      for (float& v : l.weight.data()) v = uw(rng);
      std::uniform_real_distribution<float> ub(-0.05f, 0.05f);
      for (float& v : l.bias.data()) v = ub(rng);
    }
  };
  fill(w.shared);
  fill(w.head);
  return w;
}

void save_weights(const EncoderWeights& w, const std::filesystem::path& path) {
  io::write_tensor_file(path, w.to_file());
}

EncoderWeights load_weights(const std::filesystem::path& path) {
  return EncoderWeights::from_file(io::read_tensor_file(path));
}

PromptParams PromptParams::zeros(std::size_t m_p, std::size_t d_f, std::size_t m_t, std::size_t d_e) {
  PromptParams p;
  if (m_p > 0) p.point_tokens = Tensor(Shape{m_p, d_f});
  if (m_t > 0) p.text_context = Tensor(Shape{m_t, d_e});
  return p;
}

// ---------------------------------------------------------------------------
// Counters

Counters& counters() {
  static Counters c;
  return c;
}

void reset_counters() { counters() = Counters{}; }

// ---------------------------------------------------------------------------
// Tape-level forwards

BoundEncoder bind(Tape& tape, const EncoderWeights& w, bool trainable) {
  BoundEncoder b;
  b.weights = &w;
  auto bind_layers = [&](const std::vector<DenseLayer>& layers, std::vector<BoundLayer>& out) {
    for (const auto& l : layers) {
      out.push_back({tape.leaf(l.weight, trainable), l.bias.empty() ? Var{} : tape.leaf(l.bias, trainable)});
    }
  };
  if (!w.embedding.empty()) b.embedding = tape.leaf(w.embedding, trainable);
  bind_layers(w.shared, b.shared);
  bind_layers(w.head, b.head);
  return b;
}

std::vector<std::pair<std::string, Var>> BoundEncoder::parameters() const {
  std::vector<std::pair<std::string, Var>> out;
  auto add_layers = [&](const std::vector<BoundLayer>& layers, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.emplace_back(prefix + std::to_string(i) + ".weight", layers[i].weight);
      if (layers[i].bias.valid()) out.emplace_back(prefix + std::to_string(i) + ".bias", layers[i].bias);
    }
  };
  if (embedding.valid()) out.emplace_back("embedding", embedding);
  add_layers(shared, "shared.");
  add_layers(head, "head.");
  return out;
}

Var point_forward(const BoundEncoder& enc, Var points, std::span<const std::size_t> offsets, Var tokens) {
  const auto& arch = enc.weights->arch;
  if (arch.kind != EncoderKind::Point) require_kind(*enc.weights, EncoderKind::Point);
  if (points.value().cols() != arch.shared.front()) {
    throw Error(ErrorCode::ArchitectureMismatch, "point input width " + std::to_string(points.value().cols()));
  }
  Var h = run_shared(enc, points);
  if (tokens.valid() && tokens.value().size() > 0) {
    if (tokens.value().cols() != arch.feature_dim()) {
      throw Error(ErrorCode::ArchitectureMismatch, "point tokens have width " + std::to_string(tokens.value().cols()) +
                                                       ", encoder D_f is " + std::to_string(arch.feature_dim()));
    }
  } else {
    tokens = Var{};
  }
  Var z = run_head(enc, diff::segment_max_pool(h, offsets, tokens));
  const std::size_t g = offsets.size() - 1;
  counters().point_forwards += g;
  counters().layer_evaluations += g * (enc.shared.size() + enc.head.size());
  return z;
}

Var image_forward(const BoundEncoder& enc, Var views) {
  const auto& arch = enc.weights->arch;
  require_kind(*enc.weights, EncoderKind::Image);
  const std::size_t rows = views.value().rows();
  if (views.value().cols() != arch.shared.front() || arch.views == 0 || rows % arch.views != 0) {
    throw Error(ErrorCode::ShapeMismatch, "depth input " + diff::shape_string(views.value().shape()) +
                                              " does not match " + std::to_string(arch.views) + " views of " +
                                              std::to_string(arch.shared.front()) + " pixels");
  }
  const std::size_t g = rows / arch.views;
  std::vector<std::size_t> offsets(g + 1);
  for (std::size_t i = 0; i <= g; ++i) offsets[i] = i * arch.views;
  Var z = run_head(enc, diff::segment_mean(run_shared(enc, views), offsets));
  counters().image_forwards += g;
  counters().layer_evaluations += g * (enc.shared.size() + enc.head.size());
  return z;
}

Var text_forward(const BoundEncoder& enc, std::span<const std::string> class_names, Var context) {
  const auto& arch = enc.weights->arch;
  require_kind(*enc.weights, EncoderKind::Text);
  const std::size_t c = class_names.size(), vocab = arch.vocab.size();
  const std::size_t m_t = context.valid() ? context.value().rows() : 0;
  if (m_t > 0 && context.value().cols() != arch.feature_dim()) {
    throw Error(ErrorCode::ArchitectureMismatch, "context width " + std::to_string(context.value().cols()) +
                                                     ", token width " + std::to_string(arch.feature_dim()));
  }
  Tensor token_weights(Shape{c, vocab});
  Tensor context_weights(Shape{c, std::max<std::size_t>(m_t, 1)});
  for (std::size_t i = 0; i < c; ++i) {
    const auto tokens = tokenize(class_names[i]);
    if (tokens.empty()) throw Error(ErrorCode::UnknownToken, "empty class name");
    const float inv = 1.0f / static_cast<float>(tokens.size() + m_t);
    for (const auto& t : tokens) token_weights.at(i, vocab_index(arch, t)) += inv;
    for (std::size_t m = 0; m < m_t; ++m) context_weights.at(i, m) = inv;
  }
  Tape& tape = enc.embedding.tape();
  Var pooled = diff::matmul(tape.constant(std::move(token_weights)), enc.embedding);
  if (m_t > 0) pooled = diff::add(pooled, diff::matmul(tape.constant(std::move(context_weights)), context));
  Var z = run_head(enc, pooled);
  counters().text_forwards += c;
  counters().layer_evaluations += c * enc.head.size();
  return z;
}

// ---------------------------------------------------------------------------
// Value API

Tensor encode_student(const geo::PointCloud& pc, const PromptParams& prompts, const EncoderWeights& w) {
  require_kind(w, EncoderKind::Point);
  Tape tape;
  const BoundEncoder enc = bind(tape, w, false);
  const std::size_t offsets[] = {0, pc.size()};
  Var tokens = prompts.point_tokens.empty() ? Var{} : tape.constant(prompts.point_tokens);
  Var z = point_forward(enc, tape.constant(geo::to_tensor(pc)), offsets, tokens);
  return z.value().reshaped({w.arch.embed_dim()});
}

Tensor encode_point_teacher(const geo::PointCloud& pc, const EncoderWeights& w) {
  return encode_student(pc, PromptParams{}, w);
}

Tensor encode_image_teacher(const proj::DepthImageSet& d, const EncoderWeights& w) {
  require_kind(w, EncoderKind::Image);
  if (d.resolution != w.arch.resolution || d.num_views() != w.arch.views) {
    throw Error(ErrorCode::ShapeMismatch, "depth set " + std::to_string(d.num_views()) + "x" +
                                              std::to_string(d.resolution) + " vs encoder " +
                                              std::to_string(w.arch.views) + "x" + std::to_string(w.arch.resolution));
  }
  Tape tape;
  const BoundEncoder enc = bind(tape, w, false);
  return image_forward(enc, tape.constant(d.as_tensor())).value().reshaped({w.arch.embed_dim()});
}

Tensor encode_text(std::span<const std::string> class_names, const Tensor& context, const EncoderWeights& w) {
  Tape tape;
  const BoundEncoder enc = bind(tape, w, false);
  return text_forward(enc, class_names, context.empty() ? Var{} : tape.constant(context)).value();
}

Tensor embed_points(const EncoderWeights& w, std::span<const geo::PointCloud> clouds, const Tensor& tokens,
                    std::size_t batch) {
  require_kind(w, EncoderKind::Point);
  const std::size_t d = w.arch.embed_dim();
  Tensor out(Shape{clouds.size(), d});
  for (std::size_t start = 0; start < clouds.size(); start += batch) {
    const auto chunk = clouds.subspan(start, std::min(batch, clouds.size() - start));
    Tape tape;
    const BoundEncoder enc = bind(tape, w, false);
    std::vector<std::size_t> offsets;
    Var pts = tape.constant(geo::stack_points(chunk, offsets));
    Var z = point_forward(enc, pts, offsets, tokens.empty() ? Var{} : tape.constant(tokens));
    std::copy(z.value().data().begin(), z.value().data().end(), out.data().begin() + start * d);
  }
  return out;
}

Tensor pooled_point_features(const EncoderWeights& w, std::span<const geo::PointCloud> clouds, std::size_t batch) {
  require_kind(w, EncoderKind::Point);
  const std::size_t d = w.arch.feature_dim();
  Tensor out(Shape{clouds.size(), d});
  for (std::size_t start = 0; start < clouds.size(); start += batch) {
    const auto chunk = clouds.subspan(start, std::min(batch, clouds.size() - start));
    Tape tape;
    const BoundEncoder enc = bind(tape, w, false);
    std::vector<std::size_t> offsets;
    Var pts = tape.constant(geo::stack_points(chunk, offsets));
    Var pooled = diff::segment_max_pool(run_shared(enc, pts), offsets);
    std::copy(pooled.value().data().begin(), pooled.value().data().end(), out.data().begin() + start * d);
  }
  return out;
}

Tensor stack_views(std::span<const proj::DepthImageSet> images) {
  if (images.empty()) return Tensor(Shape{0, 0});
  const std::size_t v = images.front().num_views(), px = images.front().resolution * images.front().resolution;
  std::vector<float> data;
  data.reserve(images.size() * v * px);
  for (const auto& im : images) {
    if (im.num_views() != v || im.resolution * im.resolution != px) {
      throw Error(ErrorCode::ShapeMismatch, "depth sets differ in size");
    }
    data.insert(data.end(), im.depth.begin(), im.depth.end());
  }
  return Tensor(Shape{images.size() * v, px}, std::move(data));
}

Tensor embed_images(const EncoderWeights& w, std::span<const proj::DepthImageSet> images, std::size_t batch) {
  const std::size_t d = w.arch.embed_dim();
  Tensor out(Shape{images.size(), d});
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const auto chunk = images.subspan(start, std::min(batch, images.size() - start));
    Tape tape;
    const BoundEncoder enc = bind(tape, w, false);
    Var z = image_forward(enc, tape.constant(stack_views(chunk)));
    std::copy(z.value().data().begin(), z.value().data().end(), out.data().begin() + start * d);
  }
  return out;
}

std::vector<std::size_t> nearest_class(const Tensor& z, const Tensor& z_text) {
  std::vector<std::size_t> out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    float best = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < z_text.rows(); ++j) {
      float s = 0.0f;
      for (std::size_t e = 0; e < z.cols(); ++e) s += z.at(i, e) * z_text.at(j, e);
      if (s > best) {
        best = s;
        out[i] = j;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bootstrap

namespace {

double accuracy(const std::vector<std::size_t>& pred, const geo::Dataset& ds) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == ds.samples[i].label ? 1 : 0;
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

void collect(std::vector<optim::ParamRef>& out, EncoderWeights& w, const BoundEncoder& bound,
             const std::string& prefix) {
  auto tensors = w.named_tensors();
  const auto vars = bound.parameters();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const bool decay = tensors[i].first.find("bias") == std::string::npos;
    out.push_back({prefix + tensors[i].first, tensors[i].second, &vars[i].second.grad(), decay});
  }
}

void require_trainable(const geo::Dataset& train) {
  std::set<std::size_t> labels;
  for (const auto& s : train.samples) labels.insert(s.label);
  if (train.samples.empty() || labels.size() < 2) {
    throw Error(ErrorCode::InvalidArgument, "bootstrap needs a nonempty training set with at least two classes");
  }
}

class PlateauTracker {
 public:
  explicit PlateauTracker(const BootstrapConfig& cfg) : cfg_(cfg) {}
  bool done(double acc) {
    if (acc > best_ + cfg_.plateau_delta) {
      best_ = acc;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return acc >= 0.999 || stale_ >= cfg_.patience;
  }

 private:
  const BootstrapConfig& cfg_;
  double best_ = -1.0;
  std::size_t stale_ = 0;
};

}  // namespace

TeacherSet bootstrap_teachers(const geo::Dataset& train, const BootstrapConfig& cfg, std::uint64_t seed) {
  require_trainable(train);
  std::mt19937_64 rng(seed);
  TeacherSet out;
  out.point = init_weights(point_teacher_architecture(), rng());
  out.image = init_weights(image_teacher_architecture(cfg.resolution, cfg.views), rng());
  out.text = init_weights(text_architecture(train.class_names), rng());

  std::vector<proj::DepthImageSet> depth;
  depth.reserve(train.size());
  for (const auto& s : train.samples) depth.push_back(proj::project_depth(s, cfg.resolution, cfg.views));

  optim::AdamW opt({0.9f, 0.999f, 1e-8f, cfg.weight_decay});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  PlateauTracker plateau(cfg);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const float lr = static_cast<float>(optim::cosine_schedule(double(epoch), double(cfg.max_epochs), cfg.lr, cfg.lr * 0.05));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      if (n < 2) continue;
      std::vector<geo::PointCloud> clouds;
      std::vector<proj::DepthImageSet> views;
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < start + n; ++i) {
        clouds.push_back(train.samples[order[i]]);
        views.push_back(depth[order[i]]);
        labels.push_back(train.samples[order[i]].label);
      }
      Tape tape;
      const BoundEncoder bp = bind(tape, out.point, true);
      const BoundEncoder bi = bind(tape, out.image, true);
      const BoundEncoder bt = bind(tape, out.text, true);
      std::vector<std::size_t> offsets;
      Var pts = tape.constant(geo::stack_points(clouds, offsets));
      Var z_p = point_forward(bp, pts, offsets);
      Var z_i = image_forward(bi, tape.constant(stack_views(views)));
      Var ref = loss::text_reference(text_forward(bt, train.class_names), labels);
      Var total = diff::add(loss::symmetric_contrastive(z_p, ref, cfg.tau), loss::symmetric_contrastive(z_i, ref, cfg.tau));
      tape.backward(total);
      std::vector<optim::ParamRef> params;
      collect(params, out.point, bp, "point.");
      collect(params, out.image, bi, "image.");
      collect(params, out.text, bt, "text.");
      opt.step(params, lr);
      loss_sum += total.value().item();
      ++batches;
    }
    const Tensor z_text = encode_text(train.class_names, Tensor(), out.text);
    const double acc_p = accuracy(nearest_class(embed_points(out.point, train.samples), z_text), train);
    const double acc_i = accuracy(nearest_class(embed_images(out.image, depth), z_text), train);
    out.metrics.epoch_loss.push_back(loss_sum / double(std::max<std::size_t>(batches, 1)));
    out.metrics.point_accuracy.push_back(acc_p);
    out.metrics.image_accuracy.push_back(acc_i);
    out.metrics.epochs = epoch + 1;
    if (plateau.done(std::min(acc_p, acc_i))) break;
  }
  const double chance = 1.0 / static_cast<double>(train.num_classes());
  if (out.metrics.point_accuracy.back() < 2.0 * chance || out.metrics.image_accuracy.back() < 2.0 * chance) {
    throw Error(ErrorCode::NonConvergence, "teacher accuracy after " + std::to_string(out.metrics.epochs) +
                                               " epochs: point " + std::to_string(out.metrics.point_accuracy.back()) +
                                               ", image " + std::to_string(out.metrics.image_accuracy.back()));
  }
  out.point.frozen = out.image.frozen = out.text.frozen = true;
  return out;
}

PointBootstrap bootstrap_point_encoder(const geo::Dataset& train, const Architecture& arch, const EncoderWeights& text,
                                       const BootstrapConfig& cfg, std::uint64_t seed) {
  require_trainable(train);
  std::mt19937_64 rng(seed);
  PointBootstrap out;
  out.weights = init_weights(arch, rng());
  const Tensor z_text = encode_text(train.class_names, Tensor(), text);

  optim::AdamW opt({0.9f, 0.999f, 1e-8f, cfg.weight_decay});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  PlateauTracker plateau(cfg);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const float lr = static_cast<float>(optim::cosine_schedule(double(epoch), double(cfg.max_epochs), cfg.lr, cfg.lr * 0.05));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      if (n < 2) continue;
      std::vector<geo::PointCloud> clouds;
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < start + n; ++i) {
        clouds.push_back(train.samples[order[i]]);
        labels.push_back(train.samples[order[i]].label);
      }
      Tape tape;
      const BoundEncoder bp = bind(tape, out.weights, true);
      std::vector<std::size_t> offsets;
      Var pts = tape.constant(geo::stack_points(clouds, offsets));
      Var z = point_forward(bp, pts, offsets);
      Var ref = loss::text_reference(tape.constant(z_text), labels);
      Var total = loss::symmetric_contrastive(z, ref, cfg.tau);
      tape.backward(total);
      std::vector<optim::ParamRef> params;
      collect(params, out.weights, bp, "");
      opt.step(params, lr);
      loss_sum += total.value().item();
      ++batches;
    }
    const double acc = accuracy(nearest_class(embed_points(out.weights, train.samples), z_text), train);
    out.metrics.epoch_loss.push_back(loss_sum / double(std::max<std::size_t>(batches, 1)));
    out.metrics.point_accuracy.push_back(acc);
    out.metrics.epochs = epoch + 1;
    if (plateau.done(acc)) break;
  }
  if (out.metrics.point_accuracy.back() < 2.0 / static_cast<double>(train.num_classes())) {
    throw Error(ErrorCode::NonConvergence, arch.name + " accuracy " + std::to_string(out.metrics.point_accuracy.back()));
  }
  out.weights.frozen = true;
  return out;
}

}  // namespace rpd::enc
