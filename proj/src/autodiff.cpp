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

#include "rpd/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "rpd/error.hpp"

namespace rpd::diff {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

MatMap as_mat(Tensor& t) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}
ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

Tape& same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw Error(ErrorCode::InvalidArgument, "operands recorded on different tapes");
  }
  return a.tape();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_string(a.shape()) +
                                              " vs " + shape_string(b.shape()));
  }
}

void check_offsets(std::span<const std::size_t> offsets, std::size_t total, const char* op) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != total) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": offsets must span all rows");
  }
  for (std::size_t g = 0; g + 1 < offsets.size(); ++g) {
    if (offsets[g + 1] < offsets[g]) {
      throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": offsets must be non-decreasing");
    }
  }
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, bool requires_grad, Backward backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  ++op_count_;
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_of(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape(), 0.0f);
    node.has_grad = true;
  }
  return node.grad;
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& node = nodes_[id];
  if (!node.has_grad) {
    throw Error(ErrorCode::InvalidArgument, "no gradient recorded for node " + std::to_string(id));
  }
  return node.grad;
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw Error(ErrorCode::InvalidArgument, "root from another tape");
  if (root.value().size() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "backward root must be a scalar, got " +
                                              shape_string(root.value().shape()));
  }
  for (Node& node : nodes_) {
    node.grad = Tensor();
    node.has_grad = false;
  }
  if (!nodes_[root.id()].requires_grad) return;
  grad_of(root.id())[0] = 1.0f;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.requires_grad || node.is_leaf || !node.backward) continue;
    node.backward(*this, i);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].is_leaf && nodes_[i].requires_grad) grad_of(i);
  }
}

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "matmul: " + shape_string(av.shape()) + " x " +
                                              shape_string(bv.shape()));
  }
  Tensor out(Shape{av.rows(), bv.cols()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       if (t.requires_grad(ai)) {
                         as_mat(t.grad_of(ai)).noalias() += as_mat(g) * as_mat(t.value(bi)).transpose();
                       }
                       if (t.requires_grad(bi)) {
                         as_mat(t.grad_of(bi)).noalias() += as_mat(t.value(ai)).transpose() * as_mat(g);
                       }
                     });
}

Var matmul_nt(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "matmul_nt: " + shape_string(av.shape()) + " x " +
                                              shape_string(bv.shape()) + "^T");
  }
  Tensor out(Shape{av.rows(), bv.rows()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv).transpose();
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       if (t.requires_grad(ai)) {
                         as_mat(t.grad_of(ai)).noalias() += as_mat(g) * as_mat(t.value(bi));
                       }
                       if (t.requires_grad(bi)) {
                         as_mat(t.grad_of(bi)).noalias() += as_mat(g).transpose() * as_mat(t.value(ai));
                       }
                     });
}

Var add_bias(Var a, Var bias) {
  Tape& tape = same_tape(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.size() != av.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "add_bias: " + shape_string(av.shape()) + " + " +
                                              shape_string(bv.shape()));
  }
  Tensor out = av;
  as_mat(out).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXf>(bv.data().data(), static_cast<Eigen::Index>(bv.size()));
  const std::size_t ai = a.id(), bi = bias.id();
  return tape.record(std::move(out), a.requires_grad() || bias.requires_grad(),
                     [ai, bi](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       if (t.requires_grad(ai)) as_mat(t.grad_of(ai)) += as_mat(g);
                       if (t.requires_grad(bi)) {
                         Tensor& gb = t.grad_of(bi);
                         MatMap(gb.data().data(), 1, static_cast<Eigen::Index>(gb.size())) +=
                             as_mat(g).colwise().sum();
                       }
                     });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ai](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ai);
    Tensor& ga = t.grad_of(ai);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0f) ga[i] += g[i];
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  as_mat(out) += as_mat(b.value());
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       if (t.requires_grad(ai)) as_mat(t.grad_of(ai)) += as_mat(g);
                       if (t.requires_grad(bi)) as_mat(t.grad_of(bi)) += as_mat(g);
                     });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  as_mat(out) -= as_mat(b.value());
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       if (t.requires_grad(ai)) as_mat(t.grad_of(ai)) += as_mat(g);
                       if (t.requires_grad(bi)) as_mat(t.grad_of(bi)) -= as_mat(g);
                     });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  as_mat(out).array() *= as_mat(b.value()).array();
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       if (t.requires_grad(ai)) {
                         as_mat(t.grad_of(ai)).array() += as_mat(g).array() * as_mat(t.value(bi)).array();
                       }
                       if (t.requires_grad(bi)) {
                         as_mat(t.grad_of(bi)).array() += as_mat(g).array() * as_mat(t.value(ai)).array();
                       }
                     });
}

Var scale(Var a, float factor) {
  Tensor out = a.value();
  as_mat(out) *= factor;
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ai, factor](Tape& t, std::size_t self) {
    as_mat(t.grad_of(ai)) += factor * as_mat(t.grad(self));
  });
}

Var add_scalar(Var a, float offset) {
  Tensor out = a.value();
  as_mat(out).array() += offset;
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ai](Tape& t, std::size_t self) {
    as_mat(t.grad_of(ai)) += as_mat(t.grad(self));
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (float& v : out.data()) v = std::exp(v);
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ai](Tape& t, std::size_t self) {
    as_mat(t.grad_of(ai)).array() += as_mat(t.grad(self)).array() * as_mat(t.value(self)).array();
  });
}

Var neg(Var a) { return scale(a, -1.0f); }

Var sum(Var a) {
  double acc = 0.0;
  for (float v : a.value().data()) acc += v;
  const std::size_t ai = a.id();
  return a.tape().record(Tensor::scalar(static_cast<float>(acc)), a.requires_grad(),
                         [ai](Tape& t, std::size_t self) {
                           const float g = t.grad(self)[0];
                           as_mat(t.grad_of(ai)).array() += g;
                         });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw Error(ErrorCode::EmptySet, "mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(n));
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  Tensor out(Shape{av.cols(), av.rows()});
  as_mat(out) = as_mat(av).transpose();
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ai](Tape& t, std::size_t self) {
    as_mat(t.grad_of(ai)) += as_mat(t.grad(self)).transpose();
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ai](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_of(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  const Tensor& av = a.value();
  const std::size_t d = av.cols();
  Tensor out(Shape{index.size(), d});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= av.rows()) {
      throw Error(ErrorCode::LabelOutOfRange, "gather_rows: index " + std::to_string(index[r]) +
                                                  " >= " + std::to_string(av.rows()));
    }
    std::copy_n(av.row(index[r]).begin(), d, out.row(r).begin());
  }
  const std::size_t ai = a.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return a.tape().record(std::move(out), a.requires_grad(),
                         [ai, idx = std::move(idx)](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& ga = t.grad_of(ai);
                           for (std::size_t r = 0; r < idx.size(); ++r) {
                             auto src = g.row(r);
                             auto dst = ga.row(idx[r]);
                             for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                           }
                         });
}

Var concat_rows(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "concat_rows: " + shape_string(av.shape()) + " and " +
                                              shape_string(bv.shape()));
  }
  const std::size_t ra = av.size() ? av.rows() : 0;
  const std::size_t rb = bv.size() ? bv.rows() : 0;
  std::vector<float> data;
  data.reserve(av.size() + bv.size());
  data.insert(data.end(), av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  Tensor out(Shape{ra + rb, av.cols()}, std::move(data));
  const std::size_t ai = a.id(), bi = b.id();
  const std::size_t split = av.size();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ai, bi, split](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       if (t.requires_grad(ai)) {
                         Tensor& ga = t.grad_of(ai);
                         for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
                       }
                       if (t.requires_grad(bi)) {
                         Tensor& gb = t.grad_of(bi);
                         for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
                       }
                     });
}

Var stack(std::span<const Var> scalars) {
  if (scalars.empty()) throw Error(ErrorCode::EmptySet, "stack of no values");
  Tape& tape = scalars.front().tape();
  Tensor out(Shape{scalars.size()});
  bool rg = false;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    same_tape(scalars.front(), scalars[i]);
    out[i] = scalars[i].value().item();
    rg = rg || scalars[i].requires_grad();
    ids.push_back(scalars[i].id());
  }
  return tape.record(std::move(out), rg, [ids = std::move(ids)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.grad_of(ids[i])[0] += g[i];
    }
  });
}

Var dot_rows(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "dot_rows");
  const Tensor& av = a.value();
  Tensor out(Shape{av.rows()});
  as_mat(out) = (as_mat(av).array() * as_mat(b.value()).array()).rowwise().sum().transpose();
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape& t, std::size_t self) {
                       const Eigen::Map<const Eigen::VectorXf> g(t.grad(self).data().data(),
                                                                 static_cast<Eigen::Index>(t.grad(self).size()));
                       if (t.requires_grad(ai)) {
                         as_mat(t.grad_of(ai)).array() += as_mat(t.value(bi)).array().colwise() * g.array();
                       }
                       if (t.requires_grad(bi)) {
                         as_mat(t.grad_of(bi)).array() += as_mat(t.value(ai)).array().colwise() * g.array();
                       }
                     });
}

Var l2_normalize(Var v) {
  const Tensor& x = v.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out = x;
  std::vector<float> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (float e : x.row(r)) sq += static_cast<double>(e) * e;
    const double n = std::sqrt(sq);
    if (!(n >= kNormEpsilon)) {
      throw Error(ErrorCode::DegenerateNorm, "row " + std::to_string(r) + " has norm " +
                                                 std::to_string(n));
    }
    norms[r] = static_cast<float>(n);
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = static_cast<float>(x.at(r, c) / n);
  }
  const std::size_t vi = v.id();
  return v.tape().record(std::move(out), v.requires_grad(),
                         [vi, norms = std::move(norms)](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad(self);
                           const Tensor& y = t.value(self);
                           Tensor& gv = t.grad_of(vi);
                           const std::size_t cols = y.cols();
                           for (std::size_t r = 0; r < norms.size(); ++r) {
                             double proj = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) proj += y.at(r, c) * g.at(r, c);
                             for (std::size_t c = 0; c < cols; ++c) {
                               gv.at(r, c) += static_cast<float>((g.at(r, c) - y.at(r, c) * proj) / norms[r]);
                             }
                           }
                         });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels, Reduction reduction) {
  const Tensor& z = logits.value();
  const std::size_t b = z.rows(), c = z.cols();
  if (labels.size() != b || b == 0) {
    throw Error(ErrorCode::ShapeMismatch, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                              " labels for " + std::to_string(b) + " rows");
  }
  // d loss / d logits = softmax - onehot, formed in double. Subtracting in
  // float would round p_y - 1 to zero once p_y is within an ulp of one, and
  // confident rows would lose the push on their own label.
  Tensor coef(z.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= c) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(labels[r]) +
                                                  " with " + std::to_string(c) + " classes");
    }
    auto row = z.row(r);
    const float mx = *std::max_element(row.begin(), row.end());
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    const double log_denom = std::log(denom);
    double others = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j == labels[r]) continue;
      const double pj = std::exp(static_cast<double>(row[j] - mx) - log_denom);
      coef.at(r, j) = static_cast<float>(pj);
      others += pj;
    }
    coef.at(r, labels[r]) = static_cast<float>(-others);
    total += log_denom - static_cast<double>(row[labels[r]] - mx);
  }
  const float factor = reduction == Reduction::Mean ? 1.0f / static_cast<float>(b) : 1.0f;
  const std::size_t li = logits.id();
  return logits.tape().record(
      Tensor::scalar(static_cast<float>(total * factor)), logits.requires_grad(),
      [li, factor, coef = std::move(coef)](Tape& t, std::size_t self) {
        const float g = t.grad(self)[0] * factor;
        Tensor& gz = t.grad_of(li);
        for (std::size_t k = 0; k < coef.size(); ++k) gz[k] += g * coef[k];
      });
}

Var segment_max_pool(Var features, std::span<const std::size_t> offsets, Var extra) {
  const Tensor& x = features.value();
  const std::size_t total = x.size() ? x.rows() : 0;
  const std::size_t d = x.cols();
  check_offsets(offsets, total, "segment_max_pool");
  const bool has_extra = extra.valid() && extra.value().size() > 0;
  if (extra.valid()) {
    same_tape(features, extra);
    if (has_extra && extra.value().cols() != d) {
      throw Error(ErrorCode::ShapeMismatch, "segment_max_pool: extra rows have width " +
                                                std::to_string(extra.value().cols()));
    }
  }
  const std::size_t groups = offsets.size() - 1;
  const std::size_t m = has_extra ? extra.value().rows() : 0;
  Tensor out(Shape{groups, d});
  // winner < total indexes a feature row, otherwise (winner - total) an extra row.
  std::vector<std::size_t> winner(groups * d);
  for (std::size_t g = 0; g < groups; ++g) {
    if (offsets[g + 1] == offsets[g] && m == 0) {
      throw Error(ErrorCode::EmptySet, "segment " + std::to_string(g) + " is empty");
    }
    for (std::size_t c = 0; c < d; ++c) {
      float best = -std::numeric_limits<float>::infinity();
      std::size_t arg = 0;
      bool first = true;
      for (std::size_t r = offsets[g]; r < offsets[g + 1]; ++r) {
        const float v = x.at(r, c);
        if (first || v > best) {
          best = v;
          arg = r;
          first = false;
        }
      }
      for (std::size_t r = 0; r < m; ++r) {
        const float v = extra.value().at(r, c);
        if (first || v > best) {
          best = v;
          arg = total + r;
          first = false;
        }
      }
      out.at(g, c) = best;
      winner[g * d + c] = arg;
    }
  }
  const std::size_t fi = features.id();
  const std::size_t ei = has_extra ? extra.id() : fi;
  const bool rg = features.requires_grad() || (has_extra && extra.requires_grad());
  return features.tape().record(
      std::move(out), rg,
      [fi, ei, has_extra, total, d, winner = std::move(winner)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const bool grad_x = t.requires_grad(fi);
        const bool grad_e = has_extra && t.requires_grad(ei);
        Tensor* gx = grad_x ? &t.grad_of(fi) : nullptr;
        Tensor* ge = grad_e ? &t.grad_of(ei) : nullptr;
        for (std::size_t i = 0; i < winner.size(); ++i) {
          const std::size_t c = i % d;
          const std::size_t w = winner[i];
          if (w < total) {
            if (gx) gx->at(w, c) += g[i];
          } else if (ge) {
            ge->at(w - total, c) += g[i];
          }
        }
      });
}

Var set_max_pool(Var features) {
  const Tensor& x = features.value();
  if (x.size() == 0 || x.rows() == 0) throw Error(ErrorCode::EmptySet, "set_max_pool of empty set");
  const std::size_t offsets[2] = {0, x.rows()};
  Var pooled = segment_max_pool(features, offsets);
  return reshape(pooled, Shape{x.cols()});
}

Var segment_mean(Var features, std::span<const std::size_t> offsets) {
  const Tensor& x = features.value();
  const std::size_t total = x.size() ? x.rows() : 0;
  const std::size_t d = x.cols();
  check_offsets(offsets, total, "segment_mean");
  const std::size_t groups = offsets.size() - 1;
  Tensor out(Shape{groups, d});
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t n = offsets[g + 1] - offsets[g];
    if (n == 0) throw Error(ErrorCode::EmptySet, "segment " + std::to_string(g) + " is empty");
    auto dst = out.row(g);
    for (std::size_t r = offsets[g]; r < offsets[g + 1]; ++r) {
      auto src = x.row(r);
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
    for (float& v : dst) v /= static_cast<float>(n);
  }
  const std::size_t fi = features.id();
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  return features.tape().record(std::move(out), features.requires_grad(),
                                [fi, off = std::move(off)](Tape& t, std::size_t self) {
                                  const Tensor& g = t.grad(self);
                                  Tensor& gx = t.grad_of(fi);
                                  for (std::size_t grp = 0; grp + 1 < off.size(); ++grp) {
                                    const float inv = 1.0f / static_cast<float>(off[grp + 1] - off[grp]);
                                    auto src = g.row(grp);
                                    for (std::size_t r = off[grp]; r < off[grp + 1]; ++r) {
                                      auto dst = gx.row(r);
                                      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c] * inv;
                                    }
                                  }
                                });
}

}  // namespace rpd::diff
