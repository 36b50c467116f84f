#include "llmcf/autograd.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <stdexcept>

#include "llmcf/errors.hpp"

namespace llmcf::ag {

Parameter& ParamSet::add(const std::string& name, Index rows, Index cols) {
  if (find(name) != nullptr) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  params_.push_back(std::make_unique<Parameter>(name, rows, cols));
  return *params_.back();
}

Parameter* ParamSet::find(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParamSet::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Parameter& ParamSet::at(const std::string& name) {
  Parameter* p = find(name);
  if (p == nullptr) throw std::out_of_range("unknown parameter: " + name);
  return *p;
}

const Parameter& ParamSet::at(const std::string& name) const {
  const Parameter* p = find(name);
  if (p == nullptr) throw std::out_of_range("unknown parameter: " + name);
  return *p;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

std::size_t ParamSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

const Matrix& Var::value() const { return tape->value(id); }

Var Tape::constant(Matrix m) { return make(std::move(m), false, nullptr); }

Var Tape::param(Parameter& p) {
  Parameter* target = &p;
  const int self = static_cast<int>(nodes_.size());
  return make(p.value, true, [target, self](Tape& t) { target->grad += t.grad(self); });
}

Var Tape::make(Matrix value, bool needs_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this || root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("backward root must be a 1x1 value on this tape");
  }
  if (!needs_grad(root.id)) return;
  grad(root.id)(0, 0) += 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.needs_grad && n.backward && n.grad.size() > 0) n.backward(*this);
  }
}

namespace {

bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs) {
    if (v.tape->needs_grad(v.id)) return true;
  }
  return false;
}

void check_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

int next_id(const Tape& t) { return static_cast<int>(t.size()); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tape& t = *a.tape;
  const int self = next_id(t);
  Matrix out = a.value() * b.value();
  return t.make(std::move(out), any_grad({a, b}), [a, b, self](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id).noalias() += g * t.value(b.id).transpose();
    if (t.needs_grad(b.id)) t.grad(b.id).noalias() += t.value(a.id).transpose() * g;
  });
}

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Tape& t = *a.tape;
  const int self = next_id(t);
  return t.make(a.value() + b.value(), any_grad({a, b}), [a, b, self](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id) += g;
    if (t.needs_grad(b.id)) t.grad(b.id) += g;
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Tape& t = *a.tape;
  const int self = next_id(t);
  return t.make(a.value() - b.value(), any_grad({a, b}), [a, b, self](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id) += g;
    if (t.needs_grad(b.id)) t.grad(b.id) -= g;
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  Tape& t = *a.tape;
  const int self = next_id(t);
  Matrix out = a.value().cwiseProduct(b.value());
  return t.make(std::move(out), any_grad({a, b}), [a, b, self](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id) += g.cwiseProduct(t.value(b.id));
    if (t.needs_grad(b.id)) t.grad(b.id) += g.cwiseProduct(t.value(a.id));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const int self = next_id(t);
  return t.make(a.value() * s, any_grad({a}), [a, s, self](Tape& t) {
    t.grad(a.id) += t.grad(self) * s;
  });
}

Var add_bias(Var a, Var bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw std::invalid_argument("add_bias: bias must be 1 x cols");
  }
  Tape& t = *a.tape;
  const int self = next_id(t);
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return t.make(std::move(out), any_grad({a, bias}), [a, bias, self](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id) += g;
    if (t.needs_grad(bias.id)) t.grad(bias.id) += g.colwise().sum();
  });
}

using RowArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Var gelu(Var a) {
  Tape& t = *a.tape;
  const int self = next_id(t);
  const auto x = a.value().array();
  const RowArray u = kGeluC * (x + 0.044715 * x.cube());
  // tanh through exp keeps the evaluation vectorized.
  auto th = std::make_shared<RowArray>(1.0 - 2.0 / ((2.0 * u).exp() + 1.0));
  Matrix out = (0.5 * x * (1.0 + *th)).matrix();
  return t.make(std::move(out), any_grad({a}), [a, self, th](Tape& t) {
    const auto x = t.value(a.id).array();
    const auto du = kGeluC * (1.0 + 3.0 * 0.044715 * x.square());
    const auto d = 0.5 * (1.0 + *th) + 0.5 * x * (1.0 - th->square()) * du;
    t.grad(a.id).array() += t.grad(self).array() * d;
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw std::invalid_argument("layer_norm: gain/bias must be 1 x cols");
  }
  Tape& t = *x.tape;
  const int self = next_id(t);
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  const Matrix& xv = x.value();
  for (Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  auto saved = std::make_shared<std::pair<Matrix, Eigen::VectorXd>>(std::move(xhat), std::move(inv_std));
  return t.make(std::move(out), any_grad({x, gain, bias}), [x, gain, bias, self, saved](Tape& t) {
    const Matrix& g = t.grad(self);
    const Matrix& xh = saved->first;
    const Eigen::VectorXd& is = saved->second;
    if (t.needs_grad(gain.id)) t.grad(gain.id) += (g.cwiseProduct(xh)).colwise().sum();
    if (t.needs_grad(bias.id)) t.grad(bias.id) += g.colwise().sum();
    if (t.needs_grad(x.id)) {
      Matrix& gx = t.grad(x.id);
      const auto gamma = t.value(gain.id).row(0).array();
      for (Index r = 0; r < xh.rows(); ++r) {
        Eigen::ArrayXd dxhat = (g.row(r).array() * gamma).transpose();
        Eigen::ArrayXd xr = xh.row(r).array().transpose();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat * xr).mean();
        gx.row(r).array() += (is(r) * (dxhat - m1 - xr * m2)).transpose();
      }
    }
  });
}

Var detach(Var a) { return a.tape->constant(a.value()); }

Var gather(Tape& t, Parameter& table, std::span<const int> rows) {
  const int self = next_id(t);
  std::vector<int> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Index>(idx.size()), table.value.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.value.rows()) {
      throw std::out_of_range("gather: index " + std::to_string(idx[i]) + " out of range for " + table.name);
    }
    out.row(static_cast<Index>(i)) = table.value.row(idx[i]);
  }
  Parameter* target = &table;
  return t.make(std::move(out), true, [target, idx = std::move(idx), self](Tape& t) {
    const Matrix& g = t.grad(self);
    for (std::size_t i = 0; i < idx.size(); ++i) target->grad.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

Var select_rows(Var a, std::span<const int> rows) {
  Tape& t = *a.tape;
  const int self = next_id(t);
  std::vector<int> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw std::out_of_range("select_rows: row index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  return t.make(std::move(out), any_grad({a}), [a, idx = std::move(idx), self](Tape& t) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(a.id);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("vstack: no inputs");
  Tape& t = *parts[0].tape;
  const Index cols = parts[0].cols();
  Index rows = 0;
  bool ng = false;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("vstack: column mismatch");
    rows += p.rows();
    ng = ng || t.needs_grad(p.id);
  }
  Matrix out(rows, cols);
  Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  const int self = next_id(t);
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.make(std::move(out), ng, [ins = std::move(ins), self](Tape& t) {
    const Matrix& g = t.grad(self);
    Index r = 0;
    for (const Var& p : ins) {
      const Index n = t.value(p.id).rows();
      if (t.needs_grad(p.id)) t.grad(p.id) += g.middleRows(r, n);
      r += n;
    }
  });
}

Var hcat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("hcat: no inputs");
  Tape& t = *parts[0].tape;
  const Index rows = parts[0].rows();
  Index cols = 0;
  bool ng = false;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("hcat: row mismatch");
    cols += p.cols();
    ng = ng || t.needs_grad(p.id);
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  const int self = next_id(t);
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.make(std::move(out), ng, [ins = std::move(ins), self](Tape& t) {
    const Matrix& g = t.grad(self);
    Index c = 0;
    for (const Var& p : ins) {
      const Index n = t.value(p.id).cols();
      if (t.needs_grad(p.id)) t.grad(p.id) += g.middleCols(c, n);
      c += n;
    }
  });
}

Var scale_rows(Var a, Var col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("scale_rows: need n x 1 column");
  Tape& t = *a.tape;
  const int self = next_id(t);
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return t.make(std::move(out), any_grad({a, col}), [a, col, self](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id).array() += g.array().colwise() * t.value(col.id).col(0).array();
    if (t.needs_grad(col.id)) t.grad(col.id).col(0) += g.cwiseProduct(t.value(a.id)).rowwise().sum();
  });
}

Var row_sum(Var a) {
  Tape& t = *a.tape;
  const int self = next_id(t);
  Matrix out = a.value().rowwise().sum();
  return t.make(std::move(out), any_grad({a}), [a, self](Tape& t) {
    t.grad(a.id).colwise() += t.grad(self).col(0);
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  const int self = next_id(t);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.make(std::move(out), any_grad({a}), [a, self](Tape& t) {
    t.grad(a.id).array() += t.grad(self)(0, 0);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / n);
}

namespace {

void check_segments(const Segments& seg, Index rows) {
  if (seg.empty() || seg.front() != 0 || seg.back() != rows) {
    throw std::invalid_argument("segments must start at 0 and end at the row count");
  }
  for (std::size_t s = 1; s < seg.size(); ++s) {
    if (seg[s] < seg[s - 1]) throw std::invalid_argument("segments must be non-decreasing");
  }
}

Var segment_reduce(Var a, const Segments& seg, bool average) {
  check_segments(seg, a.rows());
  Tape& t = *a.tape;
  const int self = next_id(t);
  const Index ns = static_cast<Index>(seg.size()) - 1;
  Matrix out = Matrix::Zero(ns, a.cols());
  for (Index s = 0; s < ns; ++s) {
    const int b = seg[static_cast<std::size_t>(s)];
    const int e = seg[static_cast<std::size_t>(s) + 1];
    if (e == b) continue;
    out.row(s) = a.value().middleRows(b, e - b).colwise().sum();
    if (average) out.row(s) /= static_cast<double>(e - b);
  }
  return t.make(std::move(out), any_grad({a}), [a, seg, average, self](Tape& t) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(a.id);
    for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
      const int b = seg[s];
      const int e = seg[s + 1];
      if (e == b) continue;
      const double w = average ? 1.0 / static_cast<double>(e - b) : 1.0;
      for (int r = b; r < e; ++r) ga.row(r) += w * g.row(static_cast<Index>(s));
    }
  });
}

}  // namespace

Var segment_sum(Var a, const Segments& seg) { return segment_reduce(a, seg, false); }
Var segment_mean(Var a, const Segments& seg) { return segment_reduce(a, seg, true); }

Var segment_softmax(Var col, const Segments& seg) {
  if (col.cols() != 1) throw std::invalid_argument("segment_softmax: need a column");
  check_segments(seg, col.rows());
  Tape& t = *col.tape;
  const int self = next_id(t);
  Matrix out(col.rows(), 1);
  for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
    const int b = seg[s];
    const int e = seg[s + 1];
    if (e == b) continue;
    const auto x = col.value().middleRows(b, e - b).col(0);
    const double mx = x.maxCoeff();
    Eigen::VectorXd ex = (x.array() - mx).exp();
    out.middleRows(b, e - b).col(0) = ex / ex.sum();
  }
  return t.make(std::move(out), any_grad({col}), [col, seg, self](Tape& t) {
    const Matrix& g = t.grad(self);
    const Matrix& p = t.value(self);
    Matrix& gc = t.grad(col.id);
    for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
      const int b = seg[s];
      const int e = seg[s + 1];
      if (e == b) continue;
      const double dot = g.middleRows(b, e - b).col(0).dot(p.middleRows(b, e - b).col(0));
      for (int r = b; r < e; ++r) gc(r, 0) += p(r, 0) * (g(r, 0) - dot);
    }
  });
}

Var causal_attention(Var qkv, const Segments& seg, int heads) {
  check_segments(seg, qkv.rows());
  if (qkv.cols() % 3 != 0) throw std::invalid_argument("causal_attention: width must be 3d");
  const Index d = qkv.cols() / 3;
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("causal_attention: d not divisible by heads");
  const Index hd = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  Tape& t = *qkv.tape;
  const int self = next_id(t);
  const Matrix& x = qkv.value();
  Matrix out = Matrix::Zero(x.rows(), d);
  // Attention probabilities per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<Matrix>>();
  for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
    const int b = seg[s];
    const Index n = seg[s + 1] - b;
    for (int h = 0; h < heads; ++h) {
      const auto q = x.block(b, h * hd, n, hd);
      const auto k = x.block(b, d + h * hd, n, hd);
      const auto v = x.block(b, 2 * d + h * hd, n, hd);
      Matrix p = q.lazyProduct(k.transpose()) * sc;
      for (Index i = 0; i < n; ++i) {
        const double mx = p.row(i).head(i + 1).maxCoeff();
        double z = 0.0;
        for (Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          z += p(i, j);
        }
        p.row(i).head(i + 1) /= z;
        for (Index j = i + 1; j < n; ++j) p(i, j) = 0.0;
      }
      out.block(b, h * hd, n, hd).noalias() = p.lazyProduct(v);
      probs->push_back(std::move(p));
    }
  }
  return t.make(std::move(out), any_grad({qkv}), [qkv, seg, heads, d, hd, sc, probs, self](Tape& t) {
    const Matrix& x = t.value(qkv.id);
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(qkv.id);
    std::size_t pi = 0;
    for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
      const int b = seg[s];
      const Index n = seg[s + 1] - b;
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = (*probs)[pi++];
        const auto q = x.block(b, h * hd, n, hd);
        const auto k = x.block(b, d + h * hd, n, hd);
        const auto v = x.block(b, 2 * d + h * hd, n, hd);
        const auto go = g.block(b, h * hd, n, hd);
        gx.block(b, 2 * d + h * hd, n, hd).noalias() += p.transpose().lazyProduct(go);
        Matrix dp = go.lazyProduct(v.transpose());
        Matrix ds(n, n);
        for (Index i = 0; i < n; ++i) {
          const double dot = dp.row(i).dot(p.row(i));
          ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
        }
        ds *= sc;
        gx.block(b, h * hd, n, hd).noalias() += ds.lazyProduct(k);
        gx.block(b, d + h * hd, n, hd).noalias() += ds.transpose().lazyProduct(q);
      }
    }
  });
}

Var cosine_rows(Var a, Var b) {
  check_same_shape(a, b, "cosine_rows");
  Tape& t = *a.tape;
  const int self = next_id(t);
  const Index n = a.rows();
  Eigen::VectorXd na = a.value().rowwise().norm();
  Eigen::VectorXd nb = b.value().rowwise().norm();
  for (Index r = 0; r < n; ++r) {
    if (!(na(r) > 0.0) || !(nb(r) > 0.0)) {
      throw NumericalError("cosine of a zero-norm vector (row " + std::to_string(r) + ")");
    }
  }
  Matrix out(n, 1);
  for (Index r = 0; r < n; ++r) out(r, 0) = a.value().row(r).dot(b.value().row(r)) / (na(r) * nb(r));
  return t.make(std::move(out), any_grad({a, b}), [a, b, na, nb, self](Tape& t) {
    const Matrix& g = t.grad(self);
    const Matrix& cs = t.value(self);
    const Matrix& av = t.value(a.id);
    const Matrix& bv = t.value(b.id);
    for (Index r = 0; r < av.rows(); ++r) {
      const double gr = g(r, 0);
      if (gr == 0.0) continue;
      if (t.needs_grad(a.id)) {
        t.grad(a.id).row(r) += gr * (bv.row(r) / (na(r) * nb(r)) - cs(r, 0) * av.row(r) / (na(r) * na(r)));
      }
      if (t.needs_grad(b.id)) {
        t.grad(b.id).row(r) += gr * (av.row(r) / (na(r) * nb(r)) - cs(r, 0) * bv.row(r) / (nb(r) * nb(r)));
      }
    }
  });
}

Var bce_with_logits(Var logits, std::span<const int> labels) {
  if (logits.cols() != 1 || static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw std::invalid_argument("bce_with_logits: need n x 1 logits and n labels");
  }
  constexpr double kLo = 1e-7;
  constexpr double kHi = 1.0 - 1e-7;
  Tape& t = *logits.tape;
  const int self = next_id(t);
  const Index n = logits.rows();
  Matrix out(n, 1);
  Eigen::VectorXd dldz(n);
  for (Index r = 0; r < n; ++r) {
    const double z = logits.value()(r, 0);
    const int y = labels[static_cast<std::size_t>(r)];
    const double p = 1.0 / (1.0 + std::exp(-z));
    const double pc = std::clamp(p, kLo, kHi);
    out(r, 0) = -(y * std::log(pc) + (1 - y) * std::log(1.0 - pc));
    dldz(r) = (p > kLo && p < kHi) ? (p - y) : 0.0;
  }
  return t.make(std::move(out), any_grad({logits}), [logits, dldz, self](Tape& t) {
    t.grad(logits.id).col(0) += t.grad(self).col(0).cwiseProduct(dldz);
  });
}

Var softmax_xent(Var scores, std::span<const int> targets) {
  if (static_cast<std::size_t>(scores.rows()) != targets.size()) {
    throw std::invalid_argument("softmax_xent: one target per row");
  }
  Tape& t = *scores.tape;
  const int self = next_id(t);
  const Index n = scores.rows();
  Matrix probs(n, scores.cols());
  Matrix out(n, 1);
  std::vector<int> tg(targets.begin(), targets.end());
  for (Index r = 0; r < n; ++r) {
    const auto s = scores.value().row(r);
    const double mx = s.maxCoeff();
    const double lse = mx + std::log((s.array() - mx).exp().sum());
    probs.row(r) = (s.array() - lse).exp();
    out(r, 0) = lse - s(tg[static_cast<std::size_t>(r)]);
  }
  return t.make(std::move(out), any_grad({scores}), [scores, probs, tg, self](Tape& t) {
    const Matrix& g = t.grad(self);
    Matrix& gs = t.grad(scores.id);
    for (Index r = 0; r < probs.rows(); ++r) {
      Eigen::RowVectorXd d = probs.row(r);
      d(tg[static_cast<std::size_t>(r)]) -= 1.0;
      gs.row(r) += g(r, 0) * d;
    }
  });
}

Var group_dot(Var u, Var items, int group) {
  if (group <= 0 || items.rows() != u.rows() * group || items.cols() != u.cols()) {
    throw std::invalid_argument("group_dot: items must be (B*G) x d");
  }
  Tape& t = *u.tape;
  const int self = next_id(t);
  const Index b = u.rows();
  Matrix out(b, group);
  for (Index r = 0; r < b; ++r) {
    out.row(r) = (items.value().middleRows(r * group, group) * u.value().row(r).transpose()).transpose();
  }
  return t.make(std::move(out), any_grad({u, items}), [u, items, group, self](Tape& t) {
    const Matrix& g = t.grad(self);
    for (Index r = 0; r < g.rows(); ++r) {
      if (t.needs_grad(u.id)) t.grad(u.id).row(r) += g.row(r) * t.value(items.id).middleRows(r * group, group);
      if (t.needs_grad(items.id)) {
        t.grad(items.id).middleRows(r * group, group) += g.row(r).transpose() * t.value(u.id).row(r);
      }
    }
  });
}

}  // namespace llmcf::ag
