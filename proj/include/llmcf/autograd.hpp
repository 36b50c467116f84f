#pragma once

// Small reverse-mode autodiff over row-major double matrices.
//
// Rows are tokens (or examples) stacked across a batch; variable-length
// groups of rows are described by CSR-style segment offsets.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace llmcf::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// Offsets [0, n_0, n_0 + n_1, ...]; segment s spans rows [off[s], off[s+1]).
using Segments = std::vector<int>;

struct Parameter {
  Parameter(std::string n, Index rows, Index cols)
      : name(std::move(n)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}

  std::string name;
  Matrix value;
  Matrix grad;
};

// Owns parameters with stable addresses, in registration order.
class ParamSet {
 public:
  Parameter& add(const std::string& name, Index rows, Index cols);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;

  void zero_grad();
  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  Var constant(Matrix m);
  // Copies the current parameter value; gradients flow to param.grad.
  Var param(Parameter& p);
  Var make(Matrix value, bool needs_grad, Backward backward);

  // Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(Var root);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  // Lazily allocated, zero-initialized gradient buffer.
  Matrix& grad(int id);
  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() > 0; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Elementwise and linear-algebra ops.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_bias(Var a, Var bias);  // bias is 1 x cols, broadcast over rows
Var gelu(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var detach(Var a);

// Row plumbing.
// Embedding lookup without copying the table; gradients scatter into table.grad.
Var gather(Tape& t, Parameter& table, std::span<const int> rows);
Var select_rows(Var a, std::span<const int> rows);
Var vstack(std::span<const Var> parts);
Var hcat(std::span<const Var> parts);
Var scale_rows(Var a, Var col);  // row r of a times col(r, 0)

// Reductions.
Var row_sum(Var a);  // n x 1
Var sum(Var a);      // 1 x 1
Var mean(Var a);     // 1 x 1
Var segment_sum(Var a, const Segments& seg);   // empty segment -> zero row
Var segment_mean(Var a, const Segments& seg);  // empty segment -> zero row
Var segment_softmax(Var col, const Segments& seg);

// Causal multi-head self-attention over packed [Q | K | V] rows (n x 3d).
// Each segment is an independent sequence.
Var causal_attention(Var qkv, const Segments& seg, int heads);

Var cosine_rows(Var a, Var b);  // n x 1; throws NumericalError on zero norms
// Per-row BCE on logits with the probability clamped to [1e-7, 1 - 1e-7].
Var bce_with_logits(Var logits, std::span<const int> labels);
// Per-row cross-entropy of softmax(scores) against a target column.
Var softmax_xent(Var scores, std::span<const int> targets);
// Scores (B x G): row b of u dotted with rows [b*G, (b+1)*G) of items.
Var group_dot(Var u, Var items, int group);

}  // namespace llmcf::ag
