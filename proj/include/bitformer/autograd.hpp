// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over an explicit tape of primitive operations.
//
// Parameters live outside the tape. A tape references them as leaves and,
// after backward(), its leaf gradients are flushed into a GradientBuffer. One
// tape per data shard; buffers are merged in a fixed order so the resulting
// gradient does not depend on how shards were scheduled across threads.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bitformer/matrix.hpp"
#include "bitformer/numerics.hpp"

namespace bitformer {

struct Parameter {
  std::string name;
  DenseMatrix value;
  DenseMatrix grad;
  bool decay = false;                 // receives decoupled weight decay
  bool frozen = false;                // skipped by the optimizer
  std::optional<double> lower_bound;  // enforced after every optimizer step
  std::size_t index = 0;
};

class ParameterSet {
 public:
  Parameter& add(std::string name, DenseMatrix init, bool decay = false);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  Parameter& at(std::string_view name);

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  std::size_t scalar_count() const;
  std::vector<std::string> names() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

/// Per-shard parameter gradients, indexed by Parameter::index.
class GradientBuffer {
 public:
  explicit GradientBuffer(std::size_t n = 0) : grads_(n) {}
  void add(const Parameter& p, const DenseMatrix& g);
  void add(const GradientBuffer& other);
  /// Adds the buffer into each Parameter::grad.
  void flush_into(ParameterSet& params) const;
  const DenseMatrix* get(std::size_t index) const;
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  std::vector<DenseMatrix> grads_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const DenseMatrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(DenseMatrix value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(const Parameter& p);
  Var record(DenseMatrix value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(DenseMatrix value, const std::vector<Var>& parents, BackwardFn fn);

  const DenseMatrix& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Gradient slot of a node, allocated as zeros on first access.
  DenseMatrix& grad(std::size_t id);
  void accumulate(std::size_t id, const DenseMatrix& g);

  /// Seeds d(loss)/d(loss) = seed and walks the tape in reverse recording order.
  void backward(Var loss, double seed = 1.0);
  void collect(GradientBuffer& out, const ParameterSet& params) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Ids of recorded operations in the order backward() visited them.
  const std::vector<std::size_t>& visit_log() const noexcept { return visit_log_; }

 private:
  struct Node {
    DenseMatrix own;
    const DenseMatrix* external = nullptr;
    DenseMatrix grad;
    BackwardFn backward;
    bool needs_grad = false;
    std::optional<std::size_t> param_index;
    const DenseMatrix& value_ref() const { return external ? *external : own; }
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, std::size_t> param_nodes_;
  std::vector<std::size_t> visit_log_;
};

namespace ad {

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Adds a 1×C row to every row of a.
Var add_row(Var a, Var bias);
Var scale(Var a, double s);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps);
Var gelu(Var a);
Var hardtanh(Var a);
/// Mean cross entropy over targets != ignore_index, as a 1×1 node.
Var cross_entropy(Var logits, std::vector<std::size_t> targets, std::size_t ignore_index = kNoIgnore);
Var gather_rows(Var table, std::vector<std::size_t> ids);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
/// Forward KL(softmax(teacher/T) ‖ softmax(student/T)), averaged over rows.
Var kl_divergence(Var student_logits, const DenseMatrix& teacher_logits, double temperature);
/// Mean squared error against a constant target.
Var mse(Var a, const DenseMatrix& target);

}  // namespace ad

}  // namespace bitformer
