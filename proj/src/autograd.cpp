// SPDX-License-Identifier: Apache-2.0
#include "bitformer/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "bitformer/errors.hpp"

namespace bitformer {

// ---------------------------------------------------------------------------
// ParameterSet / GradientBuffer

Parameter& ParameterSet::add(std::string name, DenseMatrix init, bool decay) {
  if (by_name_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->grad = DenseMatrix(init.rows(), init.cols());
  p->value = std::move(init);
  p->decay = decay;
  p->index = params_.size();
  by_name_.emplace(p->name, p->index);
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterSet::find(std::string_view name) {
  auto it = by_name_.find(std::string(name));
  return it == by_name_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterSet::find(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  return it == by_name_.end() ? nullptr : params_[it->second].get();
}

Parameter& ParameterSet::at(std::string_view name) {
  Parameter* p = find(name);
  if (!p) throw IndexError("no parameter named '" + std::string(name) + "'");
  return *p;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p->grad.fill(0.0);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->name);
  return out;
}

void GradientBuffer::add(const Parameter& p, const DenseMatrix& g) {
  if (p.index >= grads_.size()) grads_.resize(p.index + 1);
  DenseMatrix& slot = grads_[p.index];
  if (slot.empty()) {
    slot = g;
  } else {
    slot += g;
  }
}

void GradientBuffer::add(const GradientBuffer& other) {
  if (other.grads_.size() > grads_.size()) grads_.resize(other.grads_.size());
  for (std::size_t i = 0; i < other.grads_.size(); ++i) {
    const DenseMatrix& g = other.grads_[i];
    if (g.empty()) continue;
    if (grads_[i].empty()) {
      grads_[i] = g;
    } else {
      grads_[i] += g;
    }
  }
}

void GradientBuffer::flush_into(ParameterSet& params) const {
  for (std::size_t i = 0; i < grads_.size() && i < params.size(); ++i) {
    if (!grads_[i].empty()) params[i].grad += grads_[i];
  }
}

const DenseMatrix* GradientBuffer::get(std::size_t index) const {
  if (index >= grads_.size() || grads_[index].empty()) return nullptr;
  return &grads_[index];
}

// ---------------------------------------------------------------------------
// Tape

const DenseMatrix& Var::value() const { return tape->value(id); }

Var Tape::constant(DenseMatrix value) {
  Node n;
  n.own = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(const Parameter& p) {
  auto it = param_nodes_.find(p.index);
  if (it != param_nodes_.end()) return {this, it->second};
  Node n;
  n.external = &p.value;
  n.needs_grad = true;
  n.param_index = p.index;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(p.index, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

Var Tape::record(DenseMatrix value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(parents), std::move(fn));
}

Var Tape::record(DenseMatrix value, const std::vector<Var>& parents, BackwardFn fn) {
  Node n;
  n.own = std::move(value);
  for (const Var& p : parents) {
    if (p.tape != this) throw ContractError("operand recorded on a different tape");
    n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const DenseMatrix& Tape::value(std::size_t id) const { return nodes_.at(id).value_ref(); }

DenseMatrix& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value_ref().empty()) {
    n.grad = DenseMatrix(n.value_ref().rows(), n.value_ref().cols());
  }
  return n.grad;
}

void Tape::accumulate(std::size_t id, const DenseMatrix& g) {
  if (!nodes_[id].needs_grad) return;
  grad(id) += g;
}

void Tape::backward(Var loss, double seed) {
  if (loss.tape != this) throw ContractError("backward: loss recorded on a different tape");
  const DenseMatrix& lv = value(loss.id);
  if (lv.size() != 1) throw DimensionError("backward: loss must be 1x1, got " + lv.shape_string());
  visit_log_.clear();
  grad(loss.id)[0] += seed;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    visit_log_.push_back(i);
    n.backward(*this, i);
  }
}

void Tape::collect(GradientBuffer& out, const ParameterSet& params) const {
  for (const Node& n : nodes_) {
    if (!n.param_index || n.grad.empty()) continue;
    out.add(params[*n.param_index], n.grad);
  }
}

// ---------------------------------------------------------------------------
// Differentiable primitives

namespace ad {

namespace {

void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

}  // namespace

Var matmul(Var a, Var b) {
  same_tape(a, b);
  Tape& t = *a.tape;
  return t.record(bitformer::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    if (t.needs_grad(a.id)) t.accumulate(a.id, matmul_nt(g, t.value(b.id)));
    if (t.needs_grad(b.id)) t.accumulate(b.id, matmul_tn(t.value(a.id), g));
  });
}

Var matmul_nt(Var a, Var b) {
  same_tape(a, b);
  Tape& t = *a.tape;
  return t.record(bitformer::matmul_nt(a.value(), b.value()), {a, b}, [a, b](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    if (t.needs_grad(a.id)) t.accumulate(a.id, bitformer::matmul(g, t.value(b.id)));
    if (t.needs_grad(b.id)) t.accumulate(b.id, matmul_tn(g, t.value(a.id)));
  });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  return a.tape->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    t.accumulate(a.id, g);
    if (t.needs_grad(b.id)) t.accumulate(b.id, g * -1.0);
  });
}

Var add_row(Var a, Var bias) {
  same_tape(a, bias);
  const DenseMatrix& av = a.value();
  const DenseMatrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw DimensionError("add_row: bias " + bv.shape_string() + " for input " + av.shape_string());
  }
  DenseMatrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  return a.tape->record(std::move(out), {a, bias}, [a, bias](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    t.accumulate(a.id, g);
    if (t.needs_grad(bias.id)) {
      DenseMatrix gb(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
      t.accumulate(bias.id, gb);
    }
  });
}

Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a}, [a, s](Tape& t, std::size_t self) {
    t.accumulate(a.id, t.grad(self) * s);
  });
}

Var softmax_rows(Var a) {
  return a.tape->record(bitformer::softmax_rows(a.value()), {a}, [a](Tape& t, std::size_t self) {
    const DenseMatrix& y = t.value(self);
    const DenseMatrix& g = t.grad(self);
    DenseMatrix dx(y.rows(), y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) = y(r, c) * (g(r, c) - dot);
    }
    t.accumulate(a.id, dx);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  auto res = bitformer::layer_norm(x.value(), gamma.value().values(), beta.value().values(), eps);
  auto saved = std::make_shared<LayerNormResult>(std::move(res));
  DenseMatrix out = saved->out;
  return x.tape->record(std::move(out), {x, gamma, beta}, [x, gamma, beta, saved](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    const DenseMatrix& xh = saved->normalized;
    const DenseMatrix& gm = t.value(gamma.id);
    const std::size_t n = g.cols();
    if (t.needs_grad(gamma.id) || t.needs_grad(beta.id)) {
      DenseMatrix dg(1, n), db(1, n);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) {
          dg[c] += g(r, c) * xh(r, c);
          db[c] += g(r, c);
        }
      t.accumulate(gamma.id, dg);
      t.accumulate(beta.id, db);
    }
    if (t.needs_grad(x.id)) {
      DenseMatrix dx(g.rows(), n);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          const double d = g(r, c) * gm[c];
          sum_d += d;
          sum_dx += d * xh(r, c);
        }
        for (std::size_t c = 0; c < n; ++c) {
          const double d = g(r, c) * gm[c];
          dx(r, c) = saved->inv_std[r] * (d - inv_n * sum_d - xh(r, c) * inv_n * sum_dx);
        }
      }
      t.accumulate(x.id, dx);
    }
  });
}

Var gelu(Var a) {
  return a.tape->record(bitformer::gelu(a.value()), {a}, [a](Tape& t, std::size_t self) {
    const DenseMatrix& x = t.value(a.id);
    DenseMatrix dx = t.grad(self);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= gelu_derivative(x[i]);
    t.accumulate(a.id, dx);
  });
}

Var hardtanh(Var a) {
  DenseMatrix out = a.value();
  for (double& v : out.values()) v = std::clamp(v, -1.0, 1.0);
  return a.tape->record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const DenseMatrix& x = t.value(a.id);
    DenseMatrix dx = t.grad(self);
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (std::abs(x[i]) > 1.0) dx[i] = 0.0;
    t.accumulate(a.id, dx);
  });
}

Var cross_entropy(Var logits, std::vector<std::size_t> targets, std::size_t ignore_index) {
  const double loss = bitformer::cross_entropy(logits.value(), targets, ignore_index);
  return logits.tape->record(
      DenseMatrix::scalar(loss), {logits},
      [logits, targets = std::move(targets), ignore_index](Tape& t, std::size_t self) {
        DenseMatrix g = cross_entropy_grad(t.value(logits.id), targets, ignore_index);
        g *= t.grad(self)[0];
        t.accumulate(logits.id, g);
      });
}

Var gather_rows(Var table, std::vector<std::size_t> ids) {
  const DenseMatrix& tv = table.value();
  DenseMatrix out(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " >= table rows " +
                       std::to_string(tv.rows()));
    }
    std::copy(tv.row(ids[i]).begin(), tv.row(ids[i]).end(), out.row(i).begin());
  }
  return table.tape->record(std::move(out), {table}, [table, ids = std::move(ids)](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    DenseMatrix& gt = t.grad(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto dst = gt.row(ids[i]);
      auto src = g.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const DenseMatrix& av = a.value();
  if (start + count > av.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + av.shape_string());
  }
  DenseMatrix out(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, start + c);
  return a.tape->record(std::move(out), {a}, [a, start, count](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    DenseMatrix& ga = t.grad(a.id);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) ga(r, start + c) += g(r, c);
  });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const DenseMatrix& av = a.value();
  if (start + count > av.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + av.shape_string());
  }
  DenseMatrix out(count, av.cols());
  std::copy(av.data() + start * av.cols(), av.data() + (start + count) * av.cols(), out.data());
  return a.tape->record(std::move(out), {a}, [a, start](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    DenseMatrix& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[start * g.cols() + i] += g[i];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch " + p.value().shape_string());
    cols += p.cols();
  }
  DenseMatrix out(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const DenseMatrix& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, off + c) = v(r, c);
    off += v.cols();
  }
  return parts.front().tape->record(std::move(out), parts, [parts](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.grad(self);
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t w = t.value(p.id).cols();
      if (t.needs_grad(p.id)) {
        DenseMatrix& gp = t.grad(p.id);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off + c);
      }
      off += w;
    }
  });
}

Var kl_divergence(Var student_logits, const DenseMatrix& teacher_logits, double temperature) {
  const DenseMatrix& s = student_logits.value();
  if (!s.same_shape(teacher_logits)) {
    throw DimensionError("kl_divergence: student " + s.shape_string() + " vs teacher " +
                         teacher_logits.shape_string());
  }
  if (!(temperature > 0.0)) throw InvalidParameterError("kl_divergence: temperature must be positive");
  auto p = std::make_shared<DenseMatrix>(bitformer::softmax_rows(teacher_logits * (1.0 / temperature)));
  auto q = std::make_shared<DenseMatrix>(bitformer::softmax_rows(s * (1.0 / temperature)));
  double total = 0.0;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    for (std::size_t c = 0; c < s.cols(); ++c) {
      const double pi = (*p)(r, c);
      if (pi > 0.0) total += pi * (std::log(pi) - std::log((*q)(r, c)));
    }
  }
  const double rows = static_cast<double>(std::max<std::size_t>(s.rows(), 1));
  return student_logits.tape->record(
      DenseMatrix::scalar(total / rows), {student_logits},
      [student_logits, p, q, temperature, rows](Tape& t, std::size_t self) {
        DenseMatrix g = *q - *p;
        g *= t.grad(self)[0] / (temperature * rows);
        t.accumulate(student_logits.id, g);
      });
}

Var mse(Var a, const DenseMatrix& target) {
  const DenseMatrix& av = a.value();
  if (!av.same_shape(target)) {
    throw DimensionError("mse: " + av.shape_string() + " vs target " + target.shape_string());
  }
  auto diff = std::make_shared<DenseMatrix>(av - target);
  double total = 0.0;
  for (double d : diff->values()) total += d * d;
  const double n = static_cast<double>(std::max<std::size_t>(av.size(), 1));
  return a.tape->record(DenseMatrix::scalar(total / n), {a}, [a, diff, n](Tape& t, std::size_t self) {
    DenseMatrix g = *diff;
    g *= 2.0 * t.grad(self)[0] / n;
    t.accumulate(a.id, g);
  });
}

}  // namespace ad

}  // namespace bitformer
