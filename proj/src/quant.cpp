// SPDX-License-Identifier: Apache-2.0
#include "bitformer/quant.hpp"

#include <algorithm>
#include <cmath>

#include "bitformer/errors.hpp"

namespace bitformer {

namespace {

struct Group {
  std::size_t begin;
  std::size_t end;
};

std::vector<Group> weight_groups(const DenseMatrix& w, WeightGranularity g) {
  std::vector<Group> groups;
  if (g == WeightGranularity::per_tensor) {
    groups.push_back({0, w.size()});
  } else {
    for (std::size_t r = 0; r < w.rows(); ++r) groups.push_back({r * w.cols(), (r + 1) * w.cols()});
  }
  return groups;
}

void require_positive_alpha(double alpha, const char* who) {
  if (!(alpha > 0.0)) {
    throw InvalidParameterError(std::string(who) + ": scale alpha must be positive, got " + std::to_string(alpha));
  }
}

void require_scalar(Var v, const char* who) {
  if (v.value().size() != 1) {
    throw DimensionError(std::string(who) + ": expected a 1x1 parameter, got " + v.value().shape_string());
  }
}

}  // namespace

DenseMatrix sign(const DenseMatrix& x) {
  DenseMatrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sign_of(x[i]);
  return out;
}

BinarizedWeight binarize_weight(const DenseMatrix& w, WeightGranularity granularity) {
  BinarizedWeight res{DenseMatrix(w.rows(), w.cols()), PackedBitMatrix(w.rows(), w.cols()), {}, {}};
  res.scales.assign(w.rows(), 0.0);
  res.means.assign(w.rows(), 0.0);
  DenseMatrix centered(w.rows(), w.cols());
  for (const Group& g : weight_groups(w, granularity)) {
    const double n = static_cast<double>(g.end - g.begin);
    double l1 = 0.0, sum = 0.0;
    for (std::size_t k = g.begin; k < g.end; ++k) {
      l1 += std::abs(w[k]);
      sum += w[k];
    }
    const double s = n > 0 ? l1 / n : 0.0;
    const double mean = n > 0 ? sum / n : 0.0;
    for (std::size_t k = g.begin; k < g.end; ++k) {
      centered[k] = w[k] - mean;
      res.simulated[k] = s * sign_of(centered[k]);
    }
    if (w.cols() == 0) continue;
    for (std::size_t r = g.begin / w.cols(); r < (g.end + w.cols() - 1) / w.cols(); ++r) {
      res.scales[r] = s;
      res.means[r] = mean;
    }
  }
  res.bits = pack_signs(centered);
  return res;
}

BinarizedActivation binarize_activation_pm1(const DenseMatrix& a, double alpha, double beta) {
  DenseMatrix shifted(a.rows(), a.cols());
  DenseMatrix sim(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    shifted[i] = a[i] - beta;
    sim[i] = alpha * sign_of(shifted[i]);
  }
  return {std::move(sim), pack_signs(shifted), alpha};
}

BinarizedActivation binarize_attention_01(const DenseMatrix& att, double alpha, double beta) {
  require_positive_alpha(alpha, "binarize_attention_01");
  DenseMatrix levels(att.rows(), att.cols());
  DenseMatrix sim(att.rows(), att.cols());
  for (std::size_t i = 0; i < att.size(); ++i) {
    const double x = (att[i] - beta) / alpha;
    levels[i] = x >= 0.5 ? 1.0 : 0.0;
    sim[i] = alpha * levels[i];
  }
  return {std::move(sim), pack_nonzero(levels), alpha};
}

DenseMatrix residual(const DenseMatrix& full, const DenseMatrix& binarized) {
  if (!full.same_shape(binarized)) {
    throw DimensionError("residual: " + full.shape_string() + " vs " + binarized.shape_string());
  }
  return full - binarized;
}

ElasticBinarizer ElasticBinarizer::create(ParameterSet& params, const std::string& prefix, BinaryLevel level,
                                          double alpha0, double beta0) {
  ElasticBinarizer q;
  q.alpha = &params.add(prefix + ".alpha", DenseMatrix::scalar(alpha0));
  q.alpha->lower_bound = kAlphaFloor;
  q.beta = &params.add(prefix + ".beta", DenseMatrix::scalar(beta0));
  q.level = level;
  return q;
}

double Calibrator::observe(const ElasticBinarizer& q, const DenseMatrix& a) {
  const double beta = q.beta_value();
  double sum = 0.0;
  for (double v : a.values()) sum += std::abs(v - beta);
  // {0,1} maps threshold at α/2; doubling puts the threshold at the mean.
  const double factor = q.level == BinaryLevel::zero_one ? 2.0 : 1.0;
  Stat& s = stats_[q.alpha->index];
  s.alpha = q.alpha;
  s.sum += factor * sum;
  s.count += a.size();
  const double current = a.size() == 0 ? 1.0 : factor * sum / static_cast<double>(a.size());
  return std::max(current, kAlphaFloor);
}

void Calibrator::finalize() const {
  for (const auto& [index, s] : stats_) {
    if (s.count == 0) continue;
    s.alpha->value[0] = std::max(s.sum / static_cast<double>(s.count), kAlphaFloor);
  }
}

namespace ad {

Var sign_ste(Var x) {
  return x.tape->record(bitformer::sign(x.value()), {x}, [x](Tape& t, std::size_t self) {
    const DenseMatrix& xv = t.value(x.id);
    DenseMatrix g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (std::abs(xv[i]) > 1.0) g[i] = 0.0;
    t.accumulate(x.id, g);
  });
}

Var binarize_weight(Var w, WeightGranularity granularity) {
  BinarizedWeight bw = bitformer::binarize_weight(w.value(), granularity);
  return w.tape->record(std::move(bw.simulated), {w}, [w, granularity](Tape& t, std::size_t self) {
    const DenseMatrix& wv = t.value(w.id);
    const DenseMatrix& g = t.grad(self);
    DenseMatrix dw(wv.rows(), wv.cols());
    for (const Group& grp : weight_groups(wv, granularity)) {
      const double n = static_cast<double>(grp.end - grp.begin);
      if (n == 0) continue;
      double l1 = 0.0, sum = 0.0;
      for (std::size_t k = grp.begin; k < grp.end; ++k) {
        l1 += std::abs(wv[k]);
        sum += wv[k];
      }
      const double s = l1 / n;
      const double mean = sum / n;
      // Σ g·clip(c) feeds the scale term; Σ g·1{|c|≤1} the centering term.
      double g_clip = 0.0, g_window = 0.0;
      for (std::size_t k = grp.begin; k < grp.end; ++k) {
        const double c = wv[k] - mean;
        g_clip += g[k] * std::clamp(c, -1.0, 1.0);
        if (std::abs(c) <= 1.0) g_window += g[k];
      }
      for (std::size_t k = grp.begin; k < grp.end; ++k) {
        const double c = wv[k] - mean;
        const double sgn = wv[k] > 0.0 ? 1.0 : (wv[k] < 0.0 ? -1.0 : 0.0);
        const double direct = std::abs(c) <= 1.0 ? g[k] : 0.0;
        dw[k] = sgn / n * g_clip + s * (direct - g_window / n);
      }
    }
    t.accumulate(w.id, dw);
  });
}

Var binarize_activation_pm1(Var a, Var alpha, Var beta) {
  require_scalar(alpha, "binarize_activation_pm1");
  require_scalar(beta, "binarize_activation_pm1");
  const double al = alpha.value()[0];
  const double be = beta.value()[0];
  BinarizedActivation ba = bitformer::binarize_activation_pm1(a.value(), al, be);
  return a.tape->record(std::move(ba.simulated), {a, alpha, beta}, [a, alpha, beta](Tape& t, std::size_t self) {
    const DenseMatrix& av = t.value(a.id);
    const double al = t.value(alpha.id)[0];
    const double be = t.value(beta.id)[0];
    const DenseMatrix& g = t.grad(self);
    DenseMatrix da(av.rows(), av.cols());
    double d_alpha = 0.0, d_beta = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double x = av[i] - be;
      const bool inside = std::abs(x) <= 1.0;
      d_alpha += g[i] * std::clamp(x, -1.0, 1.0);
      if (inside) {
        da[i] = g[i] * al;
        d_beta -= g[i] * al;
      }
    }
    t.accumulate(a.id, da);
    t.accumulate(alpha.id, DenseMatrix::scalar(d_alpha));
    t.accumulate(beta.id, DenseMatrix::scalar(d_beta));
  });
}

Var binarize_attention_01(Var att, Var alpha, Var beta) {
  require_scalar(alpha, "binarize_attention_01");
  require_scalar(beta, "binarize_attention_01");
  const double al = alpha.value()[0];
  const double be = beta.value()[0];
  BinarizedActivation ba = bitformer::binarize_attention_01(att.value(), al, be);
  return att.tape->record(std::move(ba.simulated), {att, alpha, beta}, [att, alpha, beta](Tape& t, std::size_t self) {
    const DenseMatrix& av = t.value(att.id);
    const double al = t.value(alpha.id)[0];
    const double be = t.value(beta.id)[0];
    const DenseMatrix& g = t.grad(self);
    DenseMatrix datt(av.rows(), av.cols());
    double d_alpha = 0.0, d_beta = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double x = (av[i] - be) / al;
      if (x >= 0.0 && x <= 1.0) {
        datt[i] = g[i];
        d_beta -= g[i];
      } else if (x > 1.0) {
        d_alpha += g[i];
      }
    }
    t.accumulate(att.id, datt);
    t.accumulate(alpha.id, DenseMatrix::scalar(d_alpha));
    t.accumulate(beta.id, DenseMatrix::scalar(d_beta));
  });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// BinaryLinear

BinaryLinear BinaryLinear::create(ParameterSet& params, const std::string& prefix, std::size_t in,
                                  std::size_t out, Rng& rng, bool binarized, WeightGranularity granularity,
                                  double init_std) {
  BinaryLinear l;
  DenseMatrix w(out, in);
  for (double& v : w.values()) v = init_std * standard_normal(rng);
  l.weight = &params.add(prefix + ".weight", std::move(w), /*decay=*/true);
  l.bias = &params.add(prefix + ".bias", DenseMatrix(1, out));
  l.binarized = binarized;
  l.granularity = granularity;
  if (binarized) l.input = ElasticBinarizer::create(params, prefix + ".act", BinaryLevel::plus_minus_one, 1.0, 0.0);
  return l;
}

Var binarizer_alpha(Tape& tape, const ElasticBinarizer& q, const DenseMatrix& input, Calibrator* calib) {
  if (calib) return tape.constant(DenseMatrix::scalar(calib->observe(q, input)));
  return tape.param(*q.alpha);
}

Var BinaryLinear::forward(Tape& tape, Var x, Calibrator* calib) const {
  Var w = tape.param(*weight);
  Var b = tape.param(*bias);
  if (!binarized) return ad::add_row(ad::matmul_nt(x, w), b);
  Var alpha = binarizer_alpha(tape, input, x.value(), calib);
  Var xb = ad::binarize_activation_pm1(x, alpha, tape.param(*input.beta));
  Var wb = ad::binarize_weight(w, granularity);
  return ad::add_row(ad::matmul_nt(xb, wb), b);
}

DenseMatrix BinaryLinear::forward_packed(const DenseMatrix& x) const {
  if (x.cols() != in_features()) {
    throw DimensionError("binary linear: input " + x.shape_string() + " for weight " + weight->value.shape_string());
  }
  DenseMatrix out(x.rows(), out_features());
  if (!binarized) {
    out = matmul_nt(x, weight->value);
  } else {
    const BinarizedActivation xa = bitformer::binarize_activation_pm1(x, input.alpha_value(), input.beta_value());
    const BinarizedWeight wb = bitformer::binarize_weight(weight->value, granularity);
    const IntMatrix counts = binary_gemm_counts(xa.bits, wb.bits);
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t o = 0; o < out.cols(); ++o) out(i, o) = (xa.scale * wb.scales[o]) * counts(i, o);
  }
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t o = 0; o < out.cols(); ++o) out(i, o) += bias->value[o];
  return out;
}

}  // namespace bitformer
