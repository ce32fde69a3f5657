#include <doctest.h>

#include <cmath>

#include "bitformer/autograd.hpp"
#include "bitformer/errors.hpp"
#include "bitformer/rng.hpp"
#include "bitformer/verify.hpp"

using namespace bitformer;

namespace {

DenseMatrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double s = 1.0) {
  DenseMatrix m(r, c);
  for (double& v : m.values()) v = s * standard_normal(rng);
  return m;
}

// loss = CE(LN(gelu(x·W) + b)·V)
double small_net(const ParameterSet& ps, const DenseMatrix& x, GradientBuffer* grads) {
  Tape t;
  Var h = ad::matmul(t.constant(x), t.param(*ps.find("w")));
  h = ad::add_row(ad::gelu(h), t.param(*ps.find("b")));
  h = ad::layer_norm(h, t.param(*ps.find("g")), t.param(*ps.find("beta")), 1e-5);
  Var logits = ad::matmul(h, t.param(*ps.find("v")));
  Var loss = ad::cross_entropy(logits, {0, 2, 1});
  if (grads) {
    t.backward(loss);
    t.collect(*grads, ps);
  }
  return loss.value()[0];
}

}  // namespace

TEST_CASE("composite graph matches finite differences") {
  Rng rng = substream(11, "autograd");
  ParameterSet ps;
  ps.add("w", random_matrix(4, 5, rng, 0.5));
  ps.add("b", random_matrix(1, 5, rng, 0.1));
  ps.add("g", DenseMatrix(1, 5, 1.0));
  ps.add("beta", DenseMatrix(1, 5, 0.0));
  ps.add("v", random_matrix(5, 3, rng, 0.5));
  const DenseMatrix x = random_matrix(3, 4, rng);

  GradientBuffer grads(ps.size());
  small_net(ps, x, &grads);
  const double h = 1e-6;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Parameter& p = ps[i];
    const DenseMatrix* g = grads.get(p.index);
    REQUIRE(g != nullptr);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double keep = p.value[k];
      p.value[k] = keep + h;
      const double up = small_net(ps, x, nullptr);
      p.value[k] = keep - h;
      const double down = small_net(ps, x, nullptr);
      p.value[k] = keep;
      const double fd = (up - down) / (2 * h);
      CHECK(std::abs(fd - (*g)[k]) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("tape replay is bitwise deterministic") {
  Rng rng = substream(12, "autograd");
  ParameterSet ps;
  ps.add("w", random_matrix(4, 5, rng));
  ps.add("b", random_matrix(1, 5, rng));
  ps.add("g", DenseMatrix(1, 5, 1.0));
  ps.add("beta", DenseMatrix(1, 5, 0.0));
  ps.add("v", random_matrix(5, 3, rng));
  const DenseMatrix x = random_matrix(3, 4, rng);
  GradientBuffer a(ps.size()), b(ps.size());
  small_net(ps, x, &a);
  small_net(ps, x, &b);
  for (std::size_t i = 0; i < ps.size(); ++i) CHECK(*a.get(i) == *b.get(i));
}

TEST_CASE("parameter leaves are shared and gradients accumulate") {
  ParameterSet ps;
  auto& p = ps.add("p", DenseMatrix::from_rows({{2.0}}));
  Tape t;
  Var a = t.param(p), b = t.param(p);
  CHECK(a.id == b.id);
  Var y = ad::add(ad::scale(a, 3.0), ad::scale(b, 4.0));
  t.backward(y);
  GradientBuffer g(ps.size());
  t.collect(g, ps);
  CHECK((*g.get(0))[0] == 7.0);

  ps.zero_grad();
  g.flush_into(ps);
  g.flush_into(ps);
  CHECK(p.grad[0] == 14.0);
}

TEST_CASE("parameter set bookkeeping") {
  ParameterSet ps;
  ps.add("a", DenseMatrix(2, 3));
  ps.add("b", DenseMatrix(1, 4));
  CHECK(ps.scalar_count() == 10);
  CHECK(ps.find("missing") == nullptr);
  CHECK_THROWS_AS(ps.add("a", DenseMatrix(1, 1)), ConfigError);
  CHECK_THROWS_AS(ps.at("missing"), IndexError);
}

TEST_CASE("every primitive and binarizer passes its gradient check") {
  for (const auto& r : verify_gradients(1)) {
    INFO(r.property << ": " << r.detail);
    CHECK(r.passed);
  }
}
