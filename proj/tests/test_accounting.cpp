#include <doctest.h>

#include <cmath>

#include "bitformer/accounting.hpp"

using namespace bitformer;

namespace {

ModelConfig base(Variant v) {
  ModelConfig c = ModelConfig::base();
  c.variant = v;
  return c;
}

double rel(double got, double want) { return std::abs(got - want) / want; }

}  // namespace

TEST_CASE("base config reproduces the published operation counts and sizes") {
  const auto a = equivalent_flops(base(Variant::bipft_a), 128);
  const auto b = equivalent_flops(base(Variant::bipft_b), 128);
  CHECK(rel(a.equivalent_gflops, 0.4) <= 0.15);
  CHECK(rel(b.equivalent_gflops, 0.4) <= 0.15);
  CHECK(b.equivalent_gflops > a.equivalent_gflops);
  CHECK(rel(a.fp_reference_gflops, 22.5) <= 0.15);
  CHECK(rel(a.size_mb, 14.7) <= 0.05);
  CHECK(rel(b.size_mb, 14.9) <= 0.05);
  // Deployed form = latent parameters + one stored scale per binarized row
  // (embedding rows and linear output rows).
  const std::size_t scales = (30522 + 512 + 2) + 12 * (5 * 768 + 3072);
  CHECK(a.binary_params + a.fp_params == a.backbone_params + scales);
  CHECK(b.binary_params + b.fp_params == b.backbone_params + scales);
}

TEST_CASE("zero layers leaves the embedding cost") {
  ModelConfig c = ModelConfig::tiny();
  c.layers = 0;
  const auto r = equivalent_flops(c, 10);
  CHECK(r.binary_macs == 0);
  CHECK(r.fp_macs == 0);
  // sum of three rows (2), layer norm (4), three row scales (3) per element
  CHECK(r.elementwise_flops == 9.0 * 10 * 64);
  CHECK(r.equivalent_gflops == doctest::Approx(9.0 * 10 * 64 * 1e-9));
}

TEST_CASE("tiny config closed form") {
  const auto r = equivalent_flops(ModelConfig::tiny(), 16);
  // per layer: 16·(4·64² + 2·64·128) linear + 3·16²·64 attention products
  CHECK(r.binary_macs == 2.0 * (524288 + 49152));
  // per layer: 16·(5·64 + 128) readouts + 16²·4 score scales + 16·64 AttV readout
  CHECK(r.fp_macs == 2.0 * (7168 + 1024 + 1024));
  // 6·n·c + 3·n·c embedding, per layer 10·n·c + 2·n²·h + 4·n·f
  CHECK(r.elementwise_flops == 6144 + 3072 + 2.0 * (2048 + 8192 + 2048 + 8192));
}

TEST_CASE("full precision is its own reference") {
  ModelConfig c = ModelConfig::tiny();
  c.full_precision = true;
  const auto r = equivalent_flops(c, 32);
  CHECK(r.binary_macs == 0);
  CHECK(r.equivalent_gflops == r.fp_reference_gflops);
  CHECK(r.size_mb == r.fp_reference_size_mb);
}

TEST_CASE("report text carries the convention") {
  const auto r = equivalent_flops(ModelConfig::tiny(), 16);
  const std::string text = r.to_text();
  CHECK(text.find("equivalent_gflops=") != std::string::npos);
  CHECK(text.find("1/64") != std::string::npos);
  CHECK(head_parameter_count(ModelConfig::tiny()) == 4096 * 64 + 4096 + 2 * 64 + 2);
}
