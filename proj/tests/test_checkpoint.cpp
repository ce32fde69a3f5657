#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "bitformer/checkpoint.hpp"
#include "bitformer/errors.hpp"

using namespace bitformer;
namespace fs = std::filesystem;

namespace {

ModelConfig small(Variant v) {
  ModelConfig c = ModelConfig::tiny();
  c.vocab = 50;
  c.hidden = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.max_seq = 16;
  c.variant = v;
  return c;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("bitformer_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST_CASE("save, load, save is byte-identical") {
  const Model m = Model::build(small(Variant::bipft_b));
  const std::vector<std::string> vocab{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "word"};
  const auto bytes = serialize_checkpoint(m, vocab);
  const LoadedCheckpoint back = deserialize_checkpoint(bytes);
  CHECK(back.vocab == vocab);
  CHECK(back.model.config() == m.config());
  CHECK(back.model.calibrated());
  CHECK(serialize_checkpoint(back.model, back.vocab) == bytes);

  const fs::path path = temp_path("roundtrip.ckpt");
  save_checkpoint(m, path, vocab);
  CHECK(load_checkpoint(path).model.config() == m.config());
  CHECK(peek_checkpoint_config(path) == m.config());
  fs::remove(path);
}

TEST_CASE("values survive at float precision") {
  const Model m = Model::build(small(Variant::bipft_a));
  const LoadedCheckpoint back = deserialize_checkpoint(serialize_checkpoint(m));
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& a = m.params()[i].value;
    const auto& b = back.model.params()[i].value;
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(b[k] == static_cast<double>(static_cast<float>(a[k])));
  }
}

TEST_CASE("classifier head is restored") {
  Model m = Model::build(small(Variant::bipft_a));
  m.ensure_classifier(3);
  const LoadedCheckpoint back = deserialize_checkpoint(serialize_checkpoint(m));
  REQUIRE(back.model.classifier());
  CHECK(back.model.classifier()->weight->value.rows() == 3);
}

TEST_CASE("corruption is reported precisely") {
  const auto bytes = serialize_checkpoint(Model::build(small(Variant::bipft_a)));

  SUBCASE("payload byte flipped") {
    auto bad = bytes;
    bad[bad.size() - 100] ^= 0x40;
    CHECK_THROWS_AS(deserialize_checkpoint(bad), ChecksumError);
  }
  SUBCASE("version") {
    auto bad = bytes;
    bad[4] = 9;
    CHECK_THROWS_AS(deserialize_checkpoint(bad), VersionError);
  }
  SUBCASE("truncated") {
    for (std::size_t cut : {std::size_t{3}, std::size_t{4}, bytes.size() / 2, bytes.size() - 1}) {
      const std::vector<std::uint8_t> bad(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
      CHECK_THROWS_AS(deserialize_checkpoint(bad), TruncatedFileError);
    }
  }
  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad), IoError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.ckpt")), IoError);
  }
}

TEST_CASE("loading into a richer variant names the missing tensors") {
  const auto bytes = serialize_checkpoint(Model::build(small(Variant::baseline)));
  try {
    deserialize_checkpoint(bytes, small(Variant::bipft_b));
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK_FALSE(e.missing().empty());
    for (const auto& name : e.missing()) CHECK(name.find(".est.") != std::string::npos);
    CHECK(std::string(e.what()).find("layer0.attn.est.w_q") != std::string::npos);
  }
  // The other direction leaves tensors without a slot.
  const auto rich = serialize_checkpoint(Model::build(small(Variant::bipft_b)));
  CHECK_THROWS_AS(deserialize_checkpoint(rich, small(Variant::bipft_a)), SchemaError);
}

TEST_CASE("init_from_checkpoint copies matching tensors") {
  ModelConfig fp = small(Variant::bipft_a);
  fp.full_precision = true;
  fp.seed = 5;
  const Model teacher = Model::build(fp);
  const fs::path path = temp_path("teacher.ckpt");
  save_checkpoint(teacher, path);
  Model student = Model::build(small(Variant::bipft_b));
  const std::size_t n = init_from_checkpoint(student, path);
  CHECK(n == teacher.params().size());
  CHECK(student.params().at("emb.token").value == load_checkpoint(path).model.params().at("emb.token").value);
  fs::remove(path);
}

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64(nullptr, 0) == 0xcbf29ce484222325ULL);
  const std::uint8_t a[] = {'a'};
  CHECK(fnv1a64(a, 1) == 0xaf63dc4c8601ec8cULL);
  const char* s = "foobar";
  CHECK(fnv1a64(reinterpret_cast<const std::uint8_t*>(s), std::strlen(s)) == 0x85944171f73967e8ULL);
}
