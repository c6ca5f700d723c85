#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "mpsae/errors.hpp"
#include "mpsae/io.hpp"
#include "mpsae/serialize.hpp"
#include "oracles.hpp"

using namespace mpsae;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mpsae_test_io_" + name);
}

std::span<const unsigned char> as_bytes(const std::string& s) {
  return {reinterpret_cast<const unsigned char*>(s.data()), s.size()};
}

}  // namespace

TEST_CASE("crc32 check value") {
  CHECK(crc32(as_bytes("123456789")) == 0xCBF43926u);
  CHECK(crc32(as_bytes("")) == 0u);
}

TEST_CASE("byte writer and reader are little-endian and bounds-checked") {
  ByteWriter w;
  w.u32(0x01020304u);
  w.u64(0x1122334455667788ull);
  w.f64(-2.5);
  w.f32(0.75f);
  CHECK(w.buffer()[0] == 0x04);
  CHECK(w.buffer()[4] == 0x88);
  ByteReader r(w.buffer());
  CHECK(r.u32() == 0x01020304u);
  CHECK(r.u64() == 0x1122334455667788ull);
  CHECK(r.f64() == -2.5);
  CHECK(r.f32() == 0.75f);
  CHECK(r.remaining() == 0);
  CHECK_THROWS_AS(r.u8(), FormatError);
}

TEST_CASE("embedding container round trip") {
  RngStream rng(1);
  const Matrix m = oracle::gaussian(rng, 37, 9);
  SUBCASE("float64 is exact") {
    int width = 0;
    CHECK(decode_embedding(encode_embedding(m, 8), &width) == m);
    CHECK(width == 8);
  }
  SUBCASE("float32 rounds each value once") {
    const Matrix back = decode_embedding(encode_embedding(m, 4));
    for (std::size_t i = 0; i < m.data().size(); ++i)
      CHECK(back.data()[i] == static_cast<double>(static_cast<float>(m.data()[i])));
  }
  SUBCASE("header layout") {
    const auto b = encode_embedding(m, 4);
    CHECK(std::string(b.begin(), b.begin() + 6) == "SAEEMB");
    CHECK(b.size() == 6 + 4 + 8 + 4 + 1 + 37 * 9 * 4 + 4);
    ByteReader r(std::span<const unsigned char>(b).subspan(6));
    CHECK(r.u32() == kEmbeddingVersion);
    CHECK(r.u64() == 37);
    CHECK(r.u32() == 9);
    CHECK(r.u8() == 4);
  }
  SUBCASE("files and labels sidecar") {
    const auto path = temp_path("emb.bin");
    write_embedding_file(path, m, 8);
    CHECK(!read_embedding_file(path).labels);
    std::vector<Modality> labels(37, Modality::kText);
    labels[3] = Modality::kImage;
    write_labels_file(labels_path_for(path), labels);
    const EmbeddingFile f = read_embedding_file(path);
    CHECK(f.data == m);
    REQUIRE(f.labels);
    CHECK(*f.labels == labels);
    write_labels_file(labels_path_for(path), std::vector<Modality>(5, Modality::kText));
    CHECK_THROWS_AS(read_embedding_file(path), FormatError);
    std::filesystem::remove(path);
    std::filesystem::remove(labels_path_for(path));
  }
  CHECK_THROWS_AS(encode_embedding(m, 2), DomainError);
}

TEST_CASE("embedding container rejects damaged files") {
  RngStream rng(2);
  const auto good = encode_embedding(oracle::gaussian(rng, 10, 4), 4);
  auto bad_magic = good;
  bad_magic[1] = 'X';
  CHECK_THROWS_AS(decode_embedding(bad_magic), FormatError);
  auto flipped = good;
  flipped[40] ^= 0x10;
  CHECK_THROWS_AS(decode_embedding(flipped), ChecksumError);
  const std::vector<unsigned char> truncated(good.begin(), good.end() - 9);
  CHECK_THROWS_AS(decode_embedding(truncated), FormatError);
  const std::vector<unsigned char> header_only(good.begin(), good.begin() + 12);
  CHECK_THROWS_AS(decode_embedding(header_only), FormatError);
  auto version = good;
  version[6] = 7;
  CHECK_THROWS_AS(decode_embedding(version), VersionError);
  auto huge = good;
  huge[10 + 7] = 0x7f;  // row count near 2^63
  CHECK_THROWS_AS(decode_embedding(huge), FormatError);
  CHECK_THROWS_AS(read_file(temp_path("missing")), FormatError);
}

TEST_CASE("train config json round trip and strictness") {
  TrainConfig c;
  c.variant = Variant::kMatryoshka;
  c.matryoshka_prefixes = {5, 20};
  c.lr_schedule.kind = LrSchedule::Kind::kCosine;
  c.lr_schedule.warmup = 100;
  c.mp_stop.selection = Selection::kAbsolute;
  c.learning_rate = 0.1 + 0.2;
  TrainConfig back;
  from_json(to_json(c), back);
  CHECK(back == c);

  Json j = to_json(c);
  j["bogus"] = 1;
  try {
    from_json(j, back);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bogus") != std::string::npos);
  }
  Json nested = to_json(c);
  nested["mp_stop"]["nope"] = true;
  CHECK_THROWS_AS(from_json(nested, back), ConfigError);
  Json wrong_type = to_json(c);
  wrong_type["steps"] = "many";
  CHECK_THROWS_AS(from_json(wrong_type, back), ConfigError);
}

TEST_CASE("tree spec json round trip") {
  TreeSpec t = default_tree();
  t.target_correlation = 0.3;
  t.inject_leaf_group = false;
  TreeSpec back;
  from_json(to_json(t), back);
  CHECK(back == t);
  for (NodeKind k : {NodeKind::kRoot, NodeKind::kInternalParent, NodeKind::kLeafParent, NodeKind::kChild})
    CHECK(node_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(node_kind_from_string("leaf"), ConfigError);
}
