#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "grad_cases.hpp"
#include "mpsae/errors.hpp"
#include "mpsae/io.hpp"
#include "mpsae/linalg.hpp"
#include "mpsae/training.hpp"
#include "oracles.hpp"

using namespace mpsae;

namespace {

const Variant kAllVariants[] = {Variant::kMp, Variant::kRelu, Variant::kTopK, Variant::kBatchTopK,
                                Variant::kMatryoshka};

TrainConfig small_config(Variant v) {
  TrainConfig c;
  c.variant = v;
  c.latents = 20;
  c.steps = 60;
  c.batch_size = 50;
  c.l1_warmup_steps = 10;
  c.batch_topk_warm_steps = 10;
  c.topk_k = 2;
  c.mp_stop.max_steps = 3;
  c.mp_stop.residual_threshold = 0.05;
  if (v == Variant::kMatryoshka) c.matryoshka_prefixes = {5, 20};
  c.lr_schedule.kind = LrSchedule::Kind::kCosine;
  c.lr_schedule.warmup = 5;
  c.lr_schedule.floor = 1e-5;
  c.revive_eps = 1e-5;
  return c;
}

SyntheticSource synthetic_source(std::uint64_t seed) {
  RngStream rng(seed);
  const TreeSpec t = default_tree();
  return SyntheticSource(t, build_gt_dictionary(t, rng).dictionary, seed);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mpsae_test_training_" + name);
}

}  // namespace

TEST_CASE("mse and matryoshka losses") {
  CHECK(loss_mse(std::vector<double>{1, 2}, std::vector<double>{1, 2}) == 0.0);
  CHECK(loss_mse(std::vector<double>{0, 0}, std::vector<double>{3, 4}) == 25.0);
  CHECK_THROWS_AS(loss_mse(std::vector<double>{1}, std::vector<double>{1, 2}), ShapeError);

  RngStream rng(1);
  EncoderModel m;
  m.variant = Variant::kMatryoshka;
  m.dictionary = oracle::unit_dictionary(rng, 5, 8);
  m.encoder_rows = oracle::gaussian(rng, 8, 5);
  m.encoder_bias.assign(8, 0.0);
  m.prefixes = {8};
  m.validate();
  const Vector x = oracle::gaussian_vec(rng, 5);
  const SparseCode z = SparseCode::from_dense(oracle::gaussian_vec(rng, 8));
  CHECK(loss_matryoshka(m, x, z) == doctest::Approx(loss_mse(x, decode(m, z))).epsilon(1e-14));
  CHECK(loss_matryoshka(m, x, SparseCode::from_dense(Vector(8, 0.0))) == doctest::Approx(oracle::loop_dot(x, x)));

  m.prefixes = {3, 8};
  const Matrix dense = m.dictionary.as_matrix();
  double expected = 0.0;
  for (std::size_t len : {3u, 8u}) {
    for (std::size_t i = 0; i < 5; ++i) {
      double xh = 0.0;
      for (std::size_t j = 0; j < len; ++j) xh += dense(i, j) * z.values[j];
      expected += (x[i] - xh) * (x[i] - xh);
    }
  }
  CHECK(loss_matryoshka(m, x, z) == doctest::Approx(expected).epsilon(1e-13));
  m.prefixes.clear();
  CHECK_THROWS_AS(loss_matryoshka(m, x, z), DomainError);
}

TEST_CASE("adaptive l1 controller") {
  CHECK(adaptive_l1_controller(1.36, 1.36, 0.5) == 0.5);
  CHECK(adaptive_l1_controller(1.365, 1.36, 0.5) == 0.5);
  CHECK(adaptive_l1_controller(2.0, 1.36, 0.5) == 0.5 * 1.003);
  CHECK(adaptive_l1_controller(1.0, 1.36, 0.5) == 0.5 * 0.997);
  double w = 1e-3;
  for (int i = 0; i < 1000; ++i) {
    const double next = adaptive_l1_controller(2.72, 1.36, w);
    REQUIRE(next > w);
    w = next;
  }
  CHECK(w == doctest::Approx(1e-3 * std::pow(1.003, 1000)).epsilon(1e-12));
  CHECK(adaptive_l1_controller(0.0, 1.36, 1e-8) == 1e-8);
  CHECK_THROWS_AS(adaptive_l1_controller(1.0, 1.0, -1.0), DomainError);
}

TEST_CASE("relu decoder gradient matches the one-layer chain rule") {
  RngStream rng(2);
  oracle::GradCase c = oracle::grad_case_away_from_ties(Variant::kRelu, rng);
  c.loss.l1_weight = 0.0;
  c.batch = Matrix(1, 6, oracle::gaussian_vec(rng, 6));
  const BatchResult res = backward(c.model, c.batch, c.loss);
  const SparseCode z = encode_relu(c.model, c.batch.row(0));
  const Vector xh = decode(c.model, z);
  for (std::size_t j = 0; j < 10; ++j)
    for (std::size_t i = 0; i < 6; ++i)
      CHECK(std::abs(res.grad.atoms(j, i) - 2.0 * (xh[i] - c.batch(0, i)) * z.values[j]) < 1e-12);
}

TEST_CASE("gradients agree with finite differences for every variant") {
  RngStream rng(3);
  for (Variant v : kAllVariants) {
    CAPTURE(to_string(v));
    for (int trial = 0; trial < 20; ++trial) {
      const oracle::GradCase c = oracle::grad_case_away_from_ties(v, rng);
      REQUIRE(oracle::gradient_check(c) < 1e-4);
    }
  }
  SUBCASE("mp intermediate-step loss") {
    for (int trial = 0; trial < 10; ++trial) {
      oracle::GradCase c = oracle::grad_case_away_from_ties(Variant::kMp, rng);
      c.loss.mp_intermediate = true;
      REQUIRE(oracle::gradient_check(c) < 1e-4);
    }
  }
}

TEST_CASE("exactly reconstructed inputs give zero gradients") {
  RngStream rng(4);
  const Vector bp = oracle::gaussian_vec(rng, 6);
  EncoderModel m;
  m.variant = Variant::kMp;
  m.tied = true;
  m.dictionary = Dictionary::from_atom_rows(orthonormal_basis(rng, 6, 6).transpose(), bp, NormMode::kExactUnit);
  m.encoder_bias.assign(6, 0.0);
  m.stop.max_steps = 3;
  m.validate();
  Matrix batch(4, 6);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t i = 0; i < 6; ++i)
      batch(r, i) = bp[i] + 1.5 * m.dictionary.atom(r)[i] + 0.7 * m.dictionary.atom(5 - r)[i];
  const BatchResult res = backward(m, batch, {});
  CHECK(res.loss < 1e-20);
  for (double g : oracle::flatten(res.grad)) CHECK(std::abs(g) < 1e-10);
}

TEST_CASE("global norm clipping") {
  RngStream rng(5);
  const oracle::GradCase c = oracle::random_grad_case(Variant::kTopK, rng);
  Gradients g = Gradients::zeros_like(c.model);
  for (auto& v : g.atoms.data()) v = rng.normal();
  for (auto& v : g.encoder_bias) v = rng.normal();
  g.scale(10.0 / g.norm());
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(10.0).epsilon(1e-14));
  CHECK(std::abs(g.norm() - 1.0) < 1e-12);
  const Gradients before = g;
  clip_global_norm(g, 5.0);
  CHECK(g.atoms == before.atoms);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c = small_config(Variant::kMp);
  c.learning_rate = 1e-2;
  CHECK(learning_rate_at(c, 4) == doctest::Approx(1e-2).epsilon(1e-14));
  CHECK(learning_rate_at(c, 0) < learning_rate_at(c, 1));
  CHECK(learning_rate_at(c, 59) == doctest::Approx(1e-5).epsilon(1e-12));
  for (std::size_t s = 5; s + 1 < 60; ++s) CHECK(learning_rate_at(c, s + 1) <= learning_rate_at(c, s));
  c.lr_schedule.kind = LrSchedule::Kind::kConstant;
  CHECK(learning_rate_at(c, 30) == 1e-2);
}

TEST_CASE("a zero-gradient step leaves the parameters unchanged") {
  TrainConfig c = small_config(Variant::kMp);
  TrainState st = init_state(c, 6);
  st.model.dictionary = Dictionary::from_atom_rows(Matrix::identity(6), Vector(6, 0.0), NormMode::kExactUnit);
  st.model.encoder_bias.assign(6, 0.0);
  st.usage.assign(6, 0);
  st.adam.m = Gradients::zeros_like(st.model);
  st.adam.v = Gradients::zeros_like(st.model);
  Matrix batch(3, 6);
  batch(0, 1) = 2.0;
  batch(1, 4) = 0.5;
  batch(2, 0) = 1.0;
  const EncoderModel before = st.model;
  train_step(st, batch, c);
  CHECK(st.model == before);
  CHECK(st.step == 1);
  CHECK(st.adam.step == 1);
}

TEST_CASE("norm projection and batch-topk warm schedule hold after every step") {
  const SyntheticSource src = synthetic_source(6);
  for (Variant v : kAllVariants) {
    CAPTURE(to_string(v));
    const TrainConfig c = small_config(v);
    TrainState st = init_state(c, 20);
    for (std::size_t s = 0; s < 30; ++s) {
      train_step(st, src.batch(s, c.batch_size), c);
      for (std::size_t j = 0; j < c.latents; ++j) {
        const double n = std::sqrt(oracle::loop_dot(st.model.dictionary.atom(j), st.model.dictionary.atom(j)));
        if (v == Variant::kMp)
          REQUIRE(std::abs(n - 1.0) < 1e-9);
        else
          REQUIRE(n <= 1.0 + 1e-9);
      }
      if (v == Variant::kBatchTopK) REQUIRE(st.model.k == (s < 10 ? 3.0 : c.sparsity_target));
    }
  }
}

TEST_CASE("revival raises the bias of latents that never fired") {
  TrainConfig c = small_config(Variant::kTopK);
  c.learning_rate = 1e-12;
  c.lr_schedule.kind = LrSchedule::Kind::kConstant;
  c.revive_eps = 0.25;
  TrainState st = init_state(c, 20);
  const SyntheticSource src = synthetic_source(7);
  const Matrix batch = src.batch(0, c.batch_size);
  const BatchResult res = backward(st.model, batch, {});
  const Vector bias = st.model.encoder_bias;
  train_step(st, batch, c);
  std::size_t dead = 0;
  for (std::size_t j = 0; j < c.latents; ++j) {
    if (res.active[j]) {
      CHECK(std::abs(st.model.encoder_bias[j] - bias[j]) < 1e-9);
    } else {
      ++dead;
      CHECK(std::abs(st.model.encoder_bias[j] - bias[j] - 0.25) < 1e-9);
    }
  }
  CHECK(dead > 0);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  const TrainConfig c = small_config(Variant::kRelu);
  TrainState st = init_state(c, 20);
  Matrix batch(2, 20, 1.0);
  batch(1, 3) = std::numeric_limits<double>::infinity();
  try {
    train_step(st, batch, c);
    FAIL("expected NumericAbort");
  } catch (const NumericAbort& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("training is deterministic and independent of thread count") {
  const SyntheticSource src = synthetic_source(8);
  for (Variant v : kAllVariants) {
    CAPTURE(to_string(v));
    TrainConfig c = small_config(v);
    TrainState a = init_state(c, 20), b = init_state(c, 20);
    train(a, src, c);
    train(b, src, c);
    CHECK(a == b);
    c.threads = 3;
    c.batch_size = 700;
    c.steps = 3;
    TrainConfig single = c;
    single.threads = 1;
    TrainState p = init_state(c, 20), q = init_state(single, 20);
    train(p, src, c);
    train(q, src, single);
    CHECK(p.model == q.model);
    CHECK(p.history == q.history);
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  const SyntheticSource src = synthetic_source(9);
  const TrainConfig c = small_config(Variant::kMatryoshka);
  TrainState st = init_state(c, 20);
  train(st, src, c, 20);
  const Checkpoint ck{c, st};
  const auto bytes = serialize_checkpoint(ck);
  CHECK(std::string(bytes.begin(), bytes.begin() + 9) == "MPSAECKPT");
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(back == ck);
  CHECK(serialize_checkpoint(back) == bytes);

  const auto path = temp_path("ckpt.bin");
  save_checkpoint(ck, path);
  save_checkpoint(load_checkpoint(path), path.string() + ".2");
  CHECK(read_file(path) == read_file(path.string() + ".2"));

  auto flipped = bytes;
  flipped[flipped.size() - 20] ^= 0x40;
  CHECK_THROWS_AS(deserialize_checkpoint(flipped), ChecksumError);
  auto bad_crc = bytes;
  bad_crc.back() ^= 0x01;
  CHECK_THROWS_AS(deserialize_checkpoint(bad_crc), ChecksumError);
  const std::vector<unsigned char> truncated(bytes.begin(), bytes.end() - 100);
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), FormatError);
  auto version = bytes;
  version[9] = 99;
  CHECK_THROWS_AS(deserialize_checkpoint(version), VersionError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(magic), FormatError);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".2");
}

TEST_CASE("resumed training matches uninterrupted training bit for bit") {
  const SyntheticSource src = synthetic_source(10);
  for (Variant v : kAllVariants) {
    CAPTURE(to_string(v));
    const TrainConfig c = small_config(v);
    TrainState straight = init_state(c, 20);
    train(straight, src, c, 41);

    TrainState first = init_state(c, 20);
    train(first, src, c, 40);
    const auto path = temp_path("resume.bin");
    save_checkpoint({c, first}, path);
    Checkpoint loaded = load_checkpoint(path);
    train(loaded.state, src, loaded.config, 41);
    CHECK(loaded.state == straight);
    std::filesystem::remove(path);
  }
}

TEST_CASE("train config validation") {
  TrainConfig c = small_config(Variant::kTopK);
  CHECK_NOTHROW(c.validate());
  c.topk_k = 2.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(Variant::kMatryoshka);
  c.matryoshka_prefixes = {10, 5, 20};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(Variant::kMp);
  c.beta2 = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(Variant::kMp);
  c.lr_schedule.floor = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("smoothed training loss does not increase after warmup") {
  const SyntheticSource src = synthetic_source(11);
  for (Variant v : {Variant::kMp, Variant::kTopK, Variant::kBatchTopK}) {
    CAPTURE(to_string(v));
    TrainConfig c;
    c.variant = v;
    c.steps = 4000;
    c.topk_k = 2;
    c.mp_stop.max_steps = 3;
    c.mp_stop.residual_threshold = 0.05;
    c.lr_schedule.kind = LrSchedule::Kind::kCosine;
    c.lr_schedule.floor = 1e-5;
    TrainState st = init_state(c, 20);
    train(st, src, c);
    const std::size_t start = v == Variant::kBatchTopK ? c.batch_topk_warm_steps : 0;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t w = start; w + 500 <= c.steps; w += 500) {
      double s = 0.0;
      for (std::size_t i = w; i < w + 500; ++i) s += st.history[i].loss;
      s /= 500.0;
      CHECK(s <= prev);
      prev = s;
    }
  }
}
