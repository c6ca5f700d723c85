#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mpsae/cli.hpp"
#include "mpsae/errors.hpp"
#include "mpsae/io.hpp"
#include "oracles.hpp"

using namespace mpsae;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mpsae_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Json read_json(const fs::path& p) { return Json::parse(slurp(p)); }

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

RunConfig quick_config(const fs::path& out) {
  RunConfig c;
  c.out = out.string();
  c.seed = 3;
  c.gen_samples = 2000;
  c.eval_samples = 300;
  c.train.steps = 200;
  c.train.batch_size = 100;
  c.train.mp_stop.max_steps = 3;
  c.train.mp_stop.residual_threshold = 0.05;
  c.train.lr_schedule.kind = LrSchedule::Kind::kCosine;
  c.train.lr_schedule.floor = 1e-5;
  c.checkpoint_interval = 50;
  c.eval.absorption_samples = 200;
  c.eval.k_values = {1, 2, 3, 5, 8, 12, 20};
  return c;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mpsae");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("yaml to json typing") {
  const Json j = yaml_to_json(
      "a: 1\n"
      "b: -2\n"
      "c: 3.0e-2\n"
      "d: true\n"
      "e: null\n"
      "f: \"7\"\n"
      "g: [1, 2.5, x]\n"
      "h: {k: ~}\n");
  CHECK(j["a"].is_number_unsigned());
  CHECK(j["b"] == -2);
  CHECK(j["c"] == 3.0e-2);
  CHECK(j["d"] == true);
  CHECK(j["e"].is_null());
  CHECK(j["f"] == "7");
  CHECK(j["g"][1] == 2.5);
  CHECK(j["g"][2] == "x");
  CHECK(j["h"]["k"].is_null());
  CHECK_THROWS_AS(yaml_to_json("a: 1\na: 2\n"), ConfigError);
  CHECK_THROWS_AS(yaml_to_json("a: [1, 2\n"), ConfigError);
}

TEST_CASE("merge replaces arrays and recurses into objects") {
  const Json a = Json::parse(R"({"x": {"y": 1, "z": 2}, "l": [1, 2, 3]})");
  const Json b = Json::parse(R"({"x": {"z": 5}, "l": [9]})");
  const Json m = merge_json(a, b);
  CHECK(m["x"]["y"] == 1);
  CHECK(m["x"]["z"] == 5);
  CHECK(m["l"] == Json::parse("[9]"));
}

TEST_CASE("run config round trip and strict keys") {
  RunConfig c = quick_config("somewhere");
  c.tree.target_correlation = 0.3;
  c.child_magnitude = MagnitudeOverride{1.0, 0.05};
  c.expansion_factor = 4.0;
  c.eval.text_energy_scale = 0.2;
  c.sweep.kind = "pareto";
  c.sweep.configs = {Json::parse(R"({"variant": "relu"})")};
  RunConfig back;
  from_json(to_json(c), back);
  CHECK(to_json(back).dump() == to_json(c).dump());
  CHECK(back.train == c.train);
  CHECK(back.tree == c.tree);

  for (const char* bad : {R"({"bogus": 1})", R"({"train": {"stepz": 1}})", R"({"data": {"tree": {"x": 0}}})",
                          R"({"eval": {"babel": 2}})"}) {
    CAPTURE(bad);
    RunConfig r;
    CHECK_THROWS_AS(from_json(Json::parse(bad), r), ConfigError);
  }
  RunConfig r;
  try {
    from_json(Json::parse(R"({"train": {"bogus_key": 1}})"), r);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bogus_key") != std::string::npos);
  }
}

TEST_CASE("shipped presets load verbatim") {
  CliOverrides o;
  o.preset = "synthetic";
  const RunConfig s = resolve_config(o);
  CHECK(s.train.variant == Variant::kMp);
  CHECK(s.train.batch_size == 200);
  CHECK(s.train.steps == 15000);
  CHECK(s.train.learning_rate == 3e-2);
  CHECK(s.train.beta1 == 0.5);
  CHECK(s.train.beta2 == 0.9375);
  CHECK(s.train.grad_clip_norm == 1.0);
  CHECK(s.train.sparsity_target == 1.36);
  CHECK(s.tree == default_tree());

  o.preset = "embedding";
  const RunConfig e = resolve_config(o);
  REQUIRE(e.expansion_factor);
  CHECK(*e.expansion_factor == 25.0);
  CHECK(e.train.batch_size == 8000);
  CHECK(e.train.learning_rate == 5e-4);
  CHECK(e.train.weight_decay == 1e-5);
  CHECK(e.train.revive_eps == 1e-5);
  CHECK(e.source == "embedding");

  o.preset = "no-such-preset";
  CHECK_THROWS_AS(resolve_config(o), ConfigError);
}

TEST_CASE("config precedence: preset, files, environment, flags") {
  const fs::path dir = fresh_dir("precedence");
  write_text(dir / "a.yaml", "seed: 5\nout: from_a\ntrain: {steps: 10}\n");
  write_text(dir / "b.yaml", "train: {steps: 20, batch_size: 7}\n");
  CliOverrides o;
  o.preset = "synthetic";
  o.configs = {(dir / "a.yaml").string(), (dir / "b.yaml").string()};
  RunConfig c = resolve_config(o);
  CHECK(c.seed == 5);
  CHECK(c.train.seed == 5);
  CHECK(c.train.steps == 20);
  CHECK(c.train.batch_size == 7);
  CHECK(c.out == "from_a");
  CHECK(c.train.learning_rate == 3e-2);

  setenv("MPSAE_OUT", "from_env", 1);
  setenv("MPSAE_THREADS", "3", 1);
  c = resolve_config(o);
  CHECK(c.out == "from_env");
  CHECK(c.train.threads == 3);
  o.out = "from_flag";
  o.seed = 9;
  o.threads = 2;
  c = resolve_config(o);
  CHECK(c.out == "from_flag");
  CHECK(c.train.threads == 2);
  CHECK(c.train.seed == 9);
  setenv("MPSAE_THREADS", "zero", 1);
  o.threads.reset();
  CHECK_THROWS_AS(resolve_config(o), ConfigError);
  unsetenv("MPSAE_OUT");
  unsetenv("MPSAE_THREADS");

  write_text(dir / "bad.yaml", "train: {learning_rat: 1}\n");
  o.configs = {(dir / "bad.yaml").string()};
  CHECK_THROWS_AS(resolve_config(o), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("gen is deterministic and records the realized correlation") {
  const fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  RunConfig c = quick_config(a);
  c.tree.target_correlation = 0.3;
  cmd_gen(c);
  c.out = b.string();
  cmd_gen(c);
  for (const char* f : {"data.emb", "codes.emb", "gt_dictionary.emb", "levels.json"})
    CHECK(slurp(a / f) == slurp(b / f));
  const Json m = read_json(a / "manifest.json");
  CHECK(m["seed"] == 3);
  CHECK(m["expected_l0"].get<double>() == doctest::Approx(1.36));
  REQUIRE(m["groups"].size() == 4);
  for (const auto& g : m["groups"]) CHECK(std::abs(g["sibling_cosine"].get<double>() - 0.3) < 1e-3);
  const EmbeddingFile data = read_embedding_file(a / "data.emb");
  CHECK(data.data.rows() == 2000);
  CHECK(data.data.cols() == 20);
  CHECK(!fs::exists(a / ".lock"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("train, resume, eval and sweep on a synthetic run") {
  const fs::path dir = fresh_dir("pipeline");
  RunConfig c = quick_config(dir);
  cmd_train(c);
  const auto straight = read_file(dir / "checkpoint.ckpt");
  const std::string curve = slurp(dir / "curve.csv");
  CHECK(curve.rfind("step,loss,mse,mean_l0,l1_weight\n", 0) == 0);

  SUBCASE("interrupted and resumed run matches") {
    const fs::path r = fresh_dir("pipeline_resume");
    RunConfig rc = c;
    rc.out = r.string();
    TrainOptions until;
    until.until = 120;
    cmd_train(rc, until);
    TrainOptions resume;
    resume.resume = true;
    cmd_train(rc, resume);
    CHECK(read_file(r / "checkpoint.ckpt") == straight);
    CHECK(slurp(r / "curve.csv") == curve);
    RunConfig other = rc;
    other.train.learning_rate = 1.0;
    CHECK_THROWS_AS(cmd_train(other, resume), ConfigError);
    fs::remove_all(r);
  }
  SUBCASE("eval is deterministic and writes the documented files") {
    cmd_eval(c);
    const std::string first = slurp(dir / "metrics.json");
    cmd_eval(c);
    CHECK(slurp(dir / "metrics.json") == first);
    const Json m = Json::parse(first);
    for (const char* k : {"r2", "normalized_mse", "effective_rank", "assignment", "flat_mse", "hierarchical_mse",
                          "absorption", "sweep_k"})
      CHECK_MESSAGE(m.contains(k), k);
    const auto babel = read_csv(dir / "babel.csv");
    REQUIRE(babel.size() == 9);
    CHECK(babel[0] == std::vector<std::string>{"r", "mu1_full", "mu1_coactivated_mean"});
    CHECK(babel[1][0] == "1");
    for (const char* f : {"gram_learned.csv", "gram_gt.csv", "gram_aligned.csv", "sweep_k.csv"})
      CHECK_MESSAGE(fs::exists(dir / f), f);
  }
  SUBCASE("inference-k sweep is monotone for mp and repeatable") {
    c.sweep.k_values = {1, 2, 3, 4, 6, 10, 20, 40};
    cmd_sweep(c);
    const std::string first = slurp(dir / "sweep_inference_k.csv");
    cmd_sweep(c);
    CHECK(slurp(dir / "sweep_inference_k.csv") == first);
    const auto rows = read_csv(dir / "sweep_inference_k.csv");
    REQUIRE(rows.size() == 9);
    CHECK(rows[0][2] == "normalized_mse");
    for (std::size_t i = 2; i < rows.size(); ++i) CHECK(std::stod(rows[i][2]) <= std::stod(rows[i - 1][2]));
  }
  SUBCASE("pareto sweep with a single config gives one row") {
    c.sweep.kind = "pareto";
    c.train.steps = 30;
    cmd_sweep(c);
    const auto rows = read_csv(dir / "pareto.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[1][1] == "mp");
  }
  SUBCASE("report takes medians over runs") {
    cmd_eval(c);
    const fs::path second = fresh_dir("pipeline_second");
    fs::copy_file(dir / "metrics.json", second / "metrics.json");
    const fs::path rep = fresh_dir("pipeline_report");
    cmd_report(rep, {dir, second});
    const Json r = read_json(rep / "report.json");
    CHECK(r["runs"] == 2);
    fs::remove_all(second);
    fs::remove_all(rep);
  }
  fs::remove_all(dir);
}

TEST_CASE("ground truth evaluated against itself") {
  const fs::path dir = fresh_dir("self");
  RunConfig c = quick_config(dir);
  const GroundTruth gt = run_ground_truth(c);
  TrainState st = init_state(c.train, 20);
  st.model.dictionary = gt.dictionary;
  save_checkpoint({c.train, st}, dir / "checkpoint.ckpt");
  cmd_eval(c);
  const Json m = read_json(dir / "metrics.json");
  CHECK(m["flat_mse"].get<double>() < 1e-20);
  CHECK(m["hierarchical_mse"].get<double>() < 1e-20);
  CHECK(m["absorption"]["mean"].get<double>() < 0.05);
  CHECK(m["assignment"]["min_abs_cos"].get<double>() == doctest::Approx(1.0));
  fs::remove_all(dir);
}

TEST_CASE("exit codes and the run lock") {
  const fs::path dir = fresh_dir("exit");
  CHECK(cli({}) == 2);
  CHECK(cli({"frobnicate"}) == 2);
  CHECK(cli({"train", "--threads", "0"}) == 2);
  write_text(dir / "bad.yaml", "train: {nonsense: 1}\n");
  CHECK(cli({"train", "--config", (dir / "bad.yaml").string(), "--out", dir.string()}) == 2);
  CHECK(cli({"eval", "--out", dir.string(), "--checkpoint", (dir / "missing.ckpt").string()}) == 3);

  write_text(dir / "nan.yaml",
             "data: {source: embedding, path: " + (dir / "nan.emb").string() + "}\ntrain: {steps: 2, batch_size: 4}\n");
  Matrix bad(8, 3, 1.0);
  bad(2, 1) = std::numeric_limits<double>::quiet_NaN();
  write_embedding_file(dir / "nan.emb", bad, 8);
  CHECK(cli({"train", "--config", (dir / "nan.yaml").string(), "--out", dir.string()}) == 3);

  write_text(dir / "huge.yaml", "data: {source: embedding, path: " + (dir / "huge.emb").string() +
                                    "}\ntrain: {variant: relu, steps: 2, batch_size: 4, learning_rate: 1.0e+300, "
                                    "grad_clip_norm: 1.0e+300}\n");
  write_embedding_file(dir / "huge.emb", Matrix(8, 3, 1e200), 8);
  CHECK(cli({"train", "--config", (dir / "huge.yaml").string(), "--out", dir.string()}) == 4);
  CHECK(fs::exists(dir / "abort.json"));

  write_text(dir / ".lock", "");
  CHECK(cli({"gen", "--out", dir.string()}) == 1);
  fs::remove(dir / ".lock");
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(ChecksumError("x")) == 3);
  CHECK(exit_code_for(NumericAbort("x")) == 4);
  fs::remove_all(dir);
}

TEST_CASE("embedding source with an expansion factor") {
  const fs::path dir = fresh_dir("embedding");
  RngStream rng(1);
  write_embedding_file(dir / "x.emb", oracle::gaussian(rng, 500, 6), 4);
  write_text(dir / "run.yaml", "expansion_factor: 2.5\ndata: {path: " + (dir / "x.emb").string() +
                                   "}\ntrain: {steps: 20, batch_size: 64, warmup: 0}\n");
  CHECK(cli({"train", "--preset", "embedding", "--config", (dir / "run.yaml").string(), "--out", dir.string()}) == 2);
  write_text(dir / "run.yaml", "expansion_factor: 2.5\ndata: {path: " + (dir / "x.emb").string() +
                                   "}\ntrain: {steps: 20, batch_size: 64, lr_schedule: {warmup: 5}}\n");
  CHECK(cli({"train", "--preset", "embedding", "--config", (dir / "run.yaml").string(), "--out", dir.string()}) == 0);
  const Checkpoint ck = load_checkpoint(dir / "checkpoint.ckpt");
  CHECK(ck.state.model.latents() == 15);
  CHECK(ck.state.model.dim() == 6);
  fs::remove_all(dir);
}
