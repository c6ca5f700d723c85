#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mpsae/generator.hpp"
#include "mpsae/serialize.hpp"
#include "mpsae/training.hpp"

namespace mpsae {

struct MagnitudeOverride {
  double mean = 1.0;
  double sd = 0.25;
};

struct EvalOptions {
  std::vector<std::size_t> k_values;  // empty: 1..min(50, latents)
  std::size_t babel_r_max = 8;
  std::size_t babel_support_r = 1;
  std::size_t absorption_samples = 1000;
  std::optional<double> text_energy_scale;
  bool svg = false;
};

struct SweepOptions {
  std::string kind = "inference-k";  // or "pareto"
  std::vector<std::size_t> k_values;
  std::vector<Json> configs;         // pareto: overrides merged onto `train`
};

struct RunConfig {
  std::string source = "synthetic";  // or "embedding"
  std::string data_path;
  std::string eval_path;
  TreeSpec tree = default_tree();
  std::optional<MagnitudeOverride> parent_magnitude;
  std::optional<MagnitudeOverride> child_magnitude;
  std::size_t gen_samples = 10000;
  std::size_t eval_samples = 1000;
  std::optional<double> expansion_factor;
  std::size_t checkpoint_interval = 1000;
  TrainConfig train;
  EvalOptions eval;
  SweepOptions sweep;
  std::string out = "runs/default";
  std::uint64_t seed = 0;

  // Tree with the magnitude overrides applied.
  TreeSpec effective_tree() const;
};

Json to_json(const RunConfig& c);
void from_json(const Json& j, RunConfig& c);

// YAML (a JSON superset) to JSON; plain scalars become bool/int/float/null
// where they parse as such.
Json yaml_to_json(const std::string& text);
Json load_yaml_file(const std::filesystem::path& path);
// Recursive object merge; `over` wins, arrays are replaced.
Json merge_json(Json base, const Json& over);

std::filesystem::path preset_path(const std::string& name);

struct CliOverrides {
  std::optional<std::string> preset;
  std::vector<std::string> configs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
};

// defaults < preset < config files (in order) < environment < flags.
RunConfig resolve_config(const CliOverrides& o);

// Synthetic ground truth for a run: deterministic in (tree, seed).
GroundTruth run_ground_truth(const RunConfig& c);
// Held-out synthetic evaluation samples.
SampleBatch run_eval_samples(const RunConfig& c, const GroundTruth& gt);

void cmd_gen(const RunConfig& c);
struct TrainOptions {
  bool resume = false;
  std::optional<std::size_t> until;
};
void cmd_train(const RunConfig& c, const TrainOptions& opts = {});
void cmd_eval(const RunConfig& c, const std::optional<std::filesystem::path>& checkpoint = std::nullopt);
void cmd_sweep(const RunConfig& c, const std::optional<std::filesystem::path>& checkpoint = std::nullopt);
void cmd_report(const std::filesystem::path& out, const std::vector<std::filesystem::path>& runs);

// Exit status for an exception escaping a command.
int exit_code_for(const std::exception& e);

int run_cli(int argc, char** argv);

}  // namespace mpsae
