#include "mpsae/cli.hpp"

#include <yaml-cpp/yaml.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <regex>
#include <sstream>

#include "mpsae/analysis.hpp"
#include "mpsae/errors.hpp"
#include "mpsae/io.hpp"

#ifndef MPSAE_PRESET_DIR
#define MPSAE_PRESET_DIR "presets"
#endif

namespace mpsae {

namespace fs = std::filesystem;

namespace {

// Stream ids under the run seed.
constexpr std::uint64_t kGtStream = 0x67;
constexpr std::uint64_t kGenStream = 0x9e;
constexpr std::uint64_t kEvalStream = 0xe7;
constexpr std::uint64_t kAbsorbStream = 0xab;

const char* kCheckpointName = "checkpoint.ckpt";

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) {
    for (std::size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
    os_ << "\n";
  }
  template <typename... T>
  void row(const T&... cells) {
    std::size_t i = 0;
    ((os_ << (i++ ? "," : "") << cell(cells)), ...);
    os_ << "\n";
  }
  void write(const fs::path& p) const { write_text_atomic(p, os_.str()); }

 private:
  static std::string cell(double v) { return fmt(v); }
  static std::string cell(std::size_t v) { return std::to_string(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(bool v) { return v ? "1" : "0"; }
  static std::string cell(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  }
  std::ostringstream os_;
};

void write_matrix_csv(const fs::path& p, const Matrix& m) {
  std::ostringstream os;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) os << (c ? "," : "") << fmt(m(r, c));
    os << "\n";
  }
  write_text_atomic(p, os.str());
}

void write_json(const fs::path& p, const Json& j) { write_text_atomic(p, j.dump(2) + "\n"); }

struct Series {
  std::string name;
  std::vector<double> x, y;
};

// Polyline chart with axes, tick labels and a legend.
void write_svg_plot(const fs::path& p, const std::string& title, const std::string& xlabel, const std::string& ylabel,
                    const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double W = 640, H = 420, L = 70, R = 20, T = 40, B = 50;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    os << "<text x=\"" << sx(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">" << xv
       << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << yv
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"13\">"
     << xlabel << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* col = colors[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) os << sx(s.x[i]) << "," << sy(s.y[i]) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << W - R - 120 << "\" y=\"" << T + 16 * (k + 1) << "\" font-size=\"12\" fill=\"" << col << "\">"
       << s.name << "</text>\n";
  }
  os << "</svg>\n";
  write_text_atomic(p, os.str());
}

// Exclusive marker file; a second command on the same run directory fails.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw Error("run directory is locked by another process: " + path_.string());
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

Json scalar_to_json(const YAML::Node& n) {
  const std::string& s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  static const std::regex int_re("[-+]?[0-9]+");
  static const std::regex float_re("[-+]?([0-9]+\\.?[0-9]*|\\.[0-9]+)([eE][-+]?[0-9]+)?");
  if (s == "null" || s == "~" || s.empty()) return nullptr;
  if (s == "true" || s == "True") return true;
  if (s == "false" || s == "False") return false;
  if (std::regex_match(s, int_re)) {
    if (s[0] == '-') return std::stoll(s);
    return std::stoull(s);
  }
  if (std::regex_match(s, float_re)) return std::stod(s);
  if (s == ".nan" || s == ".NaN") return std::numeric_limits<double>::quiet_NaN();
  return s;
}

Json node_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined: return nullptr;
    case YAML::NodeType::Scalar: return scalar_to_json(n);
    case YAML::NodeType::Sequence: {
      Json a = Json::array();
      for (const auto& e : n) a.push_back(node_to_json(e));
      return a;
    }
    case YAML::NodeType::Map: {
      Json o = Json::object();
      for (const auto& kv : n) {
        const std::string key = kv.first.as<std::string>();
        if (o.contains(key)) throw ConfigError("duplicate key '" + key + "'");
        o[key] = node_to_json(kv.second);
      }
      return o;
    }
  }
  return nullptr;
}

Json to_json(const MagnitudeOverride& m) { return Json{{"mean", m.mean}, {"sd", m.sd}}; }

MagnitudeOverride magnitude_from_json(const Json& j, const std::string& where) {
  MagnitudeOverride m;
  StrictObject o(j, where);
  o.get("mean", m.mean);
  o.get("sd", m.sd);
  o.finish();
  return m;
}

std::vector<std::size_t> default_k_grid(std::size_t latents) {
  std::vector<std::size_t> ks;
  for (std::size_t k = 1; k <= std::min<std::size_t>(50, latents); ++k) ks.push_back(k);
  return ks;
}

struct LoadedData {
  Matrix xs;
  std::optional<std::vector<Modality>> labels;
  std::optional<GroundTruth> gt;
  std::optional<SampleBatch> samples;
};

EmbeddingFile read_embedding_or_data_error(const std::string& path) {
  if (path.empty()) throw ConfigError("data.path is required for embedding sources");
  if (!fs::exists(path)) throw FormatError("embedding file not found: " + path);
  return read_embedding_file(path);
}

LoadedData load_eval_data(const RunConfig& c) {
  LoadedData d;
  if (c.source == "synthetic") {
    d.gt = run_ground_truth(c);
    d.samples = run_eval_samples(c, *d.gt);
    d.xs = d.samples->inputs;
  } else {
    EmbeddingFile ef = read_embedding_or_data_error(c.eval_path.empty() ? c.data_path : c.eval_path);
    d.xs = std::move(ef.data);
    d.labels = std::move(ef.labels);
  }
  return d;
}

struct TrainingData {
  std::unique_ptr<BatchSource> source;
  std::size_t dim = 0;
};

TrainingData training_data(const RunConfig& c) {
  TrainingData t;
  if (c.source == "synthetic") {
    GroundTruth gt = run_ground_truth(c);
    t.source = std::make_unique<SyntheticSource>(c.effective_tree(), gt.dictionary, c.seed);
    t.dim = c.tree.dim;
  } else {
    EmbeddingFile ef = read_embedding_or_data_error(c.data_path);
    if (!ef.data.all_finite()) throw FormatError("embedding file contains non-finite values");
    t.dim = ef.data.cols();
    t.source = std::make_unique<MatrixSource>(std::make_shared<const Matrix>(std::move(ef.data)), c.seed);
  }
  return t;
}

TrainConfig effective_train_config(const RunConfig& c, std::size_t dim) {
  TrainConfig cfg = c.train;
  if (c.expansion_factor) {
    cfg.latents = static_cast<std::size_t>(std::llround(*c.expansion_factor * static_cast<double>(dim)));
    if (cfg.variant == Variant::kMatryoshka && !cfg.matryoshka_prefixes.empty())
      cfg.matryoshka_prefixes.back() = cfg.latents;
  }
  cfg.validate();
  return cfg;
}

fs::path checkpoint_for(const RunConfig& c, const std::optional<fs::path>& explicit_path) {
  const fs::path p = explicit_path ? *explicit_path : fs::path(c.out) / kCheckpointName;
  if (!fs::exists(p)) throw FormatError("checkpoint not found: " + p.string());
  return p;
}

Json sweep_to_json(const SweepResult& r) {
  Json a = Json::array();
  for (const auto& p : r.points)
    a.push_back(Json{{"k", p.k},
                     {"r2", p.r2},
                     {"normalized_mse", p.normalized_mse},
                     {"effective_rank", p.effective_rank},
                     {"babel_coactivated", p.babel_coactivated}});
  return a;
}

void write_sweep_csv(const fs::path& p, const SweepResult& r) {
  Csv csv({"k", "r2", "normalized_mse", "effective_rank", "babel_coactivated"});
  for (const auto& pt : r.points) csv.row(pt.k, pt.r2, pt.normalized_mse, pt.effective_rank, pt.babel_coactivated);
  csv.write(p);
}

// Unit-normalized copy of the nonzero atoms (babel needs exact-unit atoms).
Dictionary unit_atoms(const Dictionary& d, std::vector<std::size_t>* kept) {
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < d.size(); ++j)
    if (norm2(d.atom(j)) > 0.0) idx.push_back(j);
  Matrix rows(idx.size(), d.dim());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto a = d.atom(idx[i]);
    const double n = norm2(a);
    for (std::size_t k = 0; k < a.size(); ++k) rows(i, k) = a[k] / n;
  }
  if (kept) *kept = idx;
  return Dictionary::from_atom_rows(std::move(rows), d.pre_bias(), NormMode::kExactUnit);
}

void flatten_numbers(const Json& j, const std::string& prefix, std::map<std::string, double>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten_numbers(v, prefix.empty() ? k : prefix + "." + k, out);
  } else if (j.is_number()) {
    out[prefix] = j.get<double>();
  }
}

}  // namespace

TreeSpec RunConfig::effective_tree() const {
  TreeSpec t = tree;
  for (std::size_t i = 0; i < t.nodes(); ++i) {
    const bool is_parent = t.kind[i] == NodeKind::kInternalParent || t.kind[i] == NodeKind::kLeafParent;
    const auto& o = is_parent ? parent_magnitude : (t.kind[i] == NodeKind::kChild ? child_magnitude : std::nullopt);
    if (o) {
      t.magnitude_mean[i] = o->mean;
      t.magnitude_sd[i] = o->sd;
    }
  }
  return t;
}

Json to_json(const RunConfig& c) {
  Json data;
  data["source"] = c.source;
  data["path"] = c.data_path;
  data["eval_path"] = c.eval_path;
  data["samples"] = c.gen_samples;
  data["eval_samples"] = c.eval_samples;
  data["tree"] = to_json(c.tree);
  data["parent_magnitude"] = c.parent_magnitude ? to_json(*c.parent_magnitude) : Json(nullptr);
  data["child_magnitude"] = c.child_magnitude ? to_json(*c.child_magnitude) : Json(nullptr);
  Json eval;
  eval["k_values"] = c.eval.k_values;
  eval["babel_r_max"] = c.eval.babel_r_max;
  eval["babel_support_r"] = c.eval.babel_support_r;
  eval["absorption_samples"] = c.eval.absorption_samples;
  eval["text_energy_scale"] = c.eval.text_energy_scale ? Json(*c.eval.text_energy_scale) : Json(nullptr);
  eval["svg"] = c.eval.svg;
  Json sweep;
  sweep["kind"] = c.sweep.kind;
  sweep["k_values"] = c.sweep.k_values;
  sweep["configs"] = c.sweep.configs;
  Json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["expansion_factor"] = c.expansion_factor ? Json(*c.expansion_factor) : Json(nullptr);
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["data"] = std::move(data);
  j["train"] = to_json(c.train);
  j["eval"] = std::move(eval);
  j["sweep"] = std::move(sweep);
  return j;
}

void from_json(const Json& j, RunConfig& c) {
  StrictObject o(j, "config");
  o.get("seed", c.seed);
  o.get("out", c.out);
  if (o.has("expansion_factor")) {
    const Json& v = o.at("expansion_factor");
    if (v.is_null())
      c.expansion_factor.reset();
    else if (v.is_number() && v.get<double>() > 0.0)
      c.expansion_factor = v.get<double>();
    else
      throw ConfigError("expansion_factor must be a positive number or null");
  }
  o.get("checkpoint_interval", c.checkpoint_interval);
  if (o.has("data")) {
    StrictObject d(o.at("data"), "data");
    d.get("source", c.source);
    if (c.source != "synthetic" && c.source != "embedding")
      throw ConfigError("data.source must be 'synthetic' or 'embedding'");
    d.get("path", c.data_path);
    d.get("eval_path", c.eval_path);
    d.get("samples", c.gen_samples);
    d.get("eval_samples", c.eval_samples);
    if (d.has("tree")) from_json(d.at("tree"), c.tree, "data.tree");
    for (auto [key, slot] : {std::pair{"parent_magnitude", &c.parent_magnitude},
                             std::pair{"child_magnitude", &c.child_magnitude}}) {
      if (!d.has(key)) continue;
      const Json& v = d.at(key);
      if (v.is_null())
        slot->reset();
      else
        *slot = magnitude_from_json(v, std::string("data.") + key);
    }
    d.finish();
  }
  if (o.has("train")) from_json(o.at("train"), c.train, "train");
  if (o.has("eval")) {
    StrictObject e(o.at("eval"), "eval");
    e.get("k_values", c.eval.k_values);
    e.get("babel_r_max", c.eval.babel_r_max);
    e.get("babel_support_r", c.eval.babel_support_r);
    e.get("absorption_samples", c.eval.absorption_samples);
    if (e.has("text_energy_scale")) {
      const Json& v = e.at("text_energy_scale");
      if (v.is_null())
        c.eval.text_energy_scale.reset();
      else if (v.is_number())
        c.eval.text_energy_scale = v.get<double>();
      else
        throw ConfigError("eval.text_energy_scale must be a number or null");
    }
    e.get("svg", c.eval.svg);
    e.finish();
  }
  if (o.has("sweep")) {
    StrictObject s(o.at("sweep"), "sweep");
    s.get("kind", c.sweep.kind);
    if (c.sweep.kind != "inference-k" && c.sweep.kind != "pareto")
      throw ConfigError("sweep.kind must be 'inference-k' or 'pareto'");
    s.get("k_values", c.sweep.k_values);
    if (s.has("configs")) {
      const Json& a = s.at("configs");
      if (!a.is_array()) throw ConfigError("sweep.configs must be a list");
      c.sweep.configs.assign(a.begin(), a.end());
    }
    s.finish();
  }
  o.finish();
  c.tree.validate();
}

Json yaml_to_json(const std::string& text) {
  try {
    return node_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

Json load_yaml_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Json j = yaml_to_json(ss.str());
  if (j.is_null()) j = Json::object();
  if (!j.is_object()) throw ConfigError(path.string() + ": top level must be a mapping");
  return j;
}

Json merge_json(Json base, const Json& over) {
  if (!base.is_object() || !over.is_object()) return over;
  for (const auto& [k, v] : over.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object())
      base[k] = merge_json(base[k], v);
    else
      base[k] = v;
  }
  return base;
}

fs::path preset_path(const std::string& name) {
  fs::path p = name;
  if (name.find('/') == std::string::npos && p.extension() != ".yaml") p = fs::path(MPSAE_PRESET_DIR) / (name + ".yaml");
  if (!fs::exists(p)) throw ConfigError("unknown preset '" + name + "'");
  return p;
}

RunConfig resolve_config(const CliOverrides& ov) {
  Json merged = Json::object();
  if (ov.preset) merged = merge_json(merged, load_yaml_file(preset_path(*ov.preset)));
  for (const auto& path : ov.configs) merged = merge_json(merged, load_yaml_file(path));
  RunConfig c;
  from_json(merged, c);
  if (const char* env = std::getenv("MPSAE_OUT"); env && *env) c.out = env;
  if (const char* env = std::getenv("MPSAE_THREADS"); env && *env) {
    try {
      c.train.threads = std::stoul(env);
    } catch (const std::exception&) {
      throw ConfigError("MPSAE_THREADS must be a positive integer");
    }
  }
  if (ov.seed) c.seed = *ov.seed;
  if (ov.out) c.out = *ov.out;
  if (ov.threads) c.train.threads = *ov.threads;
  if (c.train.threads == 0) throw ConfigError("threads must be positive");
  c.train.seed = c.seed;
  return c;
}

GroundTruth run_ground_truth(const RunConfig& c) {
  RngStream rng = RngStream(c.seed).split(kGtStream);
  return build_gt_dictionary(c.effective_tree(), rng);
}

SampleBatch run_eval_samples(const RunConfig& c, const GroundTruth& gt) {
  RngStream rng = RngStream(c.seed).split(kEvalStream);
  return sample_batch(c.effective_tree(), gt.dictionary, c.eval_samples, rng);
}

void cmd_gen(const RunConfig& c) {
  if (c.source != "synthetic") throw ConfigError("gen requires data.source = synthetic");
  const fs::path out = c.out;
  RunLock lock(out);
  const TreeSpec tree = c.effective_tree();
  const GroundTruth gt = run_ground_truth(c);
  RngStream rng = RngStream(c.seed).split(kGenStream);
  const SampleBatch data = sample_batch(tree, gt.dictionary, c.gen_samples, rng);
  write_embedding_file(out / "data.emb", data.inputs, 8);
  write_embedding_file(out / "codes.emb", data.codes, 8);
  write_embedding_file(out / "gt_dictionary.emb", gt.dictionary.atom_rows(), 8);

  Json levels = Json::array();
  for (std::size_t i = 0; i < gt.levels.size(); ++i)
    levels.push_back(Json{{"atom", i},
                          {"node", i + 1},
                          {"level", gt.levels.level[i]},
                          {"parent", gt.levels.parent[i] ? Json(*gt.levels.parent[i]) : Json(nullptr)}});
  write_json(out / "levels.json", levels);

  double l0 = 0.0;
  for (double v : data.codes.data()) l0 += v != 0.0 ? 1.0 : 0.0;
  Json groups = Json::array();
  for (std::size_t g = 0; g < gt.groups.size(); ++g)
    groups.push_back(Json{{"nodes", gt.groups[g]}, {"eps", gt.group_eps[g]}, {"sibling_cosine", gt.group_cosine[g]}});
  Json manifest;
  manifest["seed"] = c.seed;
  manifest["rng"] = RngStream::kAlgorithm;
  manifest["rows"] = c.gen_samples;
  manifest["dim"] = tree.dim;
  manifest["concepts"] = tree.concepts();
  manifest["expected_l0"] = tree.expected_l0();
  manifest["empirical_l0"] = c.gen_samples ? l0 / static_cast<double>(c.gen_samples) : 0.0;
  manifest["target_correlation"] = tree.target_correlation ? Json(*tree.target_correlation) : Json(nullptr);
  manifest["groups"] = std::move(groups);
  manifest["config"] = to_json(c);
  write_json(out / "manifest.json", manifest);
}

void cmd_train(const RunConfig& c, const TrainOptions& opts) {
  const fs::path out = c.out;
  RunLock lock(out);
  TrainingData data = training_data(c);
  const TrainConfig cfg = effective_train_config(c, data.dim);
  const fs::path ckpt_path = out / kCheckpointName;

  TrainState state;
  if (opts.resume) {
    if (!fs::exists(ckpt_path)) throw FormatError("resume: no checkpoint at " + ckpt_path.string());
    Checkpoint ck = load_checkpoint(ckpt_path);
    if (!(ck.config == cfg)) throw ConfigError("resume: configuration differs from the checkpoint's");
    state = std::move(ck.state);
  } else {
    state = init_state(cfg, data.dim);
  }
  const std::size_t until = std::min(opts.until.value_or(cfg.steps), cfg.steps);

  auto write_curve = [&](const TrainState& s) {
    Csv csv({"step", "loss", "mse", "mean_l0", "l1_weight"});
    for (std::size_t i = 0; i < s.history.size(); ++i) {
      const auto& h = s.history[i];
      csv.row(i + 1, h.loss, h.mse, h.mean_l0, h.l1_weight);
    }
    csv.write(out / "curve.csv");
  };

  try {
    train(state, *data.source, cfg, until, [&](const TrainState& s) {
      if (c.checkpoint_interval > 0 && s.step % c.checkpoint_interval == 0 && s.step < until)
        save_checkpoint({cfg, s}, ckpt_path);
    });
  } catch (const NumericAbort& e) {
    // The failed step did not touch the state, so it is the last good one.
    save_checkpoint({cfg, state}, ckpt_path);
    write_curve(state);
    write_json(out / "abort.json", Json{{"step", state.step}, {"reason", e.what()}});
    throw;
  }
  save_checkpoint({cfg, state}, ckpt_path);
  write_curve(state);
  Json manifest;
  manifest["seed"] = c.seed;
  manifest["variant"] = to_string(cfg.variant);
  manifest["latents"] = cfg.latents;
  manifest["dim"] = data.dim;
  manifest["steps_completed"] = state.step;
  manifest["final"] = state.history.empty()
                          ? Json(nullptr)
                          : Json{{"loss", state.history.back().loss},
                                 {"mse", state.history.back().mse},
                                 {"mean_l0", state.history.back().mean_l0},
                                 {"l1_weight", state.history.back().l1_weight}};
  manifest["config"] = to_json(c);
  write_json(out / "train_manifest.json", manifest);
}

void cmd_eval(const RunConfig& c, const std::optional<fs::path>& checkpoint) {
  const fs::path out = c.out;
  const fs::path ckpt_path = checkpoint_for(c, checkpoint);
  RunLock lock(out);
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const EncoderModel& model = ck.state.model;
  const LoadedData data = load_eval_data(c);
  if (data.xs.cols() != model.dim()) throw ShapeError("evaluation data width differs from the model");

  Json metrics;
  Json omitted = Json::object();
  auto attempt = [&](const std::string& name, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      omitted[name] = e.what();
    }
  };

  const Evaluation ev = evaluate(model, data.xs);
  metrics["variant"] = to_string(model.variant);
  metrics["latents"] = model.latents();
  metrics["rows"] = data.xs.rows();
  metrics["mean_l0"] = ev.mean_l0;
  attempt("r2", [&] { metrics["r2"] = r_squared(data.xs, ev.x_hat); });
  attempt("normalized_mse", [&] {
    const auto n = normalized_mse(data.xs, ev.x_hat);
    metrics["normalized_mse"] = n.value;
    metrics["normalized_mse_skipped_rows"] = n.skipped;
  });
  attempt("effective_rank", [&] { metrics["effective_rank"] = effective_rank(ev.codes); });

  if (data.gt) {
    const GroundTruth& gt = *data.gt;
    attempt("dictionary", [&] {
      const Assignment a = match_to_ground_truth(model.dictionary, gt.dictionary);
      double mn = 1.0, mean = 0.0;
      for (std::size_t i = 0; i < a.mapping.size(); ++i) {
        const double v = std::abs(cosine(model.dictionary.atom(a.mapping[i]), gt.dictionary.atom(i)));
        mn = std::min(mn, v);
        mean += v / static_cast<double>(a.mapping.size());
      }
      metrics["assignment"] = Json{{"mapping", a.mapping}, {"min_abs_cos", mn}, {"mean_abs_cos", mean}};
      metrics["flat_mse"] = flat_mse(model.dictionary, gt.dictionary, gt.levels, a);
      metrics["hierarchical_mse"] = hierarchical_mse(model.dictionary, gt.dictionary, gt.levels, a);
      write_matrix_csv(out / "gram_gt.csv", gram(gt.dictionary));
      write_matrix_csv(out / "gram_aligned.csv", aligned_learned_gram(model.dictionary, gt.dictionary, a));
    });
    attempt("absorption", [&] {
      RngStream rng = RngStream(c.seed).split(kAbsorbStream);
      const auto ab = absorption_score(model, c.effective_tree(), gt.dictionary, rng, c.eval.absorption_samples);
      metrics["absorption"] = Json{{"mean", ab.mean},
                                   {"unrecovered", ab.unrecovered},
                                   {"child_nodes", ab.child_nodes},
                                   {"per_child", ab.per_child}};
    });
  }
  if (data.labels) {
    attempt("modality", [&] {
      const auto ms = modality_score(ev.codes, *data.labels, c.eval.text_energy_scale);
      metrics["modality"] = Json{{"text_energy_scale", ms.text_energy_scale}, {"inactive", ms.inactive}};
      Csv csv({"latent", "modality_score"});
      for (std::size_t i = 0; i < ms.score.size(); ++i) csv.row(i, ms.score[i]);
      csv.write(out / "modality.csv");
    });
  }

  write_matrix_csv(out / "gram_learned.csv", gram(model.dictionary));

  attempt("babel", [&] {
    std::vector<std::size_t> kept;
    const Dictionary unit = unit_atoms(model.dictionary, &kept);
    std::vector<std::size_t> remap(model.latents(), 0);
    for (std::size_t i = 0; i < kept.size(); ++i) remap[kept[i]] = i;
    std::vector<std::vector<std::size_t>> supports;
    for (const auto& s : ev.supports) {
      std::vector<std::size_t> t;
      for (std::size_t j : s)
        if (norm2(model.dictionary.atom(j)) > 0.0) t.push_back(remap[j]);
      supports.push_back(std::move(t));
    }
    Csv csv({"r", "mu1_full", "mu1_coactivated_mean"});
    Series full{"mu1 full", {}, {}}, coact{"mu1 co-activated", {}, {}};
    const std::size_t rmax = std::min(c.eval.babel_r_max, unit.size() > 0 ? unit.size() - 1 : 0);
    for (std::size_t r = 1; r <= rmax; ++r) {
      const double f = babel(unit, r);
      double co = std::numeric_limits<double>::quiet_NaN();
      try {
        co = babel_coactivated(unit, supports, r).mean;
      } catch (const EmptyInputError&) {
      }
      csv.row(r, f, co);
      full.x.push_back(static_cast<double>(r));
      full.y.push_back(f);
      coact.x.push_back(static_cast<double>(r));
      coact.y.push_back(co);
    }
    csv.write(out / "babel.csv");
    if (c.eval.svg) write_svg_plot(out / "babel.svg", "Babel function", "r", "mu1(r)", {full, coact});
  });

  attempt("sweep", [&] {
    const auto ks = c.eval.k_values.empty() ? default_k_grid(model.latents()) : c.eval.k_values;
    const SweepResult sr = sweep_inference_k(model, data.xs, ks, c.eval.babel_support_r);
    write_sweep_csv(out / "sweep_k.csv", sr);
    metrics["sweep_k"] = sweep_to_json(sr);
    if (c.eval.svg) {
      Series s{to_string(model.variant), {}, {}};
      for (const auto& p : sr.points) {
        s.x.push_back(static_cast<double>(p.k));
        s.y.push_back(p.normalized_mse);
      }
      write_svg_plot(out / "sweep_k.svg", "Inference-time sparsity", "k", "normalized MSE", {s});
    }
  });

  metrics["omitted"] = omitted;
  write_json(out / "metrics.json", metrics);
}

void cmd_sweep(const RunConfig& c, const std::optional<fs::path>& checkpoint) {
  const fs::path out = c.out;
  if (c.sweep.kind == "inference-k") {
    const fs::path ckpt_path = checkpoint_for(c, checkpoint);
    RunLock lock(out);
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const LoadedData data = load_eval_data(c);
    if (data.xs.cols() != ck.state.model.dim()) throw ShapeError("evaluation data width differs from the model");
    const auto ks = c.sweep.k_values.empty() ? default_k_grid(ck.state.model.latents()) : c.sweep.k_values;
    write_sweep_csv(out / "sweep_inference_k.csv", sweep_inference_k(ck.state.model, data.xs, ks));
    return;
  }
  RunLock lock(out);
  TrainingData data = training_data(c);
  std::vector<TrainConfig> configs;
  const Json base = to_json(c.train);
  const std::vector<Json> overrides = c.sweep.configs.empty() ? std::vector<Json>{Json::object()} : c.sweep.configs;
  for (std::size_t i = 0; i < overrides.size(); ++i) {
    RunConfig rc = c;
    from_json(merge_json(base, overrides[i]), rc.train, "sweep.configs[" + std::to_string(i) + "]");
    configs.push_back(effective_train_config(rc, data.dim));
  }
  const LoadedData held = load_eval_data(c);
  const auto rows = pareto_sweep(configs, *data.source, held.xs);
  Csv csv({"index", "variant", "latents", "mean_l0", "r2", "failed", "error"});
  for (const auto& r : rows) csv.row(r.index, r.variant, r.latents, r.mean_l0, r.r2, r.failed, r.error);
  csv.write(out / "pareto.csv");
}

void cmd_report(const fs::path& out, const std::vector<fs::path>& runs) {
  if (runs.empty()) throw ConfigError("report: no run directories given");
  std::map<std::string, std::vector<double>> values;
  for (const auto& dir : runs) {
    const fs::path p = dir / "metrics.json";
    std::ifstream in(p);
    if (!in) throw FormatError("report: missing " + p.string());
    Json j;
    try {
      j = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("report: bad " + p.string() + ": " + e.what());
    }
    std::map<std::string, double> flat;
    flatten_numbers(j, "", flat);
    for (const auto& [k, v] : flat)
      if (!std::isnan(v)) values[k].push_back(v);
  }
  RunLock lock(out);
  Json medians = Json::object(), counts = Json::object();
  Csv csv({"metric", "median", "runs"});
  for (auto& [k, v] : values) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    const double med = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    medians[k] = med;
    counts[k] = n;
    csv.row(k, med, n);
  }
  write_json(out / "report.json", Json{{"runs", runs.size()},
                                       {"aggregation", "per-metric median over runs"},
                                       {"medians", medians},
                                       {"counts", counts}});
  csv.write(out / "report.csv");
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const NumericAbort*>(&e)) return 4;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
      dynamic_cast<const DimensionError*>(&e) || dynamic_cast<const EmptyInputError*>(&e) ||
      dynamic_cast<const DomainError*>(&e))
    return 3;
  return 1;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Matching-pursuit sparse autoencoder toolkit"};
  app.require_subcommand(1);
  CliOverrides ov;
  std::string preset;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t threads = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", ov.configs, "YAML run configuration (repeatable; later files win)");
    sub->add_option("--preset", preset, "preset name or path");
    sub->add_option("--seed", seed, "run seed");
    sub->add_option("--out", out, "run directory");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  };
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  CLI::App* trn = app.add_subcommand("train", "train a sparse autoencoder");
  CLI::App* evl = app.add_subcommand("eval", "evaluate a checkpoint");
  CLI::App* swp = app.add_subcommand("sweep", "inference-k or Pareto sweep");
  CLI::App* rep = app.add_subcommand("report", "aggregate metrics over runs");
  for (auto* s : {gen, trn, evl, swp}) add_common(s);
  bool resume = false;
  std::size_t until = 0;
  trn->add_flag("--resume", resume, "continue from the run directory's checkpoint");
  trn->add_option("--until", until, "stop after this many total steps");
  std::string ckpt;
  evl->add_option("--checkpoint", ckpt, "checkpoint file");
  swp->add_option("--checkpoint", ckpt, "checkpoint file");
  std::vector<std::string> run_dirs;
  rep->add_option("--out", out, "report directory")->required();
  rep->add_option("runs", run_dirs, "run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (rep->parsed()) {
      cmd_report(out, std::vector<fs::path>(run_dirs.begin(), run_dirs.end()));
      return 0;
    }
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--preset")) ov.preset = preset;
    if (sub->count("--seed")) ov.seed = seed;
    if (sub->count("--out")) ov.out = out;
    if (sub->count("--threads")) ov.threads = threads;
    const RunConfig c = resolve_config(ov);
    const std::optional<fs::path> ck = ckpt.empty() ? std::nullopt : std::optional<fs::path>(ckpt);
    if (gen->parsed()) cmd_gen(c);
    if (trn->parsed()) {
      TrainOptions opts;
      opts.resume = resume;
      if (trn->count("--until")) opts.until = until;
      cmd_train(c, opts);
    }
    if (evl->parsed()) cmd_eval(c, ck);
    if (swp->parsed()) cmd_sweep(c, ck);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}

}  // namespace mpsae
