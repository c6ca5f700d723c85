#include "mpsae/serialize.hpp"

#include <algorithm>

#include "mpsae/errors.hpp"

namespace mpsae {

StrictObject::StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
  if (!j_.is_object()) throw ConfigError(where_ + ": expected a mapping");
}

bool StrictObject::has(const std::string& key) const { return j_.contains(key); }

const Json& StrictObject::at(const std::string& key) {
  used_.push_back(key);
  return j_.at(key);
}

void StrictObject::finish() const {
  for (const auto& [key, _] : j_.items())
    if (std::find(used_.begin(), used_.end(), key) == used_.end())
      throw ConfigError("unknown key '" + key + "' in " + where_);
}

void StrictObject::throw_type(const std::string& key, const char* what) const {
  throw ConfigError("bad value for '" + key + "' in " + where_ + ": " + what);
}

std::string to_string(NodeKind k) {
  switch (k) {
    case NodeKind::kRoot: return "root";
    case NodeKind::kInternalParent: return "internal-parent";
    case NodeKind::kLeafParent: return "leaf-parent";
    case NodeKind::kChild: return "child";
  }
  return "unknown";
}

NodeKind node_kind_from_string(const std::string& s) {
  if (s == "root") return NodeKind::kRoot;
  if (s == "internal-parent") return NodeKind::kInternalParent;
  if (s == "leaf-parent") return NodeKind::kLeafParent;
  if (s == "child") return NodeKind::kChild;
  throw ConfigError("unknown node kind '" + s + "'");
}

Json to_json(const MpStopRule& s) {
  return Json{{"max_steps", s.max_steps},
              {"residual_threshold", s.residual_threshold},
              {"stop_on_stable_support", s.stop_on_stable_support},
              {"stable_decrease_tol", s.stable_decrease_tol},
              {"selection", s.selection == Selection::kSigned ? "signed" : "absolute"}};
}

void from_json(const Json& j, MpStopRule& s, const std::string& where) {
  StrictObject o(j, where);
  o.get("max_steps", s.max_steps);
  o.get("residual_threshold", s.residual_threshold);
  o.get("stop_on_stable_support", s.stop_on_stable_support);
  o.get("stable_decrease_tol", s.stable_decrease_tol);
  if (o.has("selection")) {
    std::string sel;
    o.get("selection", sel);
    if (sel == "signed")
      s.selection = Selection::kSigned;
    else if (sel == "absolute")
      s.selection = Selection::kAbsolute;
    else
      throw ConfigError("selection must be 'signed' or 'absolute' in " + where);
  }
  o.finish();
}

Json to_json(const LrSchedule& s) {
  return Json{{"kind", s.kind == LrSchedule::Kind::kConstant ? "constant" : "cosine"},
              {"warmup", s.warmup},
              {"floor", s.floor}};
}

void from_json(const Json& j, LrSchedule& s, const std::string& where) {
  StrictObject o(j, where);
  if (o.has("kind")) {
    std::string k;
    o.get("kind", k);
    if (k == "constant")
      s.kind = LrSchedule::Kind::kConstant;
    else if (k == "cosine")
      s.kind = LrSchedule::Kind::kCosine;
    else
      throw ConfigError("lr_schedule.kind must be 'constant' or 'cosine'");
  }
  o.get("warmup", s.warmup);
  o.get("floor", s.floor);
  o.finish();
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["variant"] = to_string(c.variant);
  j["latents"] = c.latents;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["lr_schedule"] = to_json(c.lr_schedule);
  j["adam_betas"] = Json::array({c.beta1, c.beta2});
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["grad_clip_norm"] = c.grad_clip_norm;
  j["sparsity_target"] = c.sparsity_target;
  j["l1_weight"] = c.l1_weight;
  j["l1_warmup_steps"] = c.l1_warmup_steps;
  j["l1_gain"] = c.l1_gain;
  j["l1_deadband"] = c.l1_deadband;
  j["l1_floor"] = c.l1_floor;
  j["topk_k"] = c.topk_k;
  j["batch_topk_warm_steps"] = c.batch_topk_warm_steps;
  j["batch_topk_warm_k"] = c.batch_topk_warm_k;
  j["matryoshka_prefixes"] = c.matryoshka_prefixes;
  j["mp_stop"] = to_json(c.mp_stop);
  j["tangent_atom_grads"] = c.tangent_atom_grads;
  j["mp_intermediate_loss"] = c.mp_intermediate_loss;
  j["mp_reseed_dead"] = c.mp_reseed_dead;
  j["mp_reseed_interval"] = c.mp_reseed_interval;
  j["revive_eps"] = c.revive_eps;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  return j;
}

void from_json(const Json& j, TrainConfig& c, const std::string& where) {
  StrictObject o(j, where);
  if (o.has("variant")) {
    std::string v;
    o.get("variant", v);
    c.variant = variant_from_string(v);
  }
  o.get("latents", c.latents);
  o.get("steps", c.steps);
  o.get("batch_size", c.batch_size);
  o.get("learning_rate", c.learning_rate);
  if (o.has("lr_schedule")) from_json(o.at("lr_schedule"), c.lr_schedule, where + ".lr_schedule");
  if (o.has("adam_betas")) {
    std::vector<double> b;
    o.get("adam_betas", b);
    if (b.size() != 2) throw ConfigError("adam_betas must have two entries in " + where);
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  o.get("adam_eps", c.adam_eps);
  o.get("weight_decay", c.weight_decay);
  o.get("grad_clip_norm", c.grad_clip_norm);
  o.get("sparsity_target", c.sparsity_target);
  o.get("l1_weight", c.l1_weight);
  o.get("l1_warmup_steps", c.l1_warmup_steps);
  o.get("l1_gain", c.l1_gain);
  o.get("l1_deadband", c.l1_deadband);
  o.get("l1_floor", c.l1_floor);
  o.get("topk_k", c.topk_k);
  o.get("batch_topk_warm_steps", c.batch_topk_warm_steps);
  o.get("batch_topk_warm_k", c.batch_topk_warm_k);
  o.get("matryoshka_prefixes", c.matryoshka_prefixes);
  if (o.has("mp_stop")) from_json(o.at("mp_stop"), c.mp_stop, where + ".mp_stop");
  o.get("tangent_atom_grads", c.tangent_atom_grads);
  o.get("mp_intermediate_loss", c.mp_intermediate_loss);
  o.get("mp_reseed_dead", c.mp_reseed_dead);
  o.get("mp_reseed_interval", c.mp_reseed_interval);
  o.get("revive_eps", c.revive_eps);
  o.get("seed", c.seed);
  o.get("threads", c.threads);
  o.finish();
}

Json to_json(const TreeSpec& t) {
  Json nodes = Json::array();
  for (std::size_t i = 0; i < t.nodes(); ++i) {
    Json n;
    n["kind"] = to_string(t.kind[i]);
    n["parent"] = t.parent[i] ? Json(*t.parent[i]) : Json(nullptr);
    n["p"] = t.activation_prob[i];
    n["mean"] = t.magnitude_mean[i];
    n["sd"] = t.magnitude_sd[i];
    nodes.push_back(std::move(n));
  }
  Json j;
  j["dim"] = t.dim;
  j["correlation_eps"] = t.correlation_eps;
  j["target_correlation"] = t.target_correlation ? Json(*t.target_correlation) : Json(nullptr);
  j["inject_leaf_group"] = t.inject_leaf_group;
  j["fixed_magnitudes"] = t.fixed_magnitudes;
  j["nodes"] = std::move(nodes);
  return j;
}

void from_json(const Json& j, TreeSpec& t, const std::string& where) {
  StrictObject o(j, where);
  o.get("dim", t.dim);
  o.get("correlation_eps", t.correlation_eps);
  if (o.has("target_correlation")) {
    const Json& v = o.at("target_correlation");
    if (v.is_null())
      t.target_correlation.reset();
    else if (v.is_number())
      t.target_correlation = v.get<double>();
    else
      throw ConfigError("target_correlation must be a number or null in " + where);
  }
  o.get("inject_leaf_group", t.inject_leaf_group);
  o.get("fixed_magnitudes", t.fixed_magnitudes);
  if (o.has("nodes")) {
    const Json& nodes = o.at("nodes");
    if (!nodes.is_array()) throw ConfigError("nodes must be a list in " + where);
    t.parent.clear();
    t.kind.clear();
    t.activation_prob.clear();
    t.magnitude_mean.clear();
    t.magnitude_sd.clear();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      StrictObject n(nodes[i], where + ".nodes[" + std::to_string(i) + "]");
      std::string kind = "leaf-parent";
      n.get("kind", kind);
      t.kind.push_back(node_kind_from_string(kind));
      std::optional<std::size_t> par;
      if (n.has("parent") && !n.at("parent").is_null()) par = n.at("parent").get<std::size_t>();
      t.parent.push_back(par);
      double p = 0.0, mean = 1.5, sd = 0.25;
      n.get("p", p);
      n.get("mean", mean);
      n.get("sd", sd);
      t.activation_prob.push_back(p);
      t.magnitude_mean.push_back(mean);
      t.magnitude_sd.push_back(sd);
      n.finish();
    }
  }
  o.finish();
}

}  // namespace mpsae
