#pragma once

#include <json.hpp>

#include "mpsae/encoders.hpp"
#include "mpsae/generator.hpp"
#include "mpsae/training.hpp"

namespace mpsae {

using Json = nlohmann::ordered_json;

// Strict JSON readers: unknown keys raise ConfigError naming the key; missing
// keys keep the current (default) value.
Json to_json(const MpStopRule& s);
Json to_json(const LrSchedule& s);
Json to_json(const TrainConfig& c);
Json to_json(const TreeSpec& t);

void from_json(const Json& j, MpStopRule& s, const std::string& where = "mp_stop");
void from_json(const Json& j, LrSchedule& s, const std::string& where = "lr_schedule");
void from_json(const Json& j, TrainConfig& c, const std::string& where = "train");
void from_json(const Json& j, TreeSpec& t, const std::string& where = "tree");

std::string to_string(NodeKind k);
NodeKind node_kind_from_string(const std::string& s);

// Tracks which keys of an object were consumed; finish() rejects leftovers.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where);
  bool has(const std::string& key) const;
  const Json& at(const std::string& key);
  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw_type(key, e.what());
    }
  }
  void finish() const;

 private:
  [[noreturn]] void throw_type(const std::string& key, const char* what) const;
  const Json& j_;
  std::string where_;
  std::vector<std::string> used_;
};

}  // namespace mpsae
