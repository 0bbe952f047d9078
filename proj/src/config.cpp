#include "mtn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mtn/errors.hpp"

namespace mtn {

using nlohmann::json;

std::string to_string(AttentionMode mode) {
  return mode == AttentionMode::concat ? "concat" : "weighted";
}

AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "concat") return AttentionMode::concat;
  if (s == "weighted") return AttentionMode::weighted;
  throw ConfigError("attention_mode must be \"concat\" or \"weighted\", got \"" +
                    s + "\"");
}

ModelConfig ModelConfig::desk_profile() {
  ModelConfig c;
  c.d = 32;
  c.d_f = 64;
  c.d_emb = 32;
  c.P = 4;
  c.L = 2;
  c.L_dec = 2;
  c.K = 2;
  c.L_levels = {2};
  c.level_group_caps = {};
  c.dropout = 0.1;
  c.label_smoothing = 0.0;
  c.warmup_steps = 100;
  c.max_query_len = 10;
  return c;
}

void ModelConfig::validate() const {
  if (d < 2) throw ConfigError("d must be at least 2, got " + std::to_string(d));
  if (P < 1) throw ConfigError("P must be positive, got " + std::to_string(P));
  if (d % P != 0) {
    throw ConfigError("d must be divisible by P: d=" + std::to_string(d) +
                      ", P=" + std::to_string(P));
  }
  if (d_f <= d) {
    throw ConfigError("d_f must exceed d: d_f=" + std::to_string(d_f) +
                      ", d=" + std::to_string(d));
  }
  if (session_d_f < 0) throw ConfigError("session_d_f must be non-negative");
  if (d_emb < 1) throw ConfigError("d_emb must be positive");
  if (L < 1) throw ConfigError("L must be at least 1");
  if (L_dec < 1) throw ConfigError("L_dec must be at least 1");
  if (K < 2) throw ConfigError("K must be at least 2");
  if (static_cast<int>(L_levels.size()) != K - 1) {
    throw ConfigError("L_levels must list one layer count per code level: "
                      "expected " + std::to_string(K - 1) + " entries, got " +
                      std::to_string(L_levels.size()));
  }
  for (int l : L_levels) {
    if (l < 0) throw ConfigError("L_levels entries must be non-negative");
  }
  if (static_cast<int>(level_group_caps.size()) != K - 2) {
    throw ConfigError("level_group_caps must list one group width per level "
                      "above the first code level: expected " +
                      std::to_string(K - 2) + " entries, got " +
                      std::to_string(level_group_caps.size()));
  }
  for (int c : level_group_caps) {
    if (c < 1) throw ConfigError("level_group_caps entries must be positive");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("dropout must lie in [0, 1), got " +
                      std::to_string(dropout));
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ConfigError("label_smoothing must lie in [0, 1), got " +
                      std::to_string(label_smoothing));
  }
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be positive");
  if (max_query_len < 1) throw ConfigError("max_query_len must be positive");
}

std::string ModelConfig::to_json() const {
  json j;
  j["d"] = d;
  j["d_f"] = d_f;
  j["d_emb"] = d_emb;
  j["P"] = P;
  j["L"] = L;
  j["L_dec"] = L_dec;
  j["K"] = K;
  j["L_levels"] = L_levels;
  j["level_group_caps"] = level_group_caps;
  j["session_d_f"] = session_d_f;
  j["dropout"] = dropout;
  j["label_smoothing"] = label_smoothing;
  j["warmup_steps"] = warmup_steps;
  j["max_query_len"] = max_query_len;
  j["attention_mode"] = to_string(attention_mode);
  j["seed"] = seed;
  return j.dump(2);
}

namespace {

void read_int(const json& j, const char* key, int& out) {
  if (!j.contains(key)) return;
  if (!j[key].is_number_integer()) {
    throw ConfigError(std::string("config key \"") + key +
                      "\" must be an integer");
  }
  out = j[key].get<int>();
}

void read_double(const json& j, const char* key, double& out) {
  if (!j.contains(key)) return;
  if (!j[key].is_number()) {
    throw ConfigError(std::string("config key \"") + key +
                      "\" must be a number");
  }
  out = j[key].get<double>();
}

void read_int_list(const json& j, const char* key, std::vector<int>& out) {
  if (!j.contains(key)) return;
  if (!j[key].is_array()) {
    throw ConfigError(std::string("config key \"") + key +
                      "\" must be an array of integers");
  }
  std::vector<int> v;
  for (const auto& e : j[key]) {
    if (!e.is_number_integer()) {
      throw ConfigError(std::string("config key \"") + key +
                        "\" must be an array of integers");
    }
    v.push_back(e.get<int>());
  }
  out = std::move(v);
}

}  // namespace

ModelConfig ModelConfig::from_json(const std::string& text) {
  return from_json(text, ModelConfig{});
}

ModelConfig ModelConfig::from_json(const std::string& text,
                                   const ModelConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");

  static const std::set<std::string> known = {
      "d",           "d_f",          "d_emb",         "P",
      "L",           "L_dec",        "K",             "L_levels",
      "level_group_caps", "session_d_f", "dropout",   "label_smoothing",
      "warmup_steps", "max_query_len", "attention_mode", "seed"};
  for (const auto& item : j.items()) {
    if (known.find(item.key()) == known.end()) {
      throw ConfigError("unknown config key \"" + item.key() + "\"");
    }
  }

  ModelConfig c = base;
  read_int(j, "d", c.d);
  read_int(j, "d_f", c.d_f);
  read_int(j, "d_emb", c.d_emb);
  read_int(j, "P", c.P);
  read_int(j, "L", c.L);
  read_int(j, "L_dec", c.L_dec);
  read_int(j, "K", c.K);
  read_int_list(j, "L_levels", c.L_levels);
  read_int_list(j, "level_group_caps", c.level_group_caps);
  read_int(j, "session_d_f", c.session_d_f);
  read_double(j, "dropout", c.dropout);
  read_double(j, "label_smoothing", c.label_smoothing);
  read_int(j, "warmup_steps", c.warmup_steps);
  read_int(j, "max_query_len", c.max_query_len);
  if (j.contains("attention_mode")) {
    if (!j["attention_mode"].is_string()) {
      throw ConfigError("config key \"attention_mode\" must be a string");
    }
    c.attention_mode =
        attention_mode_from_string(j["attention_mode"].get<std::string>());
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer()) {
      throw ConfigError("config key \"seed\" must be an integer");
    }
    c.seed = j["seed"].get<std::uint64_t>();
  }
  c.validate();
  return c;
}

ModelConfig load_config(const std::string& path, const ModelConfig& base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return ModelConfig::from_json(buf.str(), base);
}

}  // namespace mtn
