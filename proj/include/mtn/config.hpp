#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mtn {

enum class AttentionMode { concat, weighted };

std::string to_string(AttentionMode mode);
AttentionMode attention_mode_from_string(const std::string& s);

// Model and schedule hyperparameters. Defaults follow the full-size profile;
// desk_profile() shrinks everything to laptop scale for tests and demos.
struct ModelConfig {
  int d = 512;        // model width
  int d_f = 1024;     // feed-forward inner width
  int d_emb = 300;    // embedding width; projected to d when different
  int P = 8;          // attention heads
  int L = 3;          // token-level encoder layers
  int L_dec = 3;      // decoder layers
  int K = 2;          // hierarchy levels (token level plus K-1 code levels)
  std::vector<int> L_levels = {2};          // layers per code-level encoder
  std::vector<int> level_group_caps = {};   // max units per group, levels 3..K
  int session_d_f = 0;  // FFN width for code levels; 0 means "same as d_f"
  double dropout = 0.1;
  double label_smoothing = 0.05;
  int warmup_steps = 4000;
  int max_query_len = 10;  // tokens per query after padding (n_max)
  AttentionMode attention_mode = AttentionMode::concat;
  std::uint64_t seed = 0;

  static ModelConfig desk_profile();

  // Throws ConfigError when fields are inconsistent (d not divisible by P,
  // d_f not larger than d, arity mismatches, rates outside [0, 1), ...).
  void validate() const;

  int code_ffn_width() const { return session_d_f > 0 ? session_d_f : d_f; }

  std::string to_json() const;
  // Fail-closed: unknown keys are rejected by name, known keys type-checked,
  // missing keys keep the values of `base` (defaults when no base is given).
  // Validates before returning.
  static ModelConfig from_json(const std::string& text);
  static ModelConfig from_json(const std::string& text, const ModelConfig& base);
};

ModelConfig load_config(const std::string& path,
                        const ModelConfig& base = ModelConfig{});

}  // namespace mtn
