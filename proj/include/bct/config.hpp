#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace bct {

enum class ScoreScale { kNone, kInvSqrtDk };
enum class MvInit { kZeros, kGaussian };

struct ModelConfig {
  std::size_t d_model = 16;
  std::size_t d_k = 8;
  std::size_t d_v = 8;
  std::size_t capacity = 8;  // M, number of cache slots
  std::size_t n_heads = 1;
  ScoreScale score_scale = ScoreScale::kNone;
  MvInit mv_init = MvInit::kZeros;
  std::uint64_t seed = 0;
  int element_width = 64;  // bits: 32 or 64

  // Throws ConfigError on zero dimensions or an unsupported width.
  void validate() const;

  std::size_t element_bytes() const { return element_width == 32 ? 4 : 8; }

  // Multiplier applied to q.k scores.
  double score_factor() const;

  bool operator==(const ModelConfig&) const = default;
};

// Flat "key=value" text, one entry per line. Blank lines and lines starting
// with '#' are ignored; unknown keys and malformed values are ConfigErrors.
//
//   d_model=128
//   d_k=32
//   d_v=32
//   capacity=256
//   n_heads=1
//   score_scale=none        # none | inv_sqrt_dk
//   mv_init=zeros           # zeros | gaussian
//   seed=0
//   element_width=32        # 32 | 64
ModelConfig parse_config(std::string_view text);
std::string format_config(const ModelConfig& config);

ModelConfig load_config(const std::string& path);
void save_config(const ModelConfig& config, const std::string& path);

// Applies BCT_ELEMENT_WIDTH from the environment, if set.
void apply_env_overrides(ModelConfig& config);

std::string to_string(ScoreScale s);
std::string to_string(MvInit m);

}  // namespace bct
