#include "bct/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "bct/errors.hpp"

namespace bct {

void rethrow_with_token(const Error& e, std::size_t token) {
  const std::string msg = "token " + std::to_string(token) + ": " + e.what();
  if (dynamic_cast<const DimensionError*>(&e)) throw DimensionError(msg);
  if (dynamic_cast<const NumericError*>(&e)) throw NumericError(msg);
  if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(msg);
  if (dynamic_cast<const IoError*>(&e)) throw IoError(msg);
  throw Error(msg);
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view value) {
  Int out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config: invalid integer for '" + std::string(key) + "': '" +
                      std::string(value) + "'");
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string("config: ") + name + " must be >= 1");
  };
  positive(d_model, "d_model");
  positive(d_k, "d_k");
  positive(d_v, "d_v");
  positive(capacity, "capacity");
  positive(n_heads, "n_heads");
  if (element_width != 32 && element_width != 64) {
    throw ConfigError("config: element_width must be 32 or 64, got " +
                      std::to_string(element_width));
  }
}

double ModelConfig::score_factor() const {
  return score_scale == ScoreScale::kNone ? 1.0 : 1.0 / std::sqrt(static_cast<double>(d_k));
}

std::string to_string(ScoreScale s) { return s == ScoreScale::kNone ? "none" : "inv_sqrt_dk"; }
std::string to_string(MvInit m) { return m == MvInit::kZeros ? "zeros" : "gaussian"; }

ModelConfig parse_config(std::string_view text) {
  ModelConfig cfg;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;

    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;

    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!seen.insert(std::string(key)).second) {
      throw ConfigError("config: duplicate key '" + std::string(key) + "'");
    }

    if (key == "d_model") {
      cfg.d_model = parse_int<std::size_t>(key, value);
    } else if (key == "d_k") {
      cfg.d_k = parse_int<std::size_t>(key, value);
    } else if (key == "d_v") {
      cfg.d_v = parse_int<std::size_t>(key, value);
    } else if (key == "capacity") {
      cfg.capacity = parse_int<std::size_t>(key, value);
    } else if (key == "n_heads") {
      cfg.n_heads = parse_int<std::size_t>(key, value);
    } else if (key == "seed") {
      cfg.seed = parse_int<std::uint64_t>(key, value);
    } else if (key == "element_width") {
      cfg.element_width = parse_int<int>(key, value);
    } else if (key == "score_scale") {
      if (value == "none") {
        cfg.score_scale = ScoreScale::kNone;
      } else if (value == "inv_sqrt_dk") {
        cfg.score_scale = ScoreScale::kInvSqrtDk;
      } else {
        throw ConfigError("config: score_scale must be none|inv_sqrt_dk");
      }
    } else if (key == "mv_init") {
      if (value == "zeros") {
        cfg.mv_init = MvInit::kZeros;
      } else if (value == "gaussian") {
        cfg.mv_init = MvInit::kGaussian;
      } else {
        throw ConfigError("config: mv_init must be zeros|gaussian");
      }
    } else {
      throw ConfigError("config: unknown key '" + std::string(key) + "'");
    }
  }
  cfg.validate();
  return cfg;
}

std::string format_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "d_model=" << c.d_model << "\n"
     << "d_k=" << c.d_k << "\n"
     << "d_v=" << c.d_v << "\n"
     << "capacity=" << c.capacity << "\n"
     << "n_heads=" << c.n_heads << "\n"
     << "score_scale=" << to_string(c.score_scale) << "\n"
     << "mv_init=" << to_string(c.mv_init) << "\n"
     << "seed=" << c.seed << "\n"
     << "element_width=" << c.element_width << "\n";
  return os.str();
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void save_config(const ModelConfig& config, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config '" + path + "'");
  out << format_config(config);
  if (!out) throw IoError("write failed for '" + path + "'");
}

void apply_env_overrides(ModelConfig& config) {
  const char* width = std::getenv("BCT_ELEMENT_WIDTH");
  if (width == nullptr) return;
  const std::string_view v(width);
  if (v == "32") {
    config.element_width = 32;
  } else if (v == "64") {
    config.element_width = 64;
  } else {
    throw ConfigError("BCT_ELEMENT_WIDTH must be 32 or 64, got '" + std::string(v) + "'");
  }
}

}  // namespace bct
