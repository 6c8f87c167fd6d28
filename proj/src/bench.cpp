#include "bct/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bct/baseline.hpp"
#include "bct/layer.hpp"

#if defined(__linux__)
#include <sched.h>
#endif

namespace bct {

std::string to_string(ModelId m) { return m == ModelId::kBct ? "bct" : "baseline"; }

ModelId parse_model_id(const std::string& s) {
  if (s == "bct") return ModelId::kBct;
  if (s == "baseline") return ModelId::kBaseline;
  throw ConfigError("unknown model '" + s + "'");
}

ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::kCsv;
  if (s == "json") return ReportFormat::kJson;
  throw ConfigError("unknown format '" + s + "' (expected csv|json)");
}

bool pin_current_thread() {
#if defined(__linux__)
  const int cpu = sched_getcpu();
  if (cpu < 0) return false;
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(cpu, &set);
  return sched_setaffinity(0, sizeof(set), &set) == 0;
#else
  return false;
#endif
}

double timer_resolution() {
  using clock = std::chrono::steady_clock;
  auto best = clock::duration::max();
  for (int trial = 0; trial < 64; ++trial) {
    const auto start = clock::now();
    auto now = clock::now();
    while (now == start) now = clock::now();
    best = std::min(best, now - start);
  }
  return std::chrono::duration<double>(best).count();
}

double median(std::vector<double> xs) {
  if (xs.empty()) throw ConfigError("median of empty sample");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

double percentile90(std::vector<double> xs) {
  if (xs.empty()) throw ConfigError("percentile of empty sample");
  std::sort(xs.begin(), xs.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(xs.size())));
  return xs[std::max<std::size_t>(rank, 1) - 1];
}

namespace {

void check_lengths(const std::vector<std::size_t>& lengths) {
  if (lengths.empty()) throw ConfigError("bench: no context lengths given");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] == 0) throw ConfigError("bench: context length must be >= 1");
    if (i > 0 && lengths[i] <= lengths[i - 1]) {
      throw ConfigError("bench: context lengths must be strictly increasing");
    }
  }
}

template <typename T>
double checksum(const Matrix<T>& y) {
  double s = 0.0;
  for (T v : y.data()) s += static_cast<double>(v);
  return s;
}

// Fixed input stream: token t of every run is the same for a given seed.
template <typename T>
Matrix<T> bench_inputs(const ModelConfig& config, std::size_t n) {
  Rng rng(config.seed ^ 0xB5AD4ECEDA1CE2A9ULL);
  return gaussian_matrix<T>(n, config.d_model, 1.0, rng);
}

template <typename T>
BenchSample memory_sample(ModelId model, const ModelConfig& config, std::size_t n) {
  BenchSample s;
  s.context_length = n;
  const auto xs = bench_inputs<T>(config, n);
  Rng rng(config.seed);
  if (model == ModelId::kBct) {
    auto init = init_layer<T>(config, rng);
    const auto state = update_sequence(xs, std::move(init.state), init.params, config);
    s.cache_bytes = bounded_cache_bytes(config);
    s.payload_bytes = state.payload_bytes();
  } else {
    const auto params = init_baseline<T>(config, rng);
    auto cache = empty_cache<T>(config);
    baseline_prefill(xs, cache, params);
    s.cache_bytes = growing_cache_bytes(config, n);
    s.payload_bytes = cache.payload_bytes();
  }
  return s;
}

template <typename Step>
std::vector<double> time_reps(Step&& step, const LatencyOptions& options) {
  for (std::size_t i = 0; i < options.warmup; ++i) step();
  std::vector<double> out;
  out.reserve(options.reps);
  for (std::size_t i = 0; i < options.reps; ++i) {
    const auto elapsed = step();
    out.push_back(std::chrono::duration<double>(elapsed).count());
  }
  return out;
}

template <typename T>
BenchSample latency_sample(ModelId model, const ModelConfig& config, std::size_t n,
                           const LatencyOptions& options) {
  using clock = std::chrono::steady_clock;
  BenchSample s;
  s.context_length = n;
  const auto xs = bench_inputs<T>(config, n);
  const auto x = xs.row_copy(n - 1);
  Rng rng(config.seed);
  std::vector<double> times;

  if (model == ModelId::kBct) {
    auto init = init_layer<T>(config, rng);
    auto prefix = init.state;
    if (n > 1) {
      Matrix<T> head(n - 1, config.d_model,
                     std::vector<T>(xs.data().begin(), xs.data().begin() + (n - 1) * config.d_model));
      prefix = update_sequence(head, std::move(prefix), init.params, config);
    }
    auto scratch = prefix;
    Matrix<T> y;
    times = time_reps(
        [&] {
          scratch = prefix;
          const auto t0 = clock::now();
          y = layer_step(x, scratch, init.params, config);
          return clock::now() - t0;
        },
        options);
    s.cache_bytes = bounded_cache_bytes(config);
    s.payload_bytes = scratch.payload_bytes();
    s.output_checksum = checksum(y);
  } else {
    const auto params = init_baseline<T>(config, rng);
    auto cache = empty_cache<T>(config);
    cache.reserve(n);
    if (n > 1) {
      Matrix<T> head(n - 1, config.d_model,
                     std::vector<T>(xs.data().begin(), xs.data().begin() + (n - 1) * config.d_model));
      baseline_prefill(head, cache, params);
    }
    Matrix<T> y;
    std::size_t payload = 0;
    times = time_reps(
        [&] {
          cache.truncate(n - 1);
          const auto t0 = clock::now();
          y = baseline_step(x, cache, params, config);
          const auto dt = clock::now() - t0;
          payload = cache.payload_bytes();
          return dt;
        },
        options);
    s.cache_bytes = growing_cache_bytes(config, n);
    s.payload_bytes = payload;
    s.output_checksum = checksum(y);
  }
  s.latency_median_s = median(times);
  s.latency_p90_s = percentile90(times);
  return s;
}

}  // namespace

BenchReport measure_memory(ModelId model, const ModelConfig& config,
                           const std::vector<std::size_t>& lengths) {
  config.validate();
  check_lengths(lengths);
  BenchReport report;
  report.model = model;
  report.config = config;
  for (const auto n : lengths) {
    report.samples.push_back(config.element_width == 32 ? memory_sample<float>(model, config, n)
                                                        : memory_sample<double>(model, config, n));
  }
  return report;
}

BenchReport measure_latency(ModelId model, const ModelConfig& config,
                            const std::vector<std::size_t>& lengths, LatencyOptions options) {
  config.validate();
  check_lengths(lengths);
  if (options.reps < 5) throw ConfigError("bench: at least 5 repetitions are required");
  pin_current_thread();

  BenchReport report;
  report.model = model;
  report.config = config;
  report.repetitions = options.reps;
  report.timer_resolution_s = timer_resolution();
  for (const auto n : lengths) {
    auto s = config.element_width == 32 ? latency_sample<float>(model, config, n, options)
                                        : latency_sample<double>(model, config, n, options);
    if (report.timer_resolution_s > 0.01 * *s.latency_median_s) report.unreliable = true;
    report.samples.push_back(s);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report I/O

namespace {

using nlohmann::ordered_json;

ordered_json optional_json(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

std::optional<double> optional_from(const ordered_json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

ordered_json config_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},       {"d_k", c.d_k},
          {"d_v", c.d_v},               {"capacity", c.capacity},
          {"n_heads", c.n_heads},       {"score_scale", to_string(c.score_scale)},
          {"mv_init", to_string(c.mv_init)}, {"seed", c.seed},
          {"element_width", c.element_width}};
}

ModelConfig config_from(const ordered_json& j) {
  // Reuse the text parser so both config encodings validate identically.
  std::ostringstream os;
  for (const auto& [key, value] : j.items()) {
    os << key << "=" << (value.is_string() ? value.get<std::string>() : value.dump()) << "\n";
  }
  return parse_config(os.str());
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string emit_report(const BenchReport& report, ReportFormat format) {
  if (format == ReportFormat::kCsv) {
    std::ostringstream os;
    os << "model,context_length,cache_bytes,latency_median_s,latency_p90_s,reps\n";
    for (const auto& s : report.samples) {
      os << to_string(report.model) << "," << s.context_length << "," << s.cache_bytes << ","
         << (s.latency_median_s ? format_double(*s.latency_median_s) : "") << ","
         << (s.latency_p90_s ? format_double(*s.latency_p90_s) : "") << ","
         << report.repetitions << "\n";
    }
    return os.str();
  }

  ordered_json samples = ordered_json::array();
  for (const auto& s : report.samples) {
    samples.push_back({{"context_length", s.context_length},
                       {"cache_bytes", s.cache_bytes},
                       {"payload_bytes", s.payload_bytes},
                       {"latency_median_s", optional_json(s.latency_median_s)},
                       {"latency_p90_s", optional_json(s.latency_p90_s)},
                       {"output_checksum", optional_json(s.output_checksum)}});
  }
  ordered_json doc = {{"model", to_string(report.model)},
                      {"config", config_json(report.config)},
                      {"reps", report.repetitions},
                      {"timer_resolution_s", report.timer_resolution_s},
                      {"unreliable", report.unreliable},
                      {"samples", samples}};
  return doc.dump(2) + "\n";
}

BenchReport parse_report_json(const std::string& text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
    BenchReport r;
    r.model = parse_model_id(doc.at("model").get<std::string>());
    r.config = config_from(doc.at("config"));
    r.repetitions = doc.at("reps").get<std::size_t>();
    r.timer_resolution_s = doc.at("timer_resolution_s").get<double>();
    r.unreliable = doc.at("unreliable").get<bool>();
    for (const auto& s : doc.at("samples")) {
      BenchSample b;
      b.context_length = s.at("context_length").get<std::size_t>();
      b.cache_bytes = s.at("cache_bytes").get<std::size_t>();
      b.payload_bytes = s.at("payload_bytes").get<std::size_t>();
      b.latency_median_s = optional_from(s.at("latency_median_s"));
      b.latency_p90_s = optional_from(s.at("latency_p90_s"));
      b.output_checksum = optional_from(s.at("output_checksum"));
      r.samples.push_back(b);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
}

void write_report(const BenchReport& report, ReportFormat format, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << emit_report(report, format);
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace bct
