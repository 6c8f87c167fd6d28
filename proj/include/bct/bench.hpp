#pragma once

// Cache-memory and decode-latency measurements for the bounded layer and
// the growing-cache baseline.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "bct/config.hpp"

namespace bct {

enum class ModelId { kBct, kBaseline };

std::string to_string(ModelId m);
ModelId parse_model_id(const std::string& s);

struct BenchSample {
  std::size_t context_length = 0;
  std::size_t cache_bytes = 0;    // analytic, from state shapes
  std::size_t payload_bytes = 0;  // measured from the live state
  std::optional<double> latency_median_s;
  std::optional<double> latency_p90_s;
  std::optional<double> output_checksum;  // sum of the timed step's outputs

  bool operator==(const BenchSample&) const = default;
};

struct BenchReport {
  ModelId model = ModelId::kBct;
  ModelConfig config;
  std::vector<BenchSample> samples;
  std::size_t repetitions = 0;
  double timer_resolution_s = 0.0;
  bool unreliable = false;  // timer resolution > 1% of some measured median

  bool operator==(const BenchReport&) const = default;
};

// Runs each model to N tokens and records analytic and live cache bytes.
BenchReport measure_memory(ModelId model, const ModelConfig& config,
                           const std::vector<std::size_t>& lengths);

struct LatencyOptions {
  std::size_t reps = 9;
  std::size_t warmup = 3;
};

// Median and p90 latency of the decode step for the token at position N,
// over `reps` timed repetitions after `warmup` discarded ones. Memory fields
// are filled as well. Throws ConfigError if reps < 5 or lengths are not
// strictly increasing.
BenchReport measure_latency(ModelId model, const ModelConfig& config,
                            const std::vector<std::size_t>& lengths, LatencyOptions options = {});

// Smallest observable steady_clock increment, in seconds.
double timer_resolution();

// Sample median (mean of the middle pair for even counts) and nearest-rank
// 90th percentile.
double median(std::vector<double> xs);
double percentile90(std::vector<double> xs);

enum class ReportFormat { kCsv, kJson };

ReportFormat parse_report_format(const std::string& s);

// CSV columns: model,context_length,cache_bytes,latency_median_s,
// latency_p90_s,reps. Missing latencies are empty cells.
inline constexpr std::size_t kCsvColumns = 6;

std::string emit_report(const BenchReport& report, ReportFormat format);
BenchReport parse_report_json(const std::string& text);
void write_report(const BenchReport& report, ReportFormat format, const std::string& path);

// Best-effort pin of the calling thread to the CPU it is running on.
bool pin_current_thread();

}  // namespace bct
