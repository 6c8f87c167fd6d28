#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "bct/bench.hpp"
#include "bct/layer.hpp"

using bct::ModelConfig;
using bct::ModelId;

namespace {

ModelConfig paper_memory_config() {
  ModelConfig c;
  c.d_model = 32;
  c.d_k = 32;
  c.d_v = 32;
  c.capacity = 256;
  c.element_width = 32;
  return c;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.d_k = 4;
  c.d_v = 4;
  c.capacity = 8;
  c.element_width = 32;
  c.seed = 3;
  return c;
}

std::size_t count_fields(const std::string& line) {
  return static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
}

}  // namespace

TEST_CASE("measure_memory: bounded cache is flat, baseline doubles") {
  const auto cfg = paper_memory_config();
  const std::vector<std::size_t> lengths = {1, 128, 256, 512, 1024};
  const auto bct_report = bct::measure_memory(ModelId::kBct, cfg, lengths);
  const auto base_report = bct::measure_memory(ModelId::kBaseline, cfg, lengths);
  for (const auto& s : bct_report.samples) {
    CHECK(s.cache_bytes == 65536);
    CHECK(s.payload_bytes == s.cache_bytes);
    CHECK(!s.latency_median_s);
  }
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const auto& s = base_report.samples[i];
    CHECK(s.cache_bytes == lengths[i] * 256);
    CHECK(s.payload_bytes == s.cache_bytes);
  }
  CHECK(base_report.samples[3].cache_bytes == 2 * base_report.samples[2].cache_bytes);
  CHECK(bct_report.samples.back().cache_bytes == bct_report.samples.front().cache_bytes);
  CHECK(bct::bounded_cache_bytes(cfg) == 65536);
}

TEST_CASE("measure_latency: argument checks and deterministic checksums") {
  const auto cfg = tiny_config();
  CHECK_THROWS_AS(bct::measure_latency(ModelId::kBct, cfg, {4, 8}, {.reps = 4}), bct::ConfigError);
  CHECK_THROWS_AS(bct::measure_latency(ModelId::kBct, cfg, {8, 4}), bct::ConfigError);
  CHECK_THROWS_AS(bct::measure_latency(ModelId::kBct, cfg, {4, 4}), bct::ConfigError);
  CHECK_THROWS_AS(bct::measure_latency(ModelId::kBct, cfg, {0}), bct::ConfigError);

  for (auto model : {ModelId::kBct, ModelId::kBaseline}) {
    const auto a = bct::measure_latency(model, cfg, {4, 16}, {.reps = 5, .warmup = 1});
    const auto b = bct::measure_latency(model, cfg, {4, 16}, {.reps = 5, .warmup = 1});
    REQUIRE(a.samples.size() == 2);
    CHECK(a.repetitions == 5);
    for (std::size_t i = 0; i < 2; ++i) {
      REQUIRE(a.samples[i].latency_median_s);
      CHECK(*a.samples[i].latency_median_s > 0.0);
      CHECK(*a.samples[i].latency_p90_s >= *a.samples[i].latency_median_s);
      CHECK(a.samples[i].output_checksum == b.samples[i].output_checksum);
      CHECK(a.samples[i].cache_bytes == b.samples[i].cache_bytes);
    }
  }
}

TEST_CASE("report JSON round trip and CSV shape") {
  bct::BenchReport r;
  r.model = ModelId::kBaseline;
  r.config = tiny_config();
  r.repetitions = 9;
  r.timer_resolution_s = 1e-9;
  r.samples.push_back({16, 2560, 2560, 1.25e-6, 2.5e-6, 0.1});
  r.samples.push_back({32, 5120, 5120, std::nullopt, std::nullopt, std::nullopt});
  CHECK(bct::parse_report_json(bct::emit_report(r, bct::ReportFormat::kJson)) == r);

  std::istringstream csv(bct::emit_report(r, bct::ReportFormat::kCsv));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "model,context_length,cache_bytes,latency_median_s,latency_p90_s,reps");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    CHECK(count_fields(line) == bct::kCsvColumns);
    ++rows;
  }
  CHECK(rows == 2);

  bct::BenchReport empty;
  std::istringstream only_header(bct::emit_report(empty, bct::ReportFormat::kCsv));
  std::getline(only_header, line);
  CHECK(count_fields(line) == bct::kCsvColumns);
  CHECK(!std::getline(only_header, line));
  CHECK(bct::parse_report_json(bct::emit_report(empty, bct::ReportFormat::kJson)) == empty);

  CHECK_THROWS_AS(bct::parse_report_json("{"), bct::ConfigError);
  CHECK_THROWS_AS(bct::parse_report_format("xml"), bct::ConfigError);
}

TEST_CASE("write_report: unwritable path names the path") {
  const std::string path = "/nonexistent/dir/report.csv";
  try {
    bct::write_report(bct::BenchReport{}, bct::ReportFormat::kCsv, path);
    FAIL("expected IoError");
  } catch (const bct::IoError& e) {
    CHECK(std::string(e.what()).find(path) != std::string::npos);
  }
  const auto ok = std::filesystem::temp_directory_path() / "bct_test_report.json";
  bct::write_report(bct::BenchReport{}, bct::ReportFormat::kJson, ok.string());
  CHECK(std::filesystem::file_size(ok) > 0);
  std::filesystem::remove(ok);
}

TEST_CASE("median and nearest-rank p90") {
  CHECK(bct::median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(bct::median({4.0, 1.0, 2.0, 3.0}) == 2.5);
  std::vector<double> ten;
  for (int i = 1; i <= 10; ++i) ten.push_back(double(11 - i));
  CHECK(bct::percentile90(ten) == 9.0);
  CHECK(bct::percentile90({5.0}) == 5.0);
  CHECK(bct::timer_resolution() > 0.0);
}
