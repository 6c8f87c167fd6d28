// bct: command-line front end.
//
//   bct verify [--seed U64]
//   bct bench  [--config PATH] [--out DIR] [--format csv|json] [--lengths a,b,..] [--reps N]
//   bct train  [--config PATH] [--out DIR] [--task copy|assoc_recall] [--steps N] [--lr X] ...
//   bct demo   [--config PATH] [--tokens N] [--zero-input]
//
// Exit codes: 0 success, 1 unexpected error, 2 invalid arguments or config,
// 3 invariant failure, 4 I/O failure, 5 training diverged.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bct/bench.hpp"
#include "bct/config.hpp"
#include "bct/serialize.hpp"
#include "bct/training.hpp"
#include "bct/verify.hpp"

namespace {

enum ExitCode : int {
  kOk = 0,
  kUnexpected = 1,
  kInvalid = 2,
  kInvariantFailure = 3,
  kIoFailure = 4,
  kDiverged = 5,
};

struct CommonOptions {
  std::string config_path;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::string format = "csv";
  int verbosity = 0;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool with_out) {
  cmd->add_option("--config", opts.config_path, "key=value model config file")
      ->check(CLI::ExistingFile);
  if (with_out) cmd->add_option("--out", opts.out, "output directory");
  cmd->add_option("--seed", opts.seed, "override the config seed");
  cmd->add_flag("-v,--verbose", opts.verbosity, "more output");
}

bct::ModelConfig resolve_config(const CommonOptions& opts, bct::ModelConfig defaults) {
  bct::ModelConfig cfg = opts.config_path.empty() ? defaults : bct::load_config(opts.config_path);
  bct::apply_env_overrides(cfg);
  if (opts.seed) cfg.seed = *opts.seed;
  cfg.validate();
  return cfg;
}

std::filesystem::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw bct::IoError("cannot create output directory '" + dir + "': " + ec.message());
  return dir;
}

std::vector<std::size_t> parse_lengths(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw bct::ConfigError("--lengths: '" + item + "' is not a positive integer");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_verify(const CommonOptions& opts) {
  const std::uint64_t seed = opts.seed.value_or(20240611);
  if (opts.verbosity) std::cout << "seed " << seed << "\n";
  const auto report = bct::run_invariant_suite(seed);
  bct::print_verify_table(std::cout, report);
  return report.all_passed() ? kOk : kInvariantFailure;
}

bct::ModelConfig bench_defaults() {
  bct::ModelConfig c;
  c.d_model = 128;
  c.d_k = 32;
  c.d_v = 32;
  c.capacity = 256;
  c.element_width = 32;
  return c;
}

int cmd_bench(const CommonOptions& opts, const std::string& lengths_text, std::size_t reps) {
  const auto cfg = resolve_config(opts, bench_defaults());
  const auto format = bct::parse_report_format(opts.format);
  std::vector<std::size_t> lengths;
  if (lengths_text.empty()) {
    const std::size_t m = cfg.capacity;
    if (m / 2 >= 1) lengths.push_back(m / 2);
    lengths.insert(lengths.end(), {m, 2 * m, 4 * m});
  } else {
    lengths = parse_lengths(lengths_text);
  }
  const auto dir = ensure_dir(opts.out);
  const char* ext = format == bct::ReportFormat::kCsv ? ".csv" : ".json";

  bool unreliable = false;
  for (const auto model : {bct::ModelId::kBct, bct::ModelId::kBaseline}) {
    auto report = bct::measure_latency(model, cfg, lengths, {.reps = reps, .warmup = 3});
    const auto memory = bct::measure_memory(model, cfg, lengths);
    for (std::size_t i = 0; i < report.samples.size(); ++i) {
      if (report.samples[i].payload_bytes != memory.samples[i].payload_bytes ||
          report.samples[i].cache_bytes != memory.samples[i].cache_bytes) {
        std::cerr << "memory mismatch for " << bct::to_string(model) << " at N="
                  << lengths[i] << "\n";
        return kInvariantFailure;
      }
    }
    unreliable = unreliable || report.unreliable;
    const auto path = dir / (bct::to_string(model) + ext);
    bct::write_report(report, format, path.string());
    if (opts.verbosity) std::cout << bct::emit_report(report, bct::ReportFormat::kCsv);
    std::cout << "wrote " << path.string() << "\n";
  }
  if (unreliable) std::cerr << "warning: timer resolution exceeds 1% of a measured latency\n";
  return kOk;
}

struct TrainFlags {
  std::string task = "copy";
  std::size_t vocab = 16;
  std::size_t seq_len = 16;
  std::size_t batch = 64;
  std::size_t steps = 2000;
  double lr = 0.5;
};

bct::ModelConfig train_defaults() {
  bct::ModelConfig c;
  c.d_k = 16;
  c.d_v = 32;
  c.capacity = 32;
  c.element_width = 64;
  return c;
}

int cmd_train(const CommonOptions& opts, const TrainFlags& flags) {
  auto cfg = resolve_config(opts, train_defaults());
  const auto kind = bct::parse_task_kind(flags.task);
  const auto width = bct::task_d_model(kind, flags.vocab, flags.seq_len);
  if (cfg.d_model != width) {
    if (opts.verbosity) std::cerr << "d_model set to task embedding width " << width << "\n";
    cfg.d_model = width;
  }
  const auto dir = ensure_dir(opts.out);

  bct::Rng rng(cfg.seed);
  auto task_rng = rng.split();
  const auto task = bct::gen_task(kind, flags.batch, flags.seq_len, flags.vocab, cfg.capacity, task_rng);
  const auto result = bct::train_loop(cfg, task, {.steps = flags.steps, .lr = flags.lr}, rng);

  const auto curve_path = dir / "curve.csv";
  bct::write_curve_csv(curve_path.string(), result.curve);
  std::cout << "wrote " << curve_path.string() << "\n";
  if (result.diverged_at) {
    std::cerr << "training diverged at step " << *result.diverged_at << "\n";
    return kDiverged;
  }

  auto snap = bct::to_snapshot(result.params);
  snap.kind = bct::SnapshotKind::kCheckpoint;
  snap.tensors.push_back(result.classifier);
  snap.tensors.push_back(result.bias);
  const auto ckpt_path = dir / "checkpoint.bin";
  bct::save_snapshot(ckpt_path.string(), snap);
  bct::save_config(cfg, (dir / "model.cfg").string());
  std::cout << "wrote " << ckpt_path.string() << "\n";
  std::cout << "final loss " << result.curve.back().loss << ", held-out accuracy "
            << result.heldout_accuracy << " (chance " << 1.0 / static_cast<double>(flags.vocab)
            << ")\n";
  return kOk;
}

bct::ModelConfig demo_defaults() {
  bct::ModelConfig c;
  c.d_model = 3;
  c.d_k = 2;
  c.d_v = 2;
  c.capacity = 4;
  c.element_width = 64;
  return c;
}

int cmd_demo(const CommonOptions& opts, std::size_t tokens, bool zero_input) {
  const auto cfg = resolve_config(opts, demo_defaults());
  if (cfg.capacity > 8 || cfg.d_model > 4 || cfg.d_k > 4 || cfg.d_v > 4) {
    throw bct::ConfigError("demo needs capacity <= 8 and d_model, d_k, d_v <= 4");
  }
  if (tokens < 1) throw bct::ConfigError("--tokens must be >= 1");
  bct::Rng rng(cfg.seed);
  auto init = bct::init_layer<double>(cfg, rng);
  const auto xs = zero_input ? bct::Matrix<double>(tokens, cfg.d_model)
                             : bct::gaussian_matrix<double>(tokens, cfg.d_model, 1.0, rng);
  const auto transcript = bct::run_demo(cfg, xs, init.params, init.state);
  std::cout << transcript.text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bounded-cache attention: verify, train, bench, demo"};
  app.require_subcommand(1);

  CommonOptions opts;
  std::string lengths;
  std::size_t reps = 9;
  TrainFlags train;
  std::size_t demo_tokens = 3;
  bool zero_input = false;

  auto* verify = app.add_subcommand("verify", "run the invariant suite");
  verify->add_option("--seed", opts.seed, "instance seed");
  verify->add_flag("-v,--verbose", opts.verbosity, "more output");

  auto* bench = app.add_subcommand("bench", "memory and decode-latency reports");
  add_common(bench, opts, true);
  bench->add_option("--format", opts.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  bench->add_option("--lengths", lengths, "comma-separated context lengths");
  bench->add_option("--reps", reps, "timed repetitions per length (>= 5)");

  auto* train_cmd = app.add_subcommand("train", "SGD on a synthetic task");
  add_common(train_cmd, opts, true);
  train_cmd->add_option("--task", train.task, "copy or assoc_recall")
      ->check(CLI::IsMember({"copy", "assoc_recall"}));
  train_cmd->add_option("--vocab", train.vocab, "symbol count");
  train_cmd->add_option("--seq-len", train.seq_len, "tokens per sequence");
  train_cmd->add_option("--batch", train.batch, "training sequences");
  train_cmd->add_option("--steps", train.steps, "SGD steps");
  train_cmd->add_option("--lr", train.lr, "learning rate");

  auto* demo = app.add_subcommand("demo", "print the write path step by step");
  add_common(demo, opts, false);
  demo->add_option("--tokens", demo_tokens, "sequence length");
  demo->add_flag("--zero-input", zero_input, "feed all-zero tokens");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*verify) return cmd_verify(opts);
    if (*bench) return cmd_bench(opts, lengths, reps);
    if (*train_cmd) return cmd_train(opts, train);
    if (*demo) return cmd_demo(opts, demo_tokens, zero_input);
  } catch (const bct::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const bct::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return kUnexpected;
  }
  return kUnexpected;
}
