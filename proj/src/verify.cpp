#include "bct/verify.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "bct/baseline.hpp"
#include "bct/training.hpp"

namespace bct {

bool VerifyReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

namespace {

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

CheckResult bounded(const std::string& name, double measured, double limit) {
  return {name, measured < limit, sci(measured) + " < " + sci(limit)};
}

ModelConfig random_config(Rng& rng, std::size_t max_capacity) {
  ModelConfig c;
  c.d_model = 2 + rng.uniform_int(15);
  c.d_k = 1 + rng.uniform_int(8);
  c.d_v = 1 + rng.uniform_int(8);
  c.capacity = 1 + rng.uniform_int(max_capacity);
  c.n_heads = 1 + rng.uniform_int(2);
  c.score_scale = rng.uniform_int(2) ? ScoreScale::kInvSqrtDk : ScoreScale::kNone;
  c.mv_init = rng.uniform_int(2) ? MvInit::kGaussian : MvInit::kZeros;
  c.seed = rng.next_u64();
  return c;
}

CheckResult softmax_normalization(Rng& rng) {
  double worst = 0.0;
  bool positive = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(64);
    const std::size_t dk = 1 + rng.uniform_int(16);
    const auto wq = gaussian_matrix<double>(1, dk, 3.0, rng);
    const auto mk = gaussian_matrix<double>(m, dk, 1.0, rng);
    const auto ww = write_weights(wq, mk, 1.0);
    double sum = 0.0;
    for (double w : ww.data()) {
      sum += w;
      positive = positive && w > 0.0;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  auto r = bounded("softmax normalization |sum-1|", worst, 1e-6);
  if (!positive) {
    r.passed = false;
    r.detail += " (non-positive weight)";
  }
  return r;
}

template <typename T>
CheckResult sequential_vs_parallel(Rng& rng, double limit) {
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto cfg = random_config(rng, 64);
    cfg.element_width = sizeof(T) * 8;
    Rng local(cfg.seed);
    auto init = init_layer<T>(cfg, local);
    const std::size_t n = 1 + rng.uniform_int(128);
    const auto xs = gaussian_matrix<T>(n, cfg.d_model, 1.0, rng);
    const auto seq = update_sequence(xs, init.state, init.params, cfg);
    const auto par = update_parallel(xs, init.state, init.params, cfg,
                                     {.chunk_tokens = 1 + rng.uniform_int(16), .threads = 2});
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      worst = std::max(worst, max_rel_diff(par.heads[h].MV, seq.heads[h].MV));
    }
  }
  return bounded("sequential == parallel (" + std::to_string(8 * sizeof(T)) + "-bit)", worst,
                 limit);
}

CheckResult order_invariance(Rng& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto cfg = random_config(rng, 32);
    Rng local(cfg.seed);
    auto init = init_layer<double>(cfg, local);
    const std::size_t n = 2 + rng.uniform_int(40);
    const auto xs = gaussian_matrix<double>(n, cfg.d_model, 1.0, rng);
    // Reverse-then-rotate permutation.
    Matrix<double> shuffled(n, cfg.d_model);
    const std::size_t shift = rng.uniform_int(n);
    for (std::size_t t = 0; t < n; ++t) {
      const auto src = xs.row(n - 1 - ((t + shift) % n));
      std::copy(src.begin(), src.end(), shuffled.row(t).begin());
    }
    const auto a = update_sequence(xs, init.state, init.params, cfg);
    const auto b = update_sequence(shuffled, init.state, init.params, cfg);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      worst = std::max(worst, max_rel_diff(b.heads[h].MV, a.heads[h].MV));
    }
  }
  return bounded("write-path order invariance", worst, 1e-10);
}

CheckResult causality(Rng& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto cfg = random_config(rng, 16);
    Rng local(cfg.seed);
    auto init = init_layer<double>(cfg, local);
    const std::size_t n = 2 + rng.uniform_int(12);
    const auto xs = gaussian_matrix<double>(n, cfg.d_model, 1.0, rng);
    const auto full = layer_forward(xs, init.params, init.state, cfg).ys;
    for (std::size_t t = 1; t <= n; ++t) {
      Matrix<double> prefix(t, cfg.d_model,
                            std::vector<double>(xs.data().begin(), xs.data().begin() + t * cfg.d_model));
      const auto part = layer_forward(prefix, init.params, init.state, cfg).ys;
      worst = std::max(worst, max_abs_diff(part.row_copy(t - 1), full.row_copy(t - 1)));
    }
  }
  return bounded("layer causality (prefix)", worst, 1e-10);
}

CheckResult bounded_memory(Rng& rng) {
  const auto cfg = random_config(rng, 64);
  Rng local(cfg.seed);
  auto init = init_layer<double>(cfg, local);
  const auto one = update_sequence(gaussian_matrix<double>(1, cfg.d_model, 1.0, rng), init.state,
                                   init.params, cfg);
  const auto many = update_sequence(gaussian_matrix<double>(257, cfg.d_model, 1.0, rng), init.state,
                                    init.params, cfg);
  const bool ok = one.payload_bytes() == many.payload_bytes() &&
                  many.payload_bytes() == bounded_cache_bytes(cfg);
  return {"bounded cache bytes (N=1 vs N=257)", ok,
          std::to_string(one.payload_bytes()) + " == " + std::to_string(many.payload_bytes())};
}

CheckResult gradients(Rng& rng) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.d_k = 8;
  cfg.d_v = 8;
  cfg.capacity = 8;
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    worst = std::max(worst, grad_check(cfg, rng, 1e-5, 6).worst_rel());
  }
  return bounded("analytic vs finite-difference gradients", worst, 1e-4);
}

CheckResult baseline_equivalence(Rng& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto cfg = random_config(rng, 8);
    Rng local(cfg.seed);
    const auto params = init_baseline<double>(cfg, local);
    const std::size_t n = 1 + rng.uniform_int(32);
    const auto xs = gaussian_matrix<double>(n, cfg.d_model, 1.0, rng);
    worst = std::max(worst, max_abs_diff(baseline_decode(xs, params, cfg),
                                         causal_attention(xs, params, cfg)));
  }
  return bounded("baseline incremental == one-shot", worst, 1e-10);
}

}  // namespace

VerifyReport run_invariant_suite(std::uint64_t seed) {
  Rng rng(seed);
  VerifyReport report;
  auto run = [&](auto&& check) {
    try {
      report.checks.push_back(check());
    } catch (const Error& e) {
      report.checks.push_back({"(check raised)", false, e.what()});
    }
  };
  run([&] { return softmax_normalization(rng); });
  run([&] { return sequential_vs_parallel<double>(rng, 1e-10); });
  run([&] { return sequential_vs_parallel<float>(rng, 1e-6); });
  run([&] { return order_invariance(rng); });
  run([&] { return causality(rng); });
  run([&] { return bounded_memory(rng); });
  run([&] { return gradients(rng); });
  run([&] { return baseline_equivalence(rng); });
  return report;
}

void print_verify_table(std::ostream& os, const VerifyReport& report) {
  for (const auto& c : report.checks) {
    os << (c.passed ? "PASS  " : "FAIL  ") << std::left << std::setw(44) << c.name << c.detail
       << "\n";
  }
  os << (report.all_passed() ? "all invariants hold\n" : "invariant failure\n");
}

// ---------------------------------------------------------------------------
// Demo

namespace {

void print_row(std::ostream& os, const char* label, const Matrix<double>& m) {
  os << "    " << std::left << std::setw(8) << label << "[";
  for (std::size_t i = 0; i < m.size(); ++i) {
    os << (i ? ", " : "") << std::showpos << std::fixed << std::setprecision(4) << m[i]
       << std::noshowpos;
  }
  os << "]\n";
}

void print_matrix(std::ostream& os, const char* label, const Matrix<double>& m,
                  std::size_t highlight_row = static_cast<std::size_t>(-1)) {
  os << "    " << label << "\n";
  for (std::size_t r = 0; r < m.rows(); ++r) {
    os << (r == highlight_row ? "   >  " : "      ") << "slot " << r << " [";
    for (std::size_t c = 0; c < m.cols(); ++c) {
      os << (c ? ", " : "") << std::showpos << std::fixed << std::setprecision(4) << m(r, c)
         << std::noshowpos;
    }
    os << "]\n";
  }
}

}  // namespace

DemoTranscript run_demo(const ModelConfig& config, const Matrix<double>& xs,
                        const LayerParams<double>& params, CacheState<double> initial) {
  if (config.capacity > 8 || config.d_model > 4 || config.d_k > 4 || config.d_v > 4) {
    throw ConfigError("demo needs capacity <= 8 and d_model, d_k, d_v <= 4");
  }
  check_params(params, config);
  if (xs.cols() != config.d_model || xs.rows() == 0) {
    throw DimensionError("demo: input is " + xs.shape_string());
  }
  std::ostringstream os;
  const double factor = config.score_factor();
  CacheState<double> state = std::move(initial);

  for (std::size_t h = 0; h < config.n_heads; ++h) {
    os << "head " << h << "\n";
    print_matrix(os, "MK (fixed keys)", state.heads[h].MK);
    print_matrix(os, "MV_0", state.heads[h].MV);
  }
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    const auto x = xs.row_copy(t);
    os << "\ntoken " << t + 1 << "\n";
    print_row(os, "x", x);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      if (config.n_heads > 1) os << "  head " << h << "\n";
      const auto proj = project_write(x, params.heads[h]);
      auto scores = matmul_bt(proj.wq, state.heads[h].MK);
      scale_inplace(scores, factor);
      const auto ww = write_weights(proj.wq, state.heads[h].MK, factor);
      const auto delta = outer(ww, proj.wv);
      const auto top = static_cast<std::size_t>(
          std::max_element(ww.data().begin(), ww.data().end()) - ww.data().begin());
      os << "  1. project\n";
      print_row(os, "wq", proj.wq);
      print_row(os, "wv", proj.wv);
      os << "  2. address\n";
      print_row(os, "scores", scores);
      print_row(os, "ww", ww);
      os << "  3. update (MV += ww^T wv)\n";
      print_matrix(os, "delta", delta, top);
      add_inplace(state.heads[h].MV, delta);
      os << "  4. store\n";
      print_matrix(os, "MV", state.heads[h].MV, top);
    }
    ++state.tokens_seen;
  }
  return {os.str(), std::move(state)};
}

}  // namespace bct
