#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>

#include "bct/training.hpp"
#include "oracles.hpp"

using bct::Matrix;
using bct::ModelConfig;
using bct::Rng;

namespace {

ModelConfig small_config(std::size_t d_model, std::size_t d_k, std::size_t d_v, std::size_t m) {
  ModelConfig c;
  c.d_model = d_model;
  c.d_k = d_k;
  c.d_v = d_v;
  c.capacity = m;
  return c;
}

std::vector<oracle::Mat*> tensors_of(oracle::Layer& l) {
  std::vector<oracle::Mat*> out;
  for (auto& h : l.heads) {
    out.push_back(&h.W_wq);
    out.push_back(&h.W_wv);
    out.push_back(&h.W_rq);
    out.push_back(&h.MK);
  }
  out.push_back(&l.W_o);
  return out;
}

// Central differences of oracle::objective, one tensor at a time, in the
// library's tensor order.
std::vector<oracle::Mat> oracle_gradients(oracle::Layer l, const oracle::Mat& xs,
                                          const std::vector<oracle::Mat>& mv0, const oracle::Mat& g,
                                          double eps) {
  std::vector<oracle::Mat> out;
  for (auto* m : tensors_of(l)) {
    oracle::Mat grad(m->size(), oracle::Vec(m->empty() ? 0 : (*m)[0].size()));
    for (std::size_t i = 0; i < m->size(); ++i)
      for (std::size_t j = 0; j < (*m)[i].size(); ++j) {
        const double keep = (*m)[i][j];
        (*m)[i][j] = keep + eps;
        const double up = oracle::objective(l, xs, mv0, g);
        (*m)[i][j] = keep - eps;
        const double down = oracle::objective(l, xs, mv0, g);
        (*m)[i][j] = keep;
        grad[i][j] = (up - down) / (2 * eps);
      }
    out.push_back(std::move(grad));
  }
  return out;
}

std::vector<oracle::Mat> as_list(const bct::Gradients<double>& g) {
  std::vector<oracle::Mat> out;
  g.for_each_tensor([&](const std::string&, const Matrix<double>& m) { out.push_back(oracle::from(m)); });
  return out;
}

double max_rel(const oracle::Mat& a, const oracle::Mat& b) {
  double out = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      const double denom = std::max({std::abs(a[i][j]), std::abs(b[i][j]), 1e-8});
      out = std::max(out, std::abs(a[i][j] - b[i][j]) / denom);
    }
  return out;
}

}  // namespace

TEST_CASE("layer_backward: zero upstream gives zero gradients") {
  const auto cfg = small_config(5, 3, 4, 6);
  Rng rng(51);
  const auto init = bct::init_layer<double>(cfg, rng);
  const auto xs = bct::gaussian_matrix<double>(4, 5, 1.0, rng);
  const auto g = bct::layer_backward(xs, init.params, cfg, Matrix<double>(4, 5));
  g.for_each_tensor([](const std::string& name, const Matrix<double>& m) {
    INFO(name);
    CHECK(bct::max_abs(m) == 0.0);
  });
}

TEST_CASE("layer_backward: hand-derived W_wv gradient for a single token") {
  // N=1, MV_0=0: <g, y> = c * x W_wv (g W_o^T)^T with c = sum_i rw_i ww_i,
  // so dL/dW_wv = c x^T (g W_o^T).
  const auto cfg = small_config(2, 2, 2, 2);
  Rng rng(52);
  const auto init = bct::init_layer<double>(cfg, rng);
  const auto x = bct::gaussian_matrix<double>(1, 2, 1.0, rng);
  const auto g = bct::gaussian_matrix<double>(1, 2, 1.0, rng);

  const auto l = oracle::from(init.params, cfg);
  const auto xv = oracle::from(x)[0];
  const auto ww = oracle::softmax(oracle::scores(oracle::vecmat(xv, l.heads[0].W_wq), l.heads[0].MK, 1.0));
  const auto rw = oracle::softmax(oracle::scores(oracle::vecmat(xv, l.heads[0].W_rq), l.heads[0].MK, 1.0));
  const double c = oracle::dot(rw, ww);
  oracle::Vec gw(2, 0.0);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 2; ++k) gw[j] += g[k] * l.W_o[j][k];
  auto want = oracle::outer(xv, gw);
  for (auto& r : want)
    for (auto& v : r) v *= c;

  const auto grads = bct::layer_backward(x, init.params, cfg, g);
  CHECK(oracle::max_abs_diff(grads.heads[0].W_wv, want) < 1e-14);
}

TEST_CASE("layer_backward matches independent finite differences") {
  Rng rng(53);
  for (int trial = 0; trial < 3; ++trial) {
    auto cfg = small_config(4, 3, 2, 3);
    cfg.n_heads = 1 + trial % 2;
    cfg.score_scale = trial == 2 ? bct::ScoreScale::kInvSqrtDk : bct::ScoreScale::kNone;
    const auto init = bct::init_layer<double>(cfg, rng);
    const auto xs = bct::gaussian_matrix<double>(4, cfg.d_model, 1.0, rng);
    const auto g = bct::gaussian_matrix<double>(4, cfg.d_model, 1.0, rng);
    std::vector<Matrix<double>> mv0;
    std::vector<oracle::Mat> mv0_oracle;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      mv0.push_back(bct::gaussian_matrix<double>(cfg.capacity, cfg.d_v, 0.5, rng));
      mv0_oracle.push_back(oracle::from(mv0.back()));
    }

    const auto analytic = as_list(bct::layer_backward(xs, init.params, cfg, g, mv0));
    const auto numeric =
        oracle_gradients(oracle::from(init.params, cfg), oracle::from(xs), mv0_oracle, oracle::from(g), 1e-5);
    REQUIRE(analytic.size() == numeric.size());
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      INFO("trial " << trial << " tensor " << i);
      CHECK(max_rel(analytic[i], numeric[i]) < 1e-4);
    }
  }
}

TEST_CASE("grad_check: zero parameters and the default configuration") {
  auto cfg = small_config(4, 2, 2, 3);
  Rng rng(54);
  auto params = bct::zeros_like(bct::init_layer<double>(cfg, rng).params);
  const auto xs = bct::gaussian_matrix<double>(3, 4, 1.0, rng);
  const auto g = bct::gaussian_matrix<double>(3, 4, 1.0, rng);
  const auto zero = bct::grad_check_instance(xs, params, cfg, g, {}, 1e-5);
  CHECK(zero.worst_abs() < 1e-10);

  const auto report = bct::grad_check(ModelConfig{}, rng, 1e-5);
  CHECK(report.tensors.size() == 5);
  CHECK(report.worst_rel() < 1e-4);
}

TEST_CASE("grad_check: error shrinks quadratically with epsilon") {
  const auto cfg = small_config(6, 3, 3, 4);
  Rng rng(55);
  const auto init = bct::init_layer<double>(cfg, rng);
  const auto xs = bct::gaussian_matrix<double>(5, 6, 1.0, rng);
  const auto g = bct::gaussian_matrix<double>(5, 6, 1.0, rng);
  const double coarse = bct::grad_check_instance(xs, init.params, cfg, g, {}, 1e-2).worst_abs();
  const double fine = bct::grad_check_instance(xs, init.params, cfg, g, {}, 1e-3).worst_abs();
  INFO("coarse " << coarse << " fine " << fine);
  CHECK(coarse / fine > 50.0);
  CHECK(coarse / fine < 200.0);
}

TEST_CASE("gen_task: copy sequences") {
  Rng rng(56);
  const std::size_t vocab = 5, n = 7, batch = 400;
  const auto task = bct::gen_task(bct::TaskKind::kCopy, batch, n, vocab, 4, rng);
  CHECK(task.d_model == vocab + n);
  CHECK(task.batch() == batch);
  std::map<int, std::size_t> counts;
  for (std::size_t b = 0; b < batch; ++b) {
    CHECK(task.targets[b][0] == -1);
    for (std::size_t t = 0; t < n; ++t) {
      const int sym = task.tokens[b][t];
      ++counts[sym];
      CHECK(task.inputs[b](t, static_cast<std::size_t>(sym)) == 1.0);
      CHECK(task.inputs[b](t, vocab + t) == 1.0);
      double row_sum = 0.0;
      for (double v : task.inputs[b].row(t)) row_sum += v;
      CHECK(row_sum == 2.0);
      if (t >= 1) CHECK(task.targets[b][t] == task.tokens[b][t - 1]);
    }
  }
  const double total = double(batch * n), p = 1.0 / vocab;
  const double expected = total * p, sigma = std::sqrt(total * p * (1 - p));
  REQUIRE(counts.size() == vocab);
  for (const auto& [sym, count] : counts) CHECK(std::abs(double(count) - expected) < 3 * sigma);

  const auto offset = bct::gen_task(bct::TaskKind::kCopy, 3, n, vocab, 4, rng, {.copy_offset = 3});
  for (std::size_t t = 3; t < n; ++t) CHECK(offset.targets[0][t] == offset.tokens[0][t - 3]);
  CHECK(offset.targets[0][2] == -1);
}

TEST_CASE("gen_task: associative recall sequences") {
  Rng rng(57);
  const std::size_t vocab = 6, n = 8;
  const auto task = bct::gen_task(bct::TaskKind::kAssocRecall, 50, n, vocab, 4, rng);
  CHECK(task.d_model == 2 * vocab + 1);
  for (std::size_t b = 0; b < 50; ++b) {
    std::map<int, int> pairs;
    for (std::size_t t = 0; t < n / 2; ++t) {
      const auto& x = task.inputs[b];
      int value = -1;
      for (std::size_t v = 0; v < vocab; ++v)
        if (x(t, vocab + v) == 1.0) value = int(v);
      CHECK(pairs.count(task.tokens[b][t]) == 0);
      pairs[task.tokens[b][t]] = value;
      CHECK(task.targets[b][t] == -1);
      CHECK(x(t, 2 * vocab) == 0.0);
    }
    for (std::size_t t = n / 2; t < n; ++t) {
      REQUIRE(pairs.count(task.tokens[b][t]) == 1);
      CHECK(task.targets[b][t] == pairs[task.tokens[b][t]]);
      CHECK(task.inputs[b](t, 2 * vocab) == 1.0);
    }
  }
}

TEST_CASE("gen_task: invalid requests") {
  Rng rng(58);
  CHECK_THROWS_AS(bct::gen_task(bct::TaskKind::kCopy, 1, 1, 4, 4, rng), bct::ConfigError);
  CHECK_THROWS_AS(bct::gen_task(bct::TaskKind::kCopy, 1, 4, 1, 4, rng), bct::ConfigError);
  CHECK_THROWS_AS(bct::gen_task(bct::TaskKind::kAssocRecall, 1, 5, 4, 4, rng), bct::ConfigError);
  CHECK_THROWS_AS(bct::gen_task(bct::TaskKind::kAssocRecall, 1, 10, 8, 4, rng), bct::ConfigError);
  CHECK_THROWS_AS(bct::gen_task(bct::TaskKind::kAssocRecall, 1, 10, 4, 8, rng), bct::ConfigError);
  CHECK_THROWS_AS(bct::parse_task_kind("sort"), bct::ConfigError);
  CHECK(bct::parse_task_kind(bct::to_string(bct::TaskKind::kAssocRecall)) == bct::TaskKind::kAssocRecall);
}

TEST_CASE("train_loop: zero learning rate, determinism, initial loss") {
  Rng data(59);
  const auto task = bct::gen_task(bct::TaskKind::kCopy, 8, 6, 8, 8, data);
  auto cfg = small_config(task.d_model, 4, 4, 8);

  Rng a(60);
  const auto frozen = bct::train_loop(cfg, task, {.steps = 4, .lr = 0.0, .heldout_batch = 8}, a);
  REQUIRE(frozen.curve.size() == 4);
  for (const auto& r : frozen.curve) CHECK(r.loss == frozen.curve[0].loss);
  CHECK(std::abs(frozen.curve[0].loss - std::log(8.0)) < 0.1 * std::log(8.0));

  Rng b1(61), b2(61);
  const auto r1 = bct::train_loop(cfg, task, {.steps = 5, .lr = 0.3, .heldout_batch = 8}, b1);
  const auto r2 = bct::train_loop(cfg, task, {.steps = 5, .lr = 0.3, .heldout_batch = 8}, b2);
  REQUIRE(r1.curve.size() == r2.curve.size());
  for (std::size_t i = 0; i < r1.curve.size(); ++i) CHECK(r1.curve[i].loss == r2.curve[i].loss);
  CHECK(r1.params == r2.params);
  CHECK(r1.heldout_accuracy == r2.heldout_accuracy);
}

TEST_CASE("train_loop: learns a small copy task") {
  Rng data(62);
  const std::size_t vocab = 4;
  const auto task = bct::gen_task(bct::TaskKind::kCopy, 32, 5, vocab, 8, data);
  const auto cfg = small_config(task.d_model, 8, 8, 8);
  Rng rng(63);
  const auto result = bct::train_loop(cfg, task, {.steps = 400, .lr = 0.5, .heldout_batch = 64}, rng);
  INFO("final loss " << result.curve.back().loss << " held-out accuracy " << result.heldout_accuracy);
  CHECK(!result.diverged_at);
  CHECK(result.curve.back().loss < result.curve.front().loss);
  CHECK(result.heldout_accuracy > 2.0 / vocab);
}

TEST_CASE("train_loop: non-finite input reports divergence") {
  Rng data(64);
  auto task = bct::gen_task(bct::TaskKind::kCopy, 2, 4, 4, 4, data);
  task.inputs[1](2, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto cfg = small_config(task.d_model, 2, 2, 4);
  Rng rng(65);
  const auto result = bct::train_loop(cfg, task, {.steps = 10, .lr = 0.1, .heldout_batch = 4}, rng);
  REQUIRE(result.diverged_at.has_value());
  CHECK(*result.diverged_at == 0);
  CHECK(result.curve.size() == 1);
}

TEST_CASE("write_curve_csv format") {
  const auto path = std::filesystem::temp_directory_path() / "bct_test_curve.csv";
  bct::write_curve_csv(path.string(), {{0, 2.5, 0.25}, {1, 2.0, 0.5}});
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,loss,accuracy");
  std::getline(in, line);
  CHECK(line == "0,2.5,0.25");
  std::getline(in, line);
  CHECK(line == "1,2,0.5");
  CHECK(!std::getline(in, line));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(bct::write_curve_csv("/nonexistent/dir/c.csv", {}), bct::IoError);
}
