#include "bct/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

namespace bct {

namespace {

// Softmax backward: given y = softmax(a) and dL/dy, returns dL/da.
template <typename T>
Matrix<T> softmax_backward(const Matrix<T>& y, const Matrix<T>& dy) {
  T dot = T(0);
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * dy[i];
  Matrix<T> out(1, y.cols());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] * (dy[i] - dot);
  return out;
}

// acc += a^T b for row vectors a, b.
template <typename T>
void accumulate_outer(Matrix<T>& acc, const Matrix<T>& a, const Matrix<T>& b) {
  add_outer_inplace(acc, a, b);
}

}  // namespace

template <typename T>
ForwardTape<T> forward_with_tape(const Matrix<T>& xs, const LayerParams<T>& params,
                                 const ModelConfig& config,
                                 const std::vector<Matrix<T>>& initial_mv) {
  check_params(params, config);
  if (xs.cols() != config.d_model || xs.rows() == 0) {
    throw DimensionError("forward_with_tape: xs is " + xs.shape_string());
  }
  if (!initial_mv.empty() && initial_mv.size() != config.n_heads) {
    throw DimensionError("forward_with_tape: initial MV count != n_heads");
  }
  const std::size_t n = xs.rows();
  const std::size_t heads = config.n_heads;
  const double factor = config.score_factor();

  ForwardTape<T> tape;
  tape.xs = xs;
  tape.ys = Matrix<T>(n, config.d_model);
  for (auto* v : {&tape.wq, &tape.wv, &tape.ww, &tape.rq, &tape.rw, &tape.mv}) {
    v->assign(n, std::vector<Matrix<T>>(heads));
  }
  tape.z.resize(n);

  std::vector<Matrix<T>> mv(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    mv[h] = initial_mv.empty() ? Matrix<T>::zeros(config.capacity, config.d_v) : initial_mv[h];
    if (mv[h].rows() != config.capacity || mv[h].cols() != config.d_v) {
      throw DimensionError("forward_with_tape: initial MV is " + mv[h].shape_string());
    }
  }

  for (std::size_t t = 0; t < n; ++t) {
    const auto x = xs.row_copy(t);
    Matrix<T> z(1, heads * config.d_v);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto& hp = params.heads[h];
      auto proj = project_write(x, hp);
      auto ww = write_weights(proj.wq, hp.MK, factor);
      add_outer_inplace(mv[h], ww, proj.wv);
      auto rq = matmul(x, hp.W_rq);
      auto rw = write_weights(rq, hp.MK, factor);
      const auto zh = matmul(rw, mv[h]);
      std::copy(zh.data().begin(), zh.data().end(), z.data().begin() + h * config.d_v);

      tape.wq[t][h] = std::move(proj.wq);
      tape.wv[t][h] = std::move(proj.wv);
      tape.ww[t][h] = std::move(ww);
      tape.rq[t][h] = std::move(rq);
      tape.rw[t][h] = std::move(rw);
      tape.mv[t][h] = mv[h];
    }
    const auto y = matmul(z, params.W_o);
    std::copy(y.data().begin(), y.data().end(), tape.ys.row(t).begin());
    tape.z[t] = std::move(z);
  }
  return tape;
}

template <typename T>
Gradients<T> backward_from_tape(const ForwardTape<T>& tape, const LayerParams<T>& params,
                                const ModelConfig& config, const Matrix<T>& upstream) {
  if (upstream.rows() != tape.ys.rows() || upstream.cols() != tape.ys.cols()) {
    throw DimensionError("layer_backward: upstream " + upstream.shape_string() + " vs outputs " +
                         tape.ys.shape_string());
  }
  const std::size_t n = tape.xs.rows();
  const std::size_t heads = config.n_heads;
  const T factor = static_cast<T>(config.score_factor());

  Gradients<T> grads = zeros_like(params);
  // carry[h] = dL/dMV_t summed over every read at or after t; since
  // MV_t = MV_0 + sum_{tau <= t} ww_tau^T wv_tau, it is also the gradient
  // reaching the write term of token t.
  std::vector<Matrix<T>> carry(heads, Matrix<T>::zeros(config.capacity, config.d_v));

  for (std::size_t step = n; step-- > 0;) {
    const auto x = tape.xs.row_copy(step);
    const auto g = upstream.row_copy(step);
    accumulate_outer(grads.W_o, tape.z[step], g);
    const auto dz_all = matmul_bt(g, params.W_o);  // 1 x (heads * d_v)

    for (std::size_t h = 0; h < heads; ++h) {
      const auto& hp = params.heads[h];
      auto& gh = grads.heads[h];
      const auto dz = Matrix<T>::row_vector(dz_all.row(0).subspan(h * config.d_v, config.d_v));

      // Read: z = rw MV_t, rw = softmax(factor * rq MK^T), rq = x W_rq.
      const auto& rw = tape.rw[step][h];
      const auto drw = matmul_bt(dz, tape.mv[step][h]);
      accumulate_outer(carry[h], rw, dz);
      auto dr = softmax_backward(rw, drw);
      scale_inplace(dr, factor);
      accumulate_outer(gh.W_rq, x, matmul(dr, hp.MK));
      accumulate_outer(gh.MK, dr, tape.rq[step][h]);

      // Write: MV += ww^T wv, ww = softmax(factor * wq MK^T).
      const auto& ww = tape.ww[step][h];
      const auto& wv = tape.wv[step][h];
      const auto dww = matmul_bt(wv, carry[h]);
      const auto dwv = matmul(ww, carry[h]);
      auto ds = softmax_backward(ww, dww);
      scale_inplace(ds, factor);
      accumulate_outer(gh.W_wq, x, matmul(ds, hp.MK));
      accumulate_outer(gh.MK, ds, tape.wq[step][h]);
      accumulate_outer(gh.W_wv, x, dwv);
    }
  }
  return grads;
}

template <typename T>
Gradients<T> layer_backward(const Matrix<T>& xs, const LayerParams<T>& params,
                            const ModelConfig& config, const Matrix<T>& upstream,
                            const std::vector<Matrix<T>>& initial_mv) {
  return backward_from_tape(forward_with_tape(xs, params, config, initial_mv), params, config,
                            upstream);
}

template ForwardTape<float> forward_with_tape(const Matrix<float>&, const LayerParams<float>&,
                                              const ModelConfig&, const std::vector<Matrix<float>>&);
template ForwardTape<double> forward_with_tape(const Matrix<double>&, const LayerParams<double>&,
                                               const ModelConfig&,
                                               const std::vector<Matrix<double>>&);
template Gradients<float> backward_from_tape(const ForwardTape<float>&, const LayerParams<float>&,
                                             const ModelConfig&, const Matrix<float>&);
template Gradients<double> backward_from_tape(const ForwardTape<double>&,
                                              const LayerParams<double>&, const ModelConfig&,
                                              const Matrix<double>&);
template Gradients<float> layer_backward(const Matrix<float>&, const LayerParams<float>&,
                                         const ModelConfig&, const Matrix<float>&,
                                         const std::vector<Matrix<float>>&);
template Gradients<double> layer_backward(const Matrix<double>&, const LayerParams<double>&,
                                          const ModelConfig&, const Matrix<double>&,
                                          const std::vector<Matrix<double>>&);

// ---------------------------------------------------------------------------
// Gradient check

double GradCheckReport::worst_rel() const {
  double w = 0.0;
  for (const auto& t : tensors) w = std::max(w, t.max_rel_error);
  return w;
}

double GradCheckReport::worst_abs() const {
  double w = 0.0;
  for (const auto& t : tensors) w = std::max(w, t.max_abs_error);
  return w;
}

namespace {

double objective(const Matrix<double>& xs, const LayerParams<double>& params,
                 const ModelConfig& config, const Matrix<double>& upstream,
                 const std::vector<Matrix<double>>& initial_mv) {
  CacheState<double> state = zero_state(params, config);
  for (std::size_t h = 0; h < initial_mv.size(); ++h) state.heads[h].MV = initial_mv[h];
  const auto ys = layer_forward(xs, params, std::move(state), config).ys;
  double total = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) total += upstream[i] * ys[i];
  return total;
}

}  // namespace

GradCheckReport grad_check_instance(const Matrix<double>& xs, const LayerParams<double>& params,
                                    const ModelConfig& config, const Matrix<double>& upstream,
                                    const std::vector<Matrix<double>>& initial_mv, double epsilon) {
  const auto analytic = layer_backward(xs, params, config, upstream, initial_mv);

  // Collect the analytic tensors in visit order so they can be paired up.
  std::vector<const Matrix<double>*> analytic_tensors;
  analytic.for_each_tensor(
      [&](const std::string&, const Matrix<double>& m) { analytic_tensors.push_back(&m); });

  GradCheckReport report;
  report.epsilon = epsilon;
  LayerParams<double> probe = params;
  std::size_t index = 0;
  probe.for_each_tensor([&](const std::string& name, Matrix<double>& m) {
    const Matrix<double>& a = *analytic_tensors[index++];
    TensorGradError err{name};
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double saved = m[i];
      m[i] = saved + epsilon;
      const double plus = objective(xs, probe, config, upstream, initial_mv);
      m[i] = saved - epsilon;
      const double minus = objective(xs, probe, config, upstream, initial_mv);
      m[i] = saved;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double diff = std::abs(a[i] - numeric);
      const double denom = std::max({std::abs(a[i]), std::abs(numeric), 1e-8});
      err.max_abs_error = std::max(err.max_abs_error, diff);
      err.max_rel_error = std::max(err.max_rel_error, diff / denom);
    }
    report.tensors.push_back(err);
  });
  return report;
}

GradCheckReport grad_check(const ModelConfig& config, Rng& rng, double epsilon,
                           std::size_t seq_len) {
  ModelConfig cfg = config;
  cfg.element_width = 64;
  auto init = init_layer<double>(cfg, rng);
  const auto xs = gaussian_matrix<double>(seq_len, cfg.d_model, 1.0, rng);
  const auto upstream = gaussian_matrix<double>(seq_len, cfg.d_model, 1.0, rng);
  std::vector<Matrix<double>> mv0;
  for (const auto& h : init.state.heads) mv0.push_back(h.MV);
  return grad_check_instance(xs, init.params, cfg, upstream, mv0, epsilon);
}

// ---------------------------------------------------------------------------
// Tasks

std::string to_string(TaskKind k) { return k == TaskKind::kCopy ? "copy" : "assoc_recall"; }

TaskKind parse_task_kind(const std::string& s) {
  if (s == "copy") return TaskKind::kCopy;
  if (s == "assoc_recall") return TaskKind::kAssocRecall;
  throw ConfigError("unknown task '" + s + "' (expected copy|assoc_recall)");
}

std::size_t task_d_model(TaskKind kind, std::size_t vocab, std::size_t seq_len) {
  return kind == TaskKind::kCopy ? vocab + seq_len : 2 * vocab + 1;
}

TaskBatch gen_task(TaskKind kind, std::size_t batch, std::size_t seq_len, std::size_t vocab,
                   std::size_t capacity, Rng& rng, TaskOptions options) {
  if (seq_len < 2) throw ConfigError("gen_task: sequence length must be >= 2");
  if (vocab < 2) throw ConfigError("gen_task: vocab must be >= 2");
  if (batch < 1) throw ConfigError("gen_task: batch must be >= 1");
  if (kind == TaskKind::kCopy) {
    if (options.copy_offset < 1 || options.copy_offset >= seq_len) {
      throw ConfigError("gen_task: copy offset must be in [1, N)");
    }
  } else {
    if (seq_len % 2 != 0) throw ConfigError("gen_task: assoc_recall needs an even length");
    if (seq_len / 2 > capacity) throw ConfigError("gen_task: more pairs than cache slots");
    if (seq_len / 2 > vocab) throw ConfigError("gen_task: more pairs than distinct keys");
  }

  TaskBatch out;
  out.kind = kind;
  out.vocab = vocab;
  out.seq_len = seq_len;
  out.d_model = task_d_model(kind, vocab, seq_len);

  for (std::size_t b = 0; b < batch; ++b) {
    Matrix<double> x(seq_len, out.d_model);
    std::vector<int> target(seq_len, -1);
    std::vector<int> symbols(seq_len);

    if (kind == TaskKind::kCopy) {
      for (std::size_t t = 0; t < seq_len; ++t) {
        symbols[t] = static_cast<int>(rng.uniform_int(vocab));
        x(t, static_cast<std::size_t>(symbols[t])) = 1.0;
        x(t, vocab + t) = 1.0;
        if (t >= options.copy_offset) target[t] = symbols[t - options.copy_offset];
      }
    } else {
      const std::size_t pairs = seq_len / 2;
      // Partial Fisher-Yates for distinct keys.
      std::vector<int> pool(vocab);
      std::iota(pool.begin(), pool.end(), 0);
      for (std::size_t i = 0; i < pairs; ++i) {
        const auto j = i + rng.uniform_int(vocab - i);
        std::swap(pool[i], pool[j]);
      }
      std::vector<int> values(pairs);
      for (std::size_t p = 0; p < pairs; ++p) {
        values[p] = static_cast<int>(rng.uniform_int(vocab));
        symbols[p] = pool[p];
        x(p, static_cast<std::size_t>(pool[p])) = 1.0;
        x(p, vocab + static_cast<std::size_t>(values[p])) = 1.0;
      }
      for (std::size_t q = 0; q < pairs; ++q) {
        const auto which = rng.uniform_int(pairs);
        const std::size_t t = pairs + q;
        symbols[t] = pool[which];
        x(t, static_cast<std::size_t>(pool[which])) = 1.0;
        x(t, 2 * vocab) = 1.0;
        target[t] = values[which];
      }
    }
    out.inputs.push_back(std::move(x));
    out.targets.push_back(std::move(target));
    out.tokens.push_back(std::move(symbols));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct HeadOutput {
  double loss_sum = 0.0;
  std::size_t scored = 0;
  std::size_t correct = 0;
  Matrix<double> dlogits;  // N x vocab, unnormalised (softmax - onehot)
};

HeadOutput score_sequence(const Matrix<double>& ys, const std::vector<int>& targets,
                          const Matrix<double>& classifier, const Matrix<double>& bias) {
  auto logits = matmul(ys, classifier);
  HeadOutput out;
  out.dlogits = Matrix<double>(logits.rows(), logits.cols());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    if (targets[t] < 0) continue;
    auto row = Matrix<double>::row_vector(logits.row(t));
    add_inplace(row, bias);
    const auto p = softmax_row(row);
    const auto target = static_cast<std::size_t>(targets[t]);
    out.loss_sum -= std::log(std::max(p[target], 1e-300));
    const auto best = static_cast<std::size_t>(
        std::max_element(p.data().begin(), p.data().end()) - p.data().begin());
    out.correct += best == target ? 1 : 0;
    ++out.scored;
    auto d = out.dlogits.row(t);
    for (std::size_t c = 0; c < p.cols(); ++c) d[c] = p[c];
    d[target] -= 1.0;
  }
  return out;
}

// Applies f(dst_tensor, src_tensor) pairwise in visit order.
template <typename F>
void zip_tensors(LayerParams<double>& dst, const LayerParams<double>& src, F f) {
  std::vector<const Matrix<double>*> from;
  src.for_each_tensor([&](const std::string&, const Matrix<double>& m) { from.push_back(&m); });
  std::size_t i = 0;
  dst.for_each_tensor([&](const std::string&, Matrix<double>& m) { f(m, *from[i++]); });
}

void check_task(const ModelConfig& config, const TaskBatch& task) {
  if (task.d_model != config.d_model) {
    throw ConfigError("task embedding width " + std::to_string(task.d_model) +
                      " != config d_model " + std::to_string(config.d_model));
  }
}

}  // namespace

EvalResult evaluate(const LayerParams<double>& params, const Matrix<double>& classifier,
                    const Matrix<double>& bias, const ModelConfig& config,
                    const TaskBatch& batch) {
  check_task(config, batch);
  double loss = 0.0;
  std::size_t scored = 0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < batch.batch(); ++b) {
    const auto ys = layer_forward(batch.inputs[b], params, config).ys;
    const auto s = score_sequence(ys, batch.targets[b], classifier, bias);
    loss += s.loss_sum;
    scored += s.scored;
    correct += s.correct;
  }
  if (scored == 0) return {};
  return {loss / static_cast<double>(scored),
          static_cast<double>(correct) / static_cast<double>(scored)};
}

TrainResult train_loop(const ModelConfig& config, const TaskBatch& task, TrainOptions options,
                       Rng& rng) {
  if (options.steps < 1) throw ConfigError("train_loop: steps must be >= 1");
  if (!(options.lr >= 0.0)) throw ConfigError("train_loop: lr must be >= 0");
  ModelConfig cfg = config;
  cfg.element_width = 64;
  cfg.validate();
  check_task(cfg, task);

  TrainResult result;
  result.params = init_layer<double>(cfg, rng).params;
  result.classifier = gaussian_matrix<double>(cfg.d_model, task.vocab, 0.01, rng);
  result.bias = Matrix<double>::zeros(1, task.vocab);
  Rng heldout_rng = rng.split();
  const auto heldout = gen_task(task.kind, options.heldout_batch, task.seq_len, task.vocab,
                                cfg.capacity, heldout_rng);

  std::size_t total_scored = 0;
  for (const auto& t : task.targets) {
    total_scored += static_cast<std::size_t>(std::count_if(t.begin(), t.end(), [](int v) { return v >= 0; }));
  }
  if (total_scored == 0) throw ConfigError("train_loop: task has no scored positions");
  const double inv_count = 1.0 / static_cast<double>(total_scored);

  for (std::size_t step = 0; step < options.steps; ++step) {
    auto grads = zeros_like(result.params);
    auto d_classifier = Matrix<double>::zeros(cfg.d_model, task.vocab);
    auto d_bias = Matrix<double>::zeros(1, task.vocab);
    double loss = 0.0;
    std::size_t correct = 0;

    // Sequences are accumulated in batch order so the sum is reproducible.
    auto accumulate_sequence = [&](std::size_t b) {
      const auto tape = forward_with_tape(task.inputs[b], result.params, cfg);
      auto s = score_sequence(tape.ys, task.targets[b], result.classifier, result.bias);
      loss += s.loss_sum;
      correct += s.correct;
      scale_inplace(s.dlogits, inv_count);
      add_inplace(d_classifier, matmul(transpose(tape.ys), s.dlogits));
      for (std::size_t t = 0; t < s.dlogits.rows(); ++t) {
        for (std::size_t c = 0; c < task.vocab; ++c) d_bias[c] += s.dlogits(t, c);
      }
      const auto upstream = matmul_bt(s.dlogits, result.classifier);
      zip_tensors(grads, backward_from_tape(tape, result.params, cfg, upstream),
                  [](Matrix<double>& acc, const Matrix<double>& g) { add_inplace(acc, g); });
    };
    try {
      for (std::size_t b = 0; b < task.batch(); ++b) accumulate_sequence(b);
    } catch (const NumericError&) {
      loss = std::numeric_limits<double>::quiet_NaN();
    }

    loss *= inv_count;
    result.curve.push_back({step, loss, static_cast<double>(correct) * inv_count});
    if (!std::isfinite(loss)) {
      result.diverged_at = step;
      break;
    }

    const double lr = options.lr;
    zip_tensors(result.params, grads, [lr](Matrix<double>& p, const Matrix<double>& g) {
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
    });
    for (std::size_t k = 0; k < d_classifier.size(); ++k) result.classifier[k] -= lr * d_classifier[k];
    for (std::size_t k = 0; k < d_bias.size(); ++k) result.bias[k] -= lr * d_bias[k];
  }

  if (!result.diverged_at) {
    result.heldout_accuracy =
        evaluate(result.params, result.classifier, result.bias, cfg, heldout).accuracy;
  }
  return result;
}

void write_curve_csv(const std::string& path, const std::vector<StepRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "step,loss,accuracy\n" << std::setprecision(17);
  for (const auto& r : curve) out << r.step << "," << r.loss << "," << r.accuracy << "\n";
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace bct
