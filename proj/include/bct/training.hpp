#pragma once

// Exact backward pass for the bounded-cache layer, a finite-difference
// checker for it, synthetic probe tasks, and a plain full-batch SGD loop.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bct/layer.hpp"

namespace bct {

// Intermediates of one forward pass, enough to run the backward pass
// without recomputation. Indexed [t][head].
template <typename T>
struct ForwardTape {
  Matrix<T> xs;
  Matrix<T> ys;
  std::vector<std::vector<Matrix<T>>> wq, wv, ww, rq, rw, mv;
  std::vector<Matrix<T>> z;  // concatenated head reads, 1 x (n_heads * d_v)
};

// Forward pass from MV_0 = `initial_mv` (one matrix per head; empty means
// zeros) using the key parameters as the cache key bank.
template <typename T>
ForwardTape<T> forward_with_tape(const Matrix<T>& xs, const LayerParams<T>& params,
                                 const ModelConfig& config,
                                 const std::vector<Matrix<T>>& initial_mv = {});

// Gradients of <upstream, ys> with respect to every parameter.
template <typename T>
Gradients<T> backward_from_tape(const ForwardTape<T>& tape, const LayerParams<T>& params,
                                const ModelConfig& config, const Matrix<T>& upstream);

template <typename T>
Gradients<T> layer_backward(const Matrix<T>& xs, const LayerParams<T>& params,
                            const ModelConfig& config, const Matrix<T>& upstream,
                            const std::vector<Matrix<T>>& initial_mv = {});

struct TensorGradError {
  std::string name;
  double max_rel_error = 0.0;  // max |a-b| / max(|a|, |b|, 1e-8) over elements
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<TensorGradError> tensors;
  double epsilon = 0.0;

  double worst_rel() const;
  double worst_abs() const;
};

// Central-difference check of layer_backward on a fixed instance.
GradCheckReport grad_check_instance(const Matrix<double>& xs, const LayerParams<double>& params,
                                    const ModelConfig& config, const Matrix<double>& upstream,
                                    const std::vector<Matrix<double>>& initial_mv, double epsilon);

// Random instance of `seq_len` tokens drawn from `rng`.
GradCheckReport grad_check(const ModelConfig& config, Rng& rng, double epsilon,
                           std::size_t seq_len = 6);

enum class TaskKind { kCopy, kAssocRecall };

std::string to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

// Batch of B sequences. Token embeddings are one-hot blocks:
//   copy:         [token (vocab) | position (N)]            d_model = vocab + N
//   assoc_recall: [key (vocab) | value (vocab) | query flag] d_model = 2*vocab + 1
// Targets of -1 are unscored.
struct TaskBatch {
  TaskKind kind = TaskKind::kCopy;
  std::size_t vocab = 0;
  std::size_t seq_len = 0;
  std::size_t d_model = 0;
  std::vector<Matrix<double>> inputs;      // B x (N x d_model)
  std::vector<std::vector<int>> targets;   // B x N
  std::vector<std::vector<int>> tokens;    // B x N raw symbols (copy) or keys (assoc)

  std::size_t batch() const { return inputs.size(); }
};

std::size_t task_d_model(TaskKind kind, std::size_t vocab, std::size_t seq_len);

struct TaskOptions {
  std::size_t copy_offset = 1;
};

// Copy: targets are the input symbols delayed by copy_offset. Assoc recall:
// the first N/2 positions present distinct key->value pairs, the rest query
// presented keys. Requires N >= 2, vocab >= 2; assoc_recall also needs N even,
// N/2 <= capacity and N/2 <= vocab.
TaskBatch gen_task(TaskKind kind, std::size_t batch, std::size_t seq_len, std::size_t vocab,
                   std::size_t capacity, Rng& rng, TaskOptions options = {});

struct TrainOptions {
  std::size_t steps = 100;
  double lr = 0.1;
  std::size_t heldout_batch = 64;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // training-batch accuracy before the update
};

struct TrainResult {
  std::vector<StepRecord> curve;
  double heldout_accuracy = 0.0;
  std::optional<std::size_t> diverged_at;  // step whose loss was non-finite
  LayerParams<double> params;
  Matrix<double> classifier;  // d_model x vocab
  Matrix<double> bias;        // 1 x vocab
};

// Full-batch SGD on softmax cross-entropy of a linear head over the layer
// outputs. The held-out batch is drawn from `rng` after initialisation.
// Always runs in 64-bit.
TrainResult train_loop(const ModelConfig& config, const TaskBatch& task, TrainOptions options,
                       Rng& rng);

// Mean cross-entropy and accuracy of the model on `batch`.
struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};
EvalResult evaluate(const LayerParams<double>& params, const Matrix<double>& classifier,
                    const Matrix<double>& bias, const ModelConfig& config, const TaskBatch& batch);

void write_curve_csv(const std::string& path, const std::vector<StepRecord>& curve);

}  // namespace bct
