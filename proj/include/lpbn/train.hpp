#pragma once

// SGD with Nesterov momentum and weight decay, plus the experiment
// procedures built on it: full training runs with per-epoch metrics,
// width sweeps against a full-precision baseline trained on the same
// seed, and scheme retrofit of trained graphs with optional fine-tuning.
// Everything here is sequential and bitwise deterministic given the seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lpbn/dataset.hpp"
#include "lpbn/graph.hpp"
#include "lpbn/rng.hpp"
#include "lpbn/stats.hpp"

namespace lpbn {

struct TrainConfig {
  double learning_rate = 1e-2;
  double momentum = 0.9;       // Nesterov
  double weight_decay = 1e-4;  // learnt weights and biases only, never affine a/b
  std::size_t batch_size = 100;
  std::size_t epochs = 20;
  QuantScheme scheme = QuantScheme::FP32;
  GradMode grad_mode = GradMode::plain;
  std::uint64_t seed = 1;
  // (start_epoch, multiplier) pairs in ascending start order; the active
  // multiplier is the last whose start_epoch (0-based) has been reached.
  std::vector<std::pair<std::size_t, double>> lr_schedule;
};

inline void check_train_config(const TrainConfig& cfg) {
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
    throw std::invalid_argument("train config: momentum must lie in [0, 1)");
  if (cfg.batch_size < 1)
    throw std::invalid_argument("train config: batch size must be at least 1");
}

inline double lr_multiplier(const TrainConfig& cfg, std::size_t epoch) {
  double m = 1.0;
  for (const auto& [start, mult] : cfg.lr_schedule)
    if (epoch >= start) m = mult;
  return m;
}

// v <- mu v - lr (g + wd p);  p <- p + mu v - lr (g + wd p).
// Per-element arithmetic runs in double regardless of storage type.
template <class T>
void sgd_nesterov_step(Tensor<T>& p, const Tensor<T>& g, Tensor<T>& v, double lr,
                       double momentum, double weight_decay) {
  if (!p.same_shape(g) || !p.same_shape(v))
    throw std::invalid_argument("sgd_nesterov_step: shape mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    double gw = double(g[i]) + weight_decay * double(p[i]);
    double vn = momentum * double(v[i]) - lr * gw;
    v[i] = T(vn);
    p[i] = T(double(p[i]) + momentum * vn - lr * gw);
  }
}

// Scaled-uniform weights (+-sqrt(6/fan_in)), zero biases, identity affine,
// fresh running statistics.
template <class T>
void init_params(GraphT<T>& g, std::uint64_t seed) {
  Rng rng(seed);
  for (NodeT<T>& n : g.nodes) {
    if (n.kind == NodeKind::learnt_linear || n.kind == NodeKind::learnt_conv) {
      std::size_t fan_in = n.kind == NodeKind::learnt_linear
                               ? n.w.shape()[0]
                               : n.w.shape()[1] * n.kernel * n.kernel;
      double s = std::sqrt(6.0 / double(fan_in));
      for (std::size_t i = 0; i < n.w.size(); ++i) n.w[i] = T(rng.uniform(-s, s));
      n.bias.fill(T(0));
    } else if (n.kind == NodeKind::affine) {
      n.a.fill(T(1));
      n.b.fill(T(0));
    } else if (n.kind == NodeKind::norm) {
      n.running = RunningStatsT<T>::fresh(n.running.mean.size());
    }
  }
  g.bump_version();
}

template <class T>
struct LossResultT {
  double loss_sum = 0;      // summed over rows; divide by row count for the mean
  std::size_t correct = 0;  // argmax hits, first maximum wins ties
  Tensor<T> grad;           // d(mean loss)/d(logits)
};

template <class T>
LossResultT<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.shape()[0] != labels.size())
    throw std::invalid_argument("softmax_cross_entropy: logits/labels mismatch");
  std::size_t n = labels.size(), c = logits.shape()[1];
  LossResultT<T> out;
  out.grad = Tensor<T>({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    int label = labels[i];
    if (label < 0 || std::size_t(label) >= c)
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    const T* row = logits.data() + i * c;
    double m = row[0];
    std::size_t arg = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (double(row[j]) > m) {
        m = row[j];
        arg = j;
      }
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(double(row[j]) - m);
    double lse = m + std::log(sum);
    out.loss_sum += lse - double(row[std::size_t(label)]);
    out.correct += (arg == std::size_t(label));
    for (std::size_t j = 0; j < c; ++j)
      out.grad[i * c + j] =
          T((std::exp(double(row[j]) - lse) - (j == std::size_t(label) ? 1.0 : 0.0)) / double(n));
  }
  return out;
}

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
};

// Running-statistics forward over fixed-order batches.
template <class T>
EvalResult evaluate(GraphT<T>& g, const Dataset& data, QuantScheme scheme,
                    std::size_t batch_size = 256) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::size_t stop = std::min(data.size(), start + batch_size);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    Dataset batch = gather(data, idx);
    auto [y, tape] = forward(g, batch.x, RunMode::eval, scheme);
    LossResultT<T> ls = softmax_cross_entropy(y, batch.labels);
    loss_sum += ls.loss_sum;
    correct += ls.correct;
  }
  return {double(correct) / double(data.size()), loss_sum / double(data.size())};
}

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_accuracy = 0, train_loss = 0;
  double test_accuracy = 0, test_loss = 0;
};

namespace detail {

// Velocity slots live in the same container shape as the gradients.
template <class T>
void apply_updates(GraphT<T>& g, const GradsT<T>& grads, GradsT<T>& velocity, double lr,
                   const TrainConfig& cfg) {
  for (const auto& [id, ng] : grads) {
    NodeT<T>& n = g.nodes[std::size_t(id)];
    NodeGradsT<T>& v = velocity[id];
    if (is_learnt(n.kind)) {
      if (v.w.size() == 0) {
        v.w = Tensor<T>(n.w.shape());
        v.bias = Tensor<T>(n.bias.shape());
      }
      sgd_nesterov_step(n.w, ng.w, v.w, lr, cfg.momentum, cfg.weight_decay);
      sgd_nesterov_step(n.bias, ng.bias, v.bias, lr, cfg.momentum, cfg.weight_decay);
    } else if (n.kind == NodeKind::affine) {
      if (v.a.size() == 0) {
        v.a = Tensor<T>(n.a.shape());
        v.b = Tensor<T>(n.b.shape());
      }
      sgd_nesterov_step(n.a, ng.a, v.a, lr, cfg.momentum, 0.0);
      sgd_nesterov_step(n.b, ng.b, v.b, lr, cfg.momentum, 0.0);
    }
  }
  g.bump_version();
}

}  // namespace detail

// One full run. Train metrics are running tallies over the epoch's batches
// (batch statistics); test metrics come from a running-statistics pass after
// each epoch. Throws with the 1-based epoch index if the loss leaves the
// finite range.
template <class T>
std::vector<EpochStats> train(GraphT<T>& g, const Dataset& train_data, const Dataset& test_data,
                              const TrainConfig& cfg) {
  check_train_config(cfg);
  if (train_data.size() == 0) throw std::invalid_argument("train: empty training set");
  if (cfg.scheme != QuantScheme::FP32) {
    CromulenceReport rep = validate_cromulent(g);
    if (!rep.ok)
      throw std::invalid_argument("train: graph is not cromulent: " + rep.violations.front());
  }
  Rng rng(cfg.seed);
  GradsT<T> velocity;
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::vector<EpochStats> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.learning_rate * lr_multiplier(cfg, epoch);
    rng.shuffle(order);
    double loss_sum = 0;
    std::size_t correct = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        std::size_t stop = std::min(order.size(), start + cfg.batch_size);
        std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(start),
                                     order.begin() + std::ptrdiff_t(stop));
        Dataset batch = gather(train_data, idx);
        auto [y, tape] = forward(g, batch.x, RunMode::train, cfg.scheme);
        LossResultT<T> ls = softmax_cross_entropy(y, batch.labels);
        if (!std::isfinite(ls.loss_sum)) throw std::runtime_error("loss is not finite");
        loss_sum += ls.loss_sum;
        correct += ls.correct;
        GradsT<T> grads = backward(g, tape, ls.grad, cfg.grad_mode);
        detail::apply_updates(g, grads, velocity, lr, cfg);
      }
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("training diverged at epoch " + std::to_string(epoch + 1) + ": " +
                               e.what());
    }
    EpochStats s;
    s.epoch = epoch + 1;
    s.train_accuracy = double(correct) / double(train_data.size());
    s.train_loss = loss_sum / double(train_data.size());
    if (test_data.size() > 0) {
      EvalResult ev = evaluate(g, test_data, cfg.scheme, cfg.batch_size);
      s.test_accuracy = ev.accuracy;
      s.test_loss = ev.loss;
    }
    history.push_back(s);
  }
  return history;
}

inline std::string history_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,split,accuracy,loss\n";
  for (const EpochStats& e : history) {
    out += std::to_string(e.epoch) + ",train," + format_double(e.train_accuracy) + "," +
           format_double(e.train_loss) + "\n";
    out += std::to_string(e.epoch) + ",test," + format_double(e.test_accuracy) + "," +
           format_double(e.test_loss) + "\n";
  }
  return out;
}

inline std::string run_manifest(const TrainConfig& cfg, std::size_t train_examples,
                                std::size_t test_examples) {
  std::string sched;
  for (const auto& [start, mult] : cfg.lr_schedule) {
    if (!sched.empty()) sched += ";";
    sched += std::to_string(start) + ":" + format_double(mult);
  }
  if (sched.empty()) sched = "none";
  std::string out;
  out += "scheme=" + std::string(scheme_name(cfg.scheme)) + "\n";
  out += "grad_mode=" + std::string(grad_mode_name(cfg.grad_mode)) + "\n";
  out += "learning_rate=" + format_double(cfg.learning_rate) + "\n";
  out += "momentum=" + format_double(cfg.momentum) + "\n";
  out += "weight_decay=" + format_double(cfg.weight_decay) + "\n";
  out += "batch_size=" + std::to_string(cfg.batch_size) + "\n";
  out += "epochs=" + std::to_string(cfg.epochs) + "\n";
  out += "seed=" + std::to_string(cfg.seed) + "\n";
  out += "lr_schedule=" + sched + "\n";
  out += "train_examples=" + std::to_string(train_examples) + "\n";
  out += "test_examples=" + std::to_string(test_examples) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Width sweep: every (width, scheme) pair is trained from the same seed as a
// fresh full-precision baseline of the same width, and reported as deltas in
// percentage points against that baseline.

struct SweepRow {
  int width_exponent = 0;
  QuantScheme scheme = QuantScheme::FP32;
  double train_accuracy = 0, test_accuracy = 0;
  double train_delta_points = 0, test_delta_points = 0;
};

template <class T = float>
std::vector<SweepRow> quantsweep(const std::vector<int>& width_exponents,
                                 const std::vector<QuantScheme>& schemes, const TrainConfig& cfg,
                                 const Dataset& train_data, const Dataset& test_data) {
  std::vector<SweepRow> rows;
  for (int n : width_exponents) {
    TrainConfig base_cfg = cfg;
    base_cfg.scheme = QuantScheme::FP32;
    GraphT<T> base = build_fc_stack<T>(n, QuantScheme::FP32);
    init_params(base, cfg.seed);
    auto base_hist = train(base, train_data, test_data, base_cfg);
    double base_train = base_hist.back().train_accuracy;
    double base_test = base_hist.back().test_accuracy;
    for (QuantScheme s : schemes) {
      SweepRow row;
      row.width_exponent = n;
      row.scheme = s;
      if (s == QuantScheme::FP32) {
        // Identical run by the determinism contract; the delta is exactly zero.
        row.train_accuracy = base_train;
        row.test_accuracy = base_test;
      } else {
        TrainConfig qcfg = cfg;
        qcfg.scheme = s;
        GraphT<T> gq = build_fc_stack<T>(n, s);
        init_params(gq, cfg.seed);
        auto hist = train(gq, train_data, test_data, qcfg);
        row.train_accuracy = hist.back().train_accuracy;
        row.test_accuracy = hist.back().test_accuracy;
      }
      row.train_delta_points = (row.train_accuracy - base_train) * 100.0;
      row.test_delta_points = (row.test_accuracy - base_test) * 100.0;
      rows.push_back(row);
    }
  }
  return rows;
}

inline std::string quantsweep_csv(const std::vector<SweepRow>& rows) {
  std::string out =
      "width_exponent,width,scheme,train_accuracy,test_accuracy,"
      "train_delta_points,test_delta_points\n";
  for (const SweepRow& r : rows) {
    out += std::to_string(r.width_exponent) + "," + std::to_string(std::size_t(1) << r.width_exponent) +
           "," + scheme_name(r.scheme) + "," + format_double(r.train_accuracy) + "," +
           format_double(r.test_accuracy) + "," + format_double(r.train_delta_points) + "," +
           format_double(r.test_delta_points) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retrofit: pin the storage scheme of selected normalization nodes on a
// trained graph and measure the damage before and (optionally) after
// fine-tuning. Errors are fractions (1 - accuracy) on eval_data.

enum class RetrofitPolicy { all, all_but_first, subset };

inline const char* retrofit_policy_name(RetrofitPolicy p) {
  switch (p) {
    case RetrofitPolicy::all: return "all";
    case RetrofitPolicy::all_but_first: return "all_but_first";
    case RetrofitPolicy::subset: return "subset";
  }
  throw std::logic_error("unreachable");
}

inline RetrofitPolicy retrofit_policy_from_name(const std::string& n) {
  if (n == "all") return RetrofitPolicy::all;
  if (n == "all_but_first") return RetrofitPolicy::all_but_first;
  if (n == "subset") return RetrofitPolicy::subset;
  throw std::invalid_argument("unknown retrofit policy: " + n);
}

struct RetrofitReport {
  double baseline_error = 0;  // graph as loaded
  double raw_error = 0;       // after substitution, before any training
  bool fine_tuned = false;
  double fine_tuned_error = 0;
  std::vector<std::string> retrofitted;  // names of the nodes whose scheme changed
};

template <class T>
RetrofitReport retrofit(GraphT<T>& g, const Dataset& eval_data, QuantScheme scheme,
                        RetrofitPolicy policy, const std::vector<std::size_t>& subset_indices = {},
                        const TrainConfig* fine_tune_cfg = nullptr,
                        const Dataset* fine_tune_data = nullptr, std::size_t eval_batch = 256) {
  std::vector<std::size_t> norm_ids;
  for (std::size_t id = 0; id < g.nodes.size(); ++id)
    if (g.nodes[id].kind == NodeKind::norm) norm_ids.push_back(id);
  if (norm_ids.empty())
    throw std::invalid_argument("retrofit: graph has no normalization nodes");

  std::vector<std::size_t> chosen;
  switch (policy) {
    case RetrofitPolicy::all: chosen = norm_ids; break;
    case RetrofitPolicy::all_but_first:
      chosen.assign(norm_ids.begin() + 1, norm_ids.end());
      break;
    case RetrofitPolicy::subset:
      for (std::size_t i : subset_indices) {
        if (i >= norm_ids.size())
          throw std::invalid_argument("retrofit: subset index " + std::to_string(i) +
                                      " exceeds the " + std::to_string(norm_ids.size()) +
                                      " normalization nodes");
        chosen.push_back(norm_ids[i]);
      }
      break;
  }

  RetrofitReport rep;
  rep.baseline_error = 1.0 - evaluate(g, eval_data, g.scheme, eval_batch).accuracy;
  for (std::size_t id : chosen) {
    g.nodes[id].scheme_override = int(scheme);
    rep.retrofitted.push_back(g.nodes[id].name);
  }
  g.bump_version();
  rep.raw_error = 1.0 - evaluate(g, eval_data, g.scheme, eval_batch).accuracy;
  if (fine_tune_cfg != nullptr) {
    if (fine_tune_data == nullptr || fine_tune_data->size() == 0)
      throw std::invalid_argument("retrofit: fine-tuning requires training data");
    TrainConfig ft = *fine_tune_cfg;
    ft.scheme = g.scheme;  // per-node overrides carry the substitution
    train(g, *fine_tune_data, Dataset{}, ft);
    rep.fine_tuned = true;
    rep.fine_tuned_error = 1.0 - evaluate(g, eval_data, g.scheme, eval_batch).accuracy;
  }
  return rep;
}

inline std::string retrofit_report_text(const RetrofitReport& rep, QuantScheme scheme,
                                        RetrofitPolicy policy) {
  std::string nodes;
  for (const std::string& n : rep.retrofitted) {
    if (!nodes.empty()) nodes += ";";
    nodes += n;
  }
  std::string out;
  out += "scheme=" + std::string(scheme_name(scheme)) + "\n";
  out += "policy=" + std::string(retrofit_policy_name(policy)) + "\n";
  out += "retrofitted=" + nodes + "\n";
  out += "baseline_error=" + format_double(rep.baseline_error) + "\n";
  out += "raw_error=" + format_double(rep.raw_error) + "\n";
  if (rep.fine_tuned) out += "fine_tuned_error=" + format_double(rep.fine_tuned_error) + "\n";
  return out;
}

}  // namespace lpbn
