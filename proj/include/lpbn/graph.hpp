#pragma once

// Network DAG over the node taxonomy: Learnt (linear/conv/identity), Norm,
// Affine, ReLU, and the stateless joiners (Branch, Add, Concat, AvgPool,
// MaxPool).  Provides cromulence validation, forward with quantized
// activation storage, tape-minimal reverse-mode differentiation (Affine/ReLU
// values are recomputed from packed Norm saves, never stored), memory
// accounting, and JSON checkpoints.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lpbn/batchnorm.hpp"
#include "lpbn/quantize.hpp"
#include "lpbn/tensor.hpp"

namespace lpbn {

enum class NodeKind {
  input,
  learnt_linear,
  learnt_conv,
  learnt_identity,
  norm,
  affine,
  relu,
  branch,
  add,
  concat,
  avg_pool,
  max_pool,
};

inline const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::input: return "input";
    case NodeKind::learnt_linear: return "learnt_linear";
    case NodeKind::learnt_conv: return "learnt_conv";
    case NodeKind::learnt_identity: return "learnt_identity";
    case NodeKind::norm: return "norm";
    case NodeKind::affine: return "affine";
    case NodeKind::relu: return "relu";
    case NodeKind::branch: return "branch";
    case NodeKind::add: return "add";
    case NodeKind::concat: return "concat";
    case NodeKind::avg_pool: return "avg_pool";
    case NodeKind::max_pool: return "max_pool";
  }
  return "?";
}

inline NodeKind node_kind_from_name(const std::string& s) {
  for (int k = 0; k <= int(NodeKind::max_pool); ++k)
    if (s == node_kind_name(NodeKind(k))) return NodeKind(k);
  throw std::invalid_argument("unknown node kind: " + s);
}

inline bool is_learnt(NodeKind k) {
  return k == NodeKind::learnt_linear || k == NodeKind::learnt_conv ||
         k == NodeKind::learnt_identity;
}

// Joiners that neither store nor transform features: pass-through for the
// cromulence grammar.
inline bool is_star(NodeKind k) {
  return k == NodeKind::branch || k == NodeKind::add || k == NodeKind::concat ||
         k == NodeKind::avg_pool || k == NodeKind::max_pool;
}

template <class T = float>
struct NodeT {
  NodeKind kind = NodeKind::input;
  std::string name;
  std::vector<int> inputs;
  Tensor<T> w, bias;             // learnt_linear [in,out]/[out], learnt_conv [co,ci,k,k]/[co]
  Tensor<T> a, b;                // affine, per feature
  RunningStatsT<T> running;      // norm
  std::size_t kernel = 0, stride = 1, pad = 0;  // conv and pools
  std::size_t fanout = 1;        // branch
  int scheme_override = -1;      // norm: storage scheme pinned per node; -1 follows the run
};

template <class T = float>
struct GraphT {
  std::vector<NodeT<T>> nodes;
  std::vector<std::size_t> input_shape;  // per sample, e.g. {3072} or {3,32,32}
  int input_id = -1, output_id = -1;
  QuantScheme scheme = QuantScheme::FP32;
  std::uint64_t version = 0;  // bumped on parameter updates; stales old tapes

  int add(NodeT<T> n) {
    int id = int(nodes.size());
    for (int in : n.inputs)
      if (in < 0 || in >= id)
        throw std::invalid_argument("graph: node inputs must reference earlier nodes");
    if (n.name.empty()) n.name = std::string(node_kind_name(n.kind)) + std::to_string(id);
    nodes.push_back(std::move(n));
    return id;
  }

  int add_input(std::vector<std::size_t> shape, std::string name = "input") {
    input_shape = std::move(shape);
    NodeT<T> n;
    n.kind = NodeKind::input;
    n.name = std::move(name);
    return input_id = add(std::move(n));
  }
  int add_linear(int in, std::size_t n_in, std::size_t n_out, std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::learnt_linear;
    n.name = std::move(name);
    n.inputs = {in};
    n.w = Tensor<T>({n_in, n_out});
    n.bias = Tensor<T>({n_out});
    return add(std::move(n));
  }
  int add_conv(int in, std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride,
               std::size_t pad, std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::learnt_conv;
    n.name = std::move(name);
    n.inputs = {in};
    n.w = Tensor<T>({c_out, c_in, k, k});
    n.bias = Tensor<T>({c_out});
    n.kernel = k;
    n.stride = stride;
    n.pad = pad;
    return add(std::move(n));
  }
  int add_identity(int in, std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::learnt_identity;
    n.name = std::move(name);
    n.inputs = {in};
    return add(std::move(n));
  }
  int add_norm(int in, std::size_t features, std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::norm;
    n.name = std::move(name);
    n.inputs = {in};
    n.running = RunningStatsT<T>::fresh(features);
    return add(std::move(n));
  }
  int add_affine(int in, std::size_t features, std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::affine;
    n.name = std::move(name);
    n.inputs = {in};
    n.a = Tensor<T>({features});
    n.a.fill(T(1));
    n.b = Tensor<T>({features});
    return add(std::move(n));
  }
  int add_relu(int in, std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::relu;
    n.name = std::move(name);
    n.inputs = {in};
    return add(std::move(n));
  }
  int add_branch(int in, std::size_t fanout, std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::branch;
    n.name = std::move(name);
    n.inputs = {in};
    n.fanout = fanout;
    return add(std::move(n));
  }
  int add_add(std::vector<int> ins, std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::add;
    n.name = std::move(name);
    n.inputs = std::move(ins);
    return add(std::move(n));
  }
  int add_concat(std::vector<int> ins, std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::concat;
    n.name = std::move(name);
    n.inputs = std::move(ins);
    return add(std::move(n));
  }
  int add_avg_pool(int in, std::size_t k, std::size_t stride, std::size_t pad,
                   std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::avg_pool;
    n.name = std::move(name);
    n.inputs = {in};
    n.kernel = k;
    n.stride = stride;
    n.pad = pad;
    return add(std::move(n));
  }
  int add_max_pool(int in, std::size_t k, std::size_t stride, std::size_t pad,
                   std::string name = "") {
    NodeT<T> n;
    n.kind = NodeKind::max_pool;
    n.name = std::move(name);
    n.inputs = {in};
    n.kernel = k;
    n.stride = stride;
    n.pad = pad;
    return add(std::move(n));
  }

  void set_output(int id) { output_id = id; }
  void bump_version() { ++version; }

  int node_id(const std::string& name) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].name == name) return int(i);
    throw std::invalid_argument("graph: no node named " + name);
  }
};
using Graph = GraphT<float>;

namespace detail {

inline std::size_t pool_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                            const std::string& who) {
  if (k == 0 || stride == 0 || pad >= k || in + 2 * pad < k)
    throw std::invalid_argument(who + ": window does not fit the input");
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace detail

// Output shape of every node for a given batch size.  Throws on any
// dimension mismatch, naming the offending node.
template <class T>
std::vector<std::vector<std::size_t>> infer_shapes(const GraphT<T>& g, std::size_t batch) {
  if (g.input_id < 0 || g.output_id < 0)
    throw std::invalid_argument("graph: input/output not designated");
  std::vector<std::vector<std::size_t>> shapes(g.nodes.size());
  for (std::size_t id = 0; id < g.nodes.size(); ++id) {
    const NodeT<T>& n = g.nodes[id];
    auto in_shape = [&](std::size_t i) -> const std::vector<std::size_t>& {
      return shapes[std::size_t(n.inputs[i])];
    };
    switch (n.kind) {
      case NodeKind::input: {
        shapes[id] = {batch};
        for (std::size_t d : g.input_shape) shapes[id].push_back(d);
        break;
      }
      case NodeKind::learnt_linear: {
        std::size_t flat = detail::numel(in_shape(0)) / batch;
        if (flat != n.w.shape()[0])
          throw std::invalid_argument(n.name + ": expected " + std::to_string(n.w.shape()[0]) +
                                      " input features, got " + std::to_string(flat));
        shapes[id] = {batch, n.w.shape()[1]};
        break;
      }
      case NodeKind::learnt_conv: {
        const auto& s = in_shape(0);
        if (s.size() != 4 || s[1] != n.w.shape()[1])
          throw std::invalid_argument(n.name + ": bad conv input shape");
        std::size_t ho = detail::pool_out(s[2], n.kernel, n.stride, n.pad, n.name);
        std::size_t wo = detail::pool_out(s[3], n.kernel, n.stride, n.pad, n.name);
        shapes[id] = {batch, n.w.shape()[0], ho, wo};
        break;
      }
      case NodeKind::learnt_identity:
      case NodeKind::relu:
      case NodeKind::branch: {
        shapes[id] = in_shape(0);
        break;
      }
      case NodeKind::norm:
      case NodeKind::affine: {
        const auto& s = in_shape(0);
        std::size_t features = n.kind == NodeKind::norm ? n.running.mean.size() : n.a.size();
        if (s.size() < 2 || s[1] != features)
          throw std::invalid_argument(n.name + ": expected " + std::to_string(features) +
                                      " features, got input rank/dim mismatch");
        shapes[id] = s;
        break;
      }
      case NodeKind::add: {
        if (n.inputs.empty()) throw std::invalid_argument(n.name + ": no inputs");
        for (std::size_t i = 1; i < n.inputs.size(); ++i)
          if (in_shape(i) != in_shape(0))
            throw std::invalid_argument(n.name + ": summand shapes differ");
        shapes[id] = in_shape(0);
        break;
      }
      case NodeKind::concat: {
        if (n.inputs.empty()) throw std::invalid_argument(n.name + ": no inputs");
        auto s = in_shape(0);
        if (s.size() < 2) throw std::invalid_argument(n.name + ": rank too small to concat");
        for (std::size_t i = 1; i < n.inputs.size(); ++i) {
          auto o = in_shape(i);
          if (o.size() != s.size()) throw std::invalid_argument(n.name + ": rank mismatch");
          for (std::size_t d = 0; d < s.size(); ++d)
            if (d != 1 && o[d] != s[d])
              throw std::invalid_argument(n.name + ": non-feature dims differ");
          s[1] += o[1];
        }
        shapes[id] = s;
        break;
      }
      case NodeKind::avg_pool:
      case NodeKind::max_pool: {
        const auto& s = in_shape(0);
        if (s.size() != 4) throw std::invalid_argument(n.name + ": pooling needs rank-4 input");
        std::size_t ho = detail::pool_out(s[2], n.kernel, n.stride, n.pad, n.name);
        std::size_t wo = detail::pool_out(s[3], n.kernel, n.stride, n.pad, n.name);
        shapes[id] = {s[0], s[1], ho, wo};
        break;
      }
    }
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// Cromulence: every path segment between consecutive Learnt nodes must read
// (star)* Norm Affine ReLU (star)*.

struct CromulenceReport {
  bool ok = true;
  std::vector<std::string> violations;
};

namespace detail {

enum class CromState : std::uint8_t { start, after_learnt, seen_n, seen_a, after_relu };

inline const char* crom_reason(CromState st, NodeKind k) {
  if (st == CromState::seen_n && k != NodeKind::affine)
    return "normalization must be followed directly by an affine";
  if (st == CromState::seen_a && k != NodeKind::relu)
    return "affine must be followed directly by a relu";
  if (k == NodeKind::affine) return "affine without a directly preceding normalization";
  if (k == NodeKind::relu) return "relu without a preceding normalization-affine pair";
  if (is_learnt(k)) return "learnt node without an intervening normalization group";
  if (k == NodeKind::norm) return "second normalization before the next learnt node";
  return "unexpected node";
}

}  // namespace detail

template <class T>
CromulenceReport validate_cromulent(const GraphT<T>& g) {
  using detail::CromState;
  if (g.input_id < 0 || g.output_id < 0)
    throw std::invalid_argument("validate_cromulent: input/output not designated");
  for (std::size_t id = 0; id < g.nodes.size(); ++id)
    for (int in : g.nodes[id].inputs)
      if (in < 0 || in >= int(id))
        throw std::invalid_argument("validate_cromulent: cyclic graph");

  CromulenceReport rep;
  auto flag = [&](std::string msg) {
    rep.ok = false;
    rep.violations.push_back(std::move(msg));
  };

  // Fanout discipline: only Branch nodes may feed several consumers.
  std::vector<std::vector<int>> consumers(g.nodes.size());
  for (std::size_t id = 0; id < g.nodes.size(); ++id)
    for (int in : g.nodes[id].inputs) consumers[std::size_t(in)].push_back(int(id));
  for (std::size_t id = 0; id < g.nodes.size(); ++id) {
    const NodeT<T>& n = g.nodes[id];
    std::size_t limit = n.kind == NodeKind::branch ? n.fanout : 1;
    if (consumers[id].size() > limit)
      flag(n.name + ": " + std::to_string(consumers[id].size()) +
           " consumers exceed the declared fanout");
    if (int(id) != g.output_id && consumers[id].empty())
      flag(n.name + ": dangling node never reaches the output");
  }

  // Product automaton over (node, grammar state), breadth-first from the
  // input, with parent pointers for naming the offending path prefix.
  const int n_states = 5;
  std::vector<std::int8_t> seen(g.nodes.size() * n_states, 0);
  std::vector<int> parent(g.nodes.size() * n_states, -1);
  auto slot = [&](int node, CromState st) { return std::size_t(node) * n_states + int(st); };
  auto path_to = [&](int node, CromState st) {
    std::vector<std::string> names;
    for (std::size_t cur = slot(node, st); ; cur = std::size_t(parent[cur])) {
      names.push_back(g.nodes[cur / n_states].name);
      if (parent[cur] < 0) break;
    }
    std::string out;
    for (std::size_t i = names.size(); i-- > 0;) {
      out += names[i];
      if (i) out += " > ";
    }
    return out;
  };

  std::vector<std::pair<int, CromState>> queue{{g.input_id, CromState::start}};
  seen[slot(g.input_id, CromState::start)] = 1;
  std::set<std::string> flagged;
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    auto [node, st] = queue[qi];
    for (int c : consumers[std::size_t(node)]) {
      NodeKind k = g.nodes[std::size_t(c)].kind;
      CromState next;
      bool bad = false;
      switch (st) {
        case CromState::start:
        case CromState::after_learnt:
          if (is_star(k) && !is_learnt(k)) next = st;
          else if (k == NodeKind::norm) next = CromState::seen_n;
          else if (is_learnt(k)) {
            bad = st == CromState::after_learnt;
            next = CromState::after_learnt;
          } else bad = true;
          break;
        case CromState::seen_n:
          bad = k != NodeKind::affine;
          next = CromState::seen_a;
          break;
        case CromState::seen_a:
          bad = k != NodeKind::relu;
          next = CromState::after_relu;
          break;
        case CromState::after_relu:
          if (is_star(k) && !is_learnt(k)) next = st;
          else if (is_learnt(k)) next = CromState::after_learnt;
          else bad = true;
          break;
      }
      if (bad) {
        std::string msg = g.nodes[std::size_t(c)].name + ": " + detail::crom_reason(st, k) +
                          " (path " + path_to(node, st) + " > " + g.nodes[std::size_t(c)].name +
                          ")";
        if (flagged.insert(msg).second) flag(msg);
        continue;
      }
      if (!seen[slot(c, next)]) {
        seen[slot(c, next)] = 1;
        parent[slot(c, next)] = int(slot(node, st));
        queue.push_back({c, next});
      }
    }
  }

  // A path may not end inside an unfinished normalization group.
  for (CromState st : {CromState::seen_n, CromState::seen_a})
    if (seen[slot(g.output_id, st)])
      flag(g.nodes[std::size_t(g.output_id)].name +
           ": path ends inside an unfinished normalization group (path " +
           path_to(g.output_id, st) + ")");

  // Plain reachability, independent of the grammar walk (which stops at a
  // violation): every node must sit on some input-to-somewhere path.
  std::vector<std::int8_t> reach(g.nodes.size(), 0);
  reach[std::size_t(g.input_id)] = 1;
  for (std::size_t id = 0; id < g.nodes.size(); ++id)
    for (int in : g.nodes[id].inputs)
      if (reach[std::size_t(in)]) reach[id] = 1;
  for (std::size_t id = 0; id < g.nodes.size(); ++id)
    if (!reach[id]) flag(g.nodes[id].name + ": unreachable from the input");
  return rep;
}

// ---------------------------------------------------------------------------
// Pooling kernels.  Average pooling divides by the full window size, padding
// included; max pooling ignores padded positions and records the window-local
// argmax (one byte per output element).

template <class T>
std::pair<Tensor<T>, std::vector<std::uint8_t>> max_pool2d(const Tensor<T>& x, std::size_t k,
                                                           std::size_t stride, std::size_t pad) {
  if (x.rank() != 4) throw std::invalid_argument("max_pool2d: rank-4 input required");
  std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::size_t ho = detail::pool_out(H, k, stride, pad, "max_pool2d");
  std::size_t wo = detail::pool_out(W, k, stride, pad, "max_pool2d");
  Tensor<T> y({B, C, ho, wo});
  std::vector<std::uint8_t> idx(y.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow, ++o) {
          bool found = false;
          T best{};
          std::uint8_t best_i = 0;
          for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
              std::ptrdiff_t ih = std::ptrdiff_t(oh * stride + kh) - std::ptrdiff_t(pad);
              std::ptrdiff_t iw = std::ptrdiff_t(ow * stride + kw) - std::ptrdiff_t(pad);
              if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) || iw >= std::ptrdiff_t(W))
                continue;
              T v = x[((b * C + c) * H + std::size_t(ih)) * W + std::size_t(iw)];
              if (!found || v > best) {
                found = true;
                best = v;
                best_i = std::uint8_t(kh * k + kw);
              }
            }
          if (!found) throw std::runtime_error("max_pool2d: window holds no valid positions");
          y[o] = best;
          idx[o] = best_i;
        }
  return {std::move(y), std::move(idx)};
}

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride, std::size_t pad) {
  if (x.rank() != 4) throw std::invalid_argument("avg_pool2d: rank-4 input required");
  std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::size_t ho = detail::pool_out(H, k, stride, pad, "avg_pool2d");
  std::size_t wo = detail::pool_out(W, k, stride, pad, "avg_pool2d");
  Tensor<T> y({B, C, ho, wo});
  T window = T(k * k);
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow, ++o) {
          T sum{};
          for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
              std::ptrdiff_t ih = std::ptrdiff_t(oh * stride + kh) - std::ptrdiff_t(pad);
              std::ptrdiff_t iw = std::ptrdiff_t(ow * stride + kw) - std::ptrdiff_t(pad);
              if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) || iw >= std::ptrdiff_t(W))
                continue;
              sum += x[((b * C + c) * H + std::size_t(ih)) * W + std::size_t(iw)];
            }
          y[o] = sum / window;
        }
  return y;
}

// ---------------------------------------------------------------------------
// Forward with tape.  The tape keeps only what backward cannot recompute:
// packed Norm saves, MaxPool argmax bytes, and one fp32 copy of the raw input
// when some learnt layer consumes values derived from it.

template <class T = float>
struct TapeT {
  const GraphT<T>* graph = nullptr;
  std::uint64_t version = 0;
  QuantScheme scheme = QuantScheme::FP32;
  bool train_mode = false;
  bool input_saved = false;
  Tensor<T> input;
  std::map<int, BNSavedStateT<T>> norm_saves;
  std::map<int, std::vector<std::uint8_t>> pool_argmax;

  std::size_t bytes() const {
    std::size_t total = input_saved ? input.size() * sizeof(T) : 0;
    for (const auto& [id, s] : norm_saves) total += s.activation_bytes();
    for (const auto& [id, v] : pool_argmax) total += v.size();
    return total;
  }
};
using Tape = TapeT<float>;

enum class RunMode { train, eval };

namespace detail {

template <class T>
Tensor<T> linear_forward(const NodeT<T>& n, const Tensor<T>& x) {
  std::size_t n_in = n.w.shape()[0], n_out = n.w.shape()[1];
  std::size_t batch = x.size() / n_in;
  Tensor<T> flat = x;
  if (x.rank() != 2 || x.shape()[0] != batch)
    flat = Tensor<T>({batch, n_in}, std::vector<T>(x.data(), x.data() + x.size()));
  Tensor<T> y = matmul(flat, n.w);
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t j = 0; j < n_out; ++j) y[s * n_out + j] += n.bias[j];
  return y;
}

template <class T>
Tensor<T> conv_forward(const NodeT<T>& n, const Tensor<T>& x) {
  Tensor<T> y = conv2d(x, n.w, n.stride, n.pad);
  std::size_t c_out = y.shape()[1], plane = y.shape()[2] * y.shape()[3];
  for (std::size_t b = 0; b < y.shape()[0]; ++b)
    for (std::size_t c = 0; c < c_out; ++c)
      for (std::size_t p = 0; p < plane; ++p) y[(b * c_out + c) * plane + p] += n.bias[c];
  return y;
}

template <class T>
Tensor<T> affine_forward(const NodeT<T>& n, const Tensor<T>& x) {
  return affine_apply(x, BNParamsT<T>{n.a, n.b});
}

template <class T>
Tensor<T> add_forward(const std::vector<const Tensor<T>*>& xs) {
  Tensor<T> y = *xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += (*xs[i])[j];
  return y;
}

template <class T>
Tensor<T> concat_forward(const std::vector<const Tensor<T>*>& xs) {
  std::size_t rank = xs[0]->rank();
  std::size_t outer = xs[0]->shape()[0];
  std::vector<std::size_t> shape = xs[0]->shape();
  std::size_t inner = 1;
  for (std::size_t d = 2; d < rank; ++d) inner *= shape[d];
  std::size_t features = 0;
  for (const Tensor<T>* x : xs) features += x->shape()[1];
  shape[1] = features;
  Tensor<T> y(shape);
  for (std::size_t b = 0; b < outer; ++b) {
    std::size_t off = 0;
    for (const Tensor<T>* x : xs) {
      std::size_t chunk = x->shape()[1] * inner;
      const T* src = x->data() + b * chunk;
      T* dst = y.data() + (b * features * inner) + off;
      std::copy(src, src + chunk, dst);
      off += chunk;
    }
  }
  return y;
}

// Gather a max-pool output back out of its input using the recorded argmax.
template <class T>
Tensor<T> max_pool_gather(const NodeT<T>& n, const Tensor<T>& x,
                          const std::vector<std::uint8_t>& idx) {
  std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::size_t ho = pool_out(H, n.kernel, n.stride, n.pad, n.name);
  std::size_t wo = pool_out(W, n.kernel, n.stride, n.pad, n.name);
  Tensor<T> y({B, C, ho, wo});
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow, ++o) {
          std::size_t kh = idx[o] / n.kernel, kw = idx[o] % n.kernel;
          std::size_t ih = oh * n.stride + kh - n.pad;
          std::size_t iw = ow * n.stride + kw - n.pad;
          y[o] = x[((b * C + c) * H + ih) * W + iw];
        }
  return y;
}

// True when backward would need the raw network input: some node whose
// backward consumes values (learnt weights, affine, relu) recomputes through
// a region that reaches the input before hitting a Norm save.
template <class T>
bool needs_input_save(const GraphT<T>& g) {
  std::vector<std::int8_t> needed(g.nodes.size(), 0);
  std::vector<int> stack;
  for (const NodeT<T>& n : g.nodes) {
    bool wants_input_value = n.kind == NodeKind::learnt_linear ||
                             n.kind == NodeKind::learnt_conv || n.kind == NodeKind::affine ||
                             n.kind == NodeKind::relu;
    if (wants_input_value)
      for (int in : n.inputs) stack.push_back(in);
  }
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    if (needed[std::size_t(id)]) continue;
    needed[std::size_t(id)] = 1;
    const NodeT<T>& n = g.nodes[std::size_t(id)];
    if (n.kind == NodeKind::input) return true;
    if (n.kind == NodeKind::norm) continue;  // tape save stops the recursion
    for (int in : n.inputs) stack.push_back(in);
  }
  return false;
}

}  // namespace detail

template <class T>
std::pair<Tensor<T>, TapeT<T>> forward(GraphT<T>& g, const Tensor<T>& x, RunMode mode,
                                       QuantScheme scheme) {
  if (g.input_id < 0 || g.output_id < 0)
    throw std::invalid_argument("forward: input/output not designated");
  std::size_t per_sample = detail::numel(g.input_shape);
  if (x.size() == 0 || x.size() % per_sample != 0 || x.shape()[0] * per_sample != x.size())
    throw std::invalid_argument("forward: input shape does not match the graph input");
  std::size_t batch = x.shape()[0];
  infer_shapes(g, batch);  // surfaces shape mismatches before any work

  TapeT<T> tape;
  tape.graph = &g;
  tape.version = g.version;
  tape.scheme = scheme;
  tape.train_mode = mode == RunMode::train;

  std::vector<Tensor<T>> values(g.nodes.size());
  for (std::size_t id = 0; id < g.nodes.size(); ++id) {
    NodeT<T>& n = g.nodes[id];
    auto in = [&](std::size_t i) -> const Tensor<T>& {
      return values[std::size_t(n.inputs[i])];
    };
    switch (n.kind) {
      case NodeKind::input: values[id] = x; break;
      case NodeKind::learnt_linear: values[id] = detail::linear_forward(n, in(0)); break;
      case NodeKind::learnt_conv: values[id] = detail::conv_forward(n, in(0)); break;
      case NodeKind::learnt_identity: values[id] = in(0); break;
      case NodeKind::norm: {
        QuantScheme node_scheme =
            n.scheme_override >= 0 ? QuantScheme(n.scheme_override) : scheme;
        if (mode == RunMode::train) {
          auto [y, saved] = bn_forward_train(in(0), BNParamsT<T>::identity(n.running.mean.size()),
                                             node_scheme);
          n.running.update(saved.stats);
          values[id] = saved.saved_values();
          tape.norm_saves.emplace(int(id), std::move(saved));
        } else {
          values[id] = bn_forward_eval(in(0), BNParamsT<T>::identity(n.running.mean.size()),
                                       n.running, node_scheme);
        }
        break;
      }
      case NodeKind::affine: values[id] = detail::affine_forward(n, in(0)); break;
      case NodeKind::relu: values[id] = relu(in(0)); break;
      case NodeKind::branch: values[id] = in(0); break;
      case NodeKind::add: {
        std::vector<const Tensor<T>*> xs;
        for (int i : n.inputs) xs.push_back(&values[std::size_t(i)]);
        values[id] = detail::add_forward(xs);
        break;
      }
      case NodeKind::concat: {
        std::vector<const Tensor<T>*> xs;
        for (int i : n.inputs) xs.push_back(&values[std::size_t(i)]);
        values[id] = detail::concat_forward(xs);
        break;
      }
      case NodeKind::avg_pool: values[id] = avg_pool2d(in(0), n.kernel, n.stride, n.pad); break;
      case NodeKind::max_pool: {
        auto [y, idx] = max_pool2d(in(0), n.kernel, n.stride, n.pad);
        values[id] = std::move(y);
        if (mode == RunMode::train) tape.pool_argmax.emplace(int(id), std::move(idx));
        break;
      }
    }
  }
  if (mode == RunMode::train && detail::needs_input_save(g)) {
    tape.input_saved = true;
    tape.input = x;
  }
  return {values[std::size_t(g.output_id)], std::move(tape)};
}

// ---------------------------------------------------------------------------
// Backward.

enum class GradMode { plain, quantize_at_input, quantize_partial_sums };

inline const char* grad_mode_name(GradMode m) {
  switch (m) {
    case GradMode::plain: return "float";
    case GradMode::quantize_at_input: return "quantize_at_input";
    case GradMode::quantize_partial_sums: return "quantize_partial_sums";
  }
  return "?";
}

inline GradMode grad_mode_from_name(const std::string& s) {
  for (GradMode m : {GradMode::plain, GradMode::quantize_at_input,
                     GradMode::quantize_partial_sums})
    if (s == grad_mode_name(m)) return m;
  throw std::invalid_argument("unknown gradient mode: " + s);
}

template <class T>
Tensor<T> quantize_gradient_tensor(const Tensor<T>& g) {
  Tensor<T> out(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = T(quantize_gradient(double(g[i])));
  return out;
}

template <class T>
struct NodeGradsT {
  Tensor<T> w, bias;  // learnt
  Tensor<T> a, b;     // affine
};
template <class T>
using GradsT = std::map<int, NodeGradsT<T>>;
using Grads = GradsT<float>;

template <class T>
GradsT<T> backward(const GraphT<T>& g, const TapeT<T>& tape, const Tensor<T>& grad_out,
                   GradMode mode) {
  if (tape.graph != &g || tape.version != g.version || !tape.train_mode)
    throw std::runtime_error("backward: stale tape");
  std::size_t batch = grad_out.shape()[0];
  auto shapes = infer_shapes(g, batch);  // shape-only queries stay off the value path

  // Memoized recomputation of node values from the minimal saves.
  std::map<int, Tensor<T>> memo;
  auto value = [&](auto&& self, int id) -> const Tensor<T>& {
    auto it = memo.find(id);
    if (it != memo.end()) return it->second;
    const NodeT<T>& n = g.nodes[std::size_t(id)];
    Tensor<T> v;
    switch (n.kind) {
      case NodeKind::input:
        if (!tape.input_saved)
          throw std::runtime_error("backward: raw input value missing from the tape");
        v = tape.input;
        break;
      case NodeKind::norm: v = tape.norm_saves.at(id).saved_values(); break;
      case NodeKind::learnt_linear: v = detail::linear_forward(n, self(self, n.inputs[0])); break;
      case NodeKind::learnt_conv: v = detail::conv_forward(n, self(self, n.inputs[0])); break;
      case NodeKind::learnt_identity:
      case NodeKind::branch: v = self(self, n.inputs[0]); break;
      case NodeKind::affine: v = detail::affine_forward(n, self(self, n.inputs[0])); break;
      case NodeKind::relu: v = relu(self(self, n.inputs[0])); break;
      case NodeKind::add: {
        std::vector<const Tensor<T>*> xs;
        for (int i : n.inputs) xs.push_back(&self(self, i));
        v = detail::add_forward(xs);
        break;
      }
      case NodeKind::concat: {
        std::vector<const Tensor<T>*> xs;
        for (int i : n.inputs) xs.push_back(&self(self, i));
        v = detail::concat_forward(xs);
        break;
      }
      case NodeKind::avg_pool:
        v = avg_pool2d(self(self, n.inputs[0]), n.kernel, n.stride, n.pad);
        break;
      case NodeKind::max_pool:
        v = detail::max_pool_gather(n, self(self, n.inputs[0]), tape.pool_argmax.at(id));
        break;
    }
    return memo.emplace(id, std::move(v)).first->second;
  };

  std::map<int, Tensor<T>> grad;
  auto deposit = [&](int target, Tensor<T> tg) {
    auto it = grad.find(target);
    if (it == grad.end()) {
      grad.emplace(target, std::move(tg));
      return;
    }
    bool requant = mode == GradMode::quantize_partial_sums &&
                   g.nodes[std::size_t(target)].kind == NodeKind::branch;
    Tensor<T>& acc = it->second;
    for (std::size_t i = 0; i < acc.size(); ++i) {
      T sum = acc[i] + tg[i];
      acc[i] = requant ? T(quantize_gradient(double(sum))) : sum;
    }
  };

  GradsT<T> out;
  deposit(g.output_id, grad_out);
  for (int id = int(g.nodes.size()); id-- > 0;) {
    auto git = grad.find(id);
    if (git == grad.end()) continue;
    const NodeT<T>& n = g.nodes[std::size_t(id)];
    const Tensor<T>& gy = git->second;
    switch (n.kind) {
      case NodeKind::input: break;
      case NodeKind::learnt_identity: deposit(n.inputs[0], gy); break;
      case NodeKind::learnt_linear: {
        const Tensor<T>& xin = value(value, n.inputs[0]);
        std::size_t n_in = n.w.shape()[0], n_out = n.w.shape()[1];
        std::size_t batch = xin.size() / n_in;
        Tensor<T> x2d = xin;
        if (xin.rank() != 2)
          x2d = Tensor<T>({batch, n_in}, std::vector<T>(xin.data(), xin.data() + xin.size()));
        Tensor<T> gq = mode == GradMode::quantize_at_input ? quantize_gradient_tensor(gy) : gy;
        NodeGradsT<T> ng;
        ng.w = matmul(transpose(x2d), gq);
        ng.bias = Tensor<T>({n_out});
        for (std::size_t j = 0; j < n_out; ++j) {
          double s = 0;
          for (std::size_t b = 0; b < batch; ++b) s += double(gq[b * n_out + j]);
          ng.bias[j] = T(s);
        }
        out.emplace(id, std::move(ng));
        Tensor<T> gx = matmul(gy, transpose(n.w));
        if (xin.rank() != 2)
          gx = Tensor<T>(xin.shape(), std::vector<T>(gx.data(), gx.data() + gx.size()));
        deposit(n.inputs[0], std::move(gx));
        break;
      }
      case NodeKind::learnt_conv: {
        const Tensor<T>& xin = value(value, n.inputs[0]);
        std::size_t B = xin.shape()[0], Ci = xin.shape()[1], H = xin.shape()[2],
                    W = xin.shape()[3];
        std::size_t Co = n.w.shape()[0], K = n.kernel;
        std::size_t Ho = gy.shape()[2], Wo = gy.shape()[3];
        Tensor<T> gq = mode == GradMode::quantize_at_input ? quantize_gradient_tensor(gy) : gy;
        NodeGradsT<T> ng;
        ng.w = Tensor<T>(n.w.shape());
        ng.bias = Tensor<T>({Co});
        Tensor<T> gx(xin.shape());
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t oh = 0; oh < Ho; ++oh)
              for (std::size_t ow = 0; ow < Wo; ++ow) {
                T gv = gq[((b * Co + co) * Ho + oh) * Wo + ow];
                T gvx = gy[((b * Co + co) * Ho + oh) * Wo + ow];
                ng.bias[co] += gv;
                for (std::size_t ci = 0; ci < Ci; ++ci)
                  for (std::size_t kh = 0; kh < K; ++kh)
                    for (std::size_t kw = 0; kw < K; ++kw) {
                      std::ptrdiff_t ih = std::ptrdiff_t(oh * n.stride + kh) -
                                          std::ptrdiff_t(n.pad);
                      std::ptrdiff_t iw = std::ptrdiff_t(ow * n.stride + kw) -
                                          std::ptrdiff_t(n.pad);
                      if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) || iw >= std::ptrdiff_t(W))
                        continue;
                      std::size_t xi = ((b * Ci + ci) * H + std::size_t(ih)) * W + std::size_t(iw);
                      ng.w[((co * Ci + ci) * K + kh) * K + kw] += gv * xin[xi];
                      gx[xi] += gvx * n.w[((co * Ci + ci) * K + kh) * K + kw];
                    }
              }
        out.emplace(id, std::move(ng));
        deposit(n.inputs[0], std::move(gx));
        break;
      }
      case NodeKind::norm: {
        auto bg = bn_backward(tape.norm_saves.at(id),
                              BNParamsT<T>::identity(n.running.mean.size()), gy);
        deposit(n.inputs[0], std::move(bg.grad_x));
        break;
      }
      case NodeKind::affine: {
        const Tensor<T>& xin = value(value, n.inputs[0]);
        std::size_t features = n.a.size();
        std::vector<double> ga(features, 0.0), gb(features, 0.0);
        Tensor<T> gx(gy.shape());
        detail::per_element(gy.shape(), [&](std::size_t i, std::size_t f) {
          ga[f] += double(gy[i]) * double(xin[i]);
          gb[f] += double(gy[i]);
          gx[i] = n.a[f] * gy[i];
        });
        NodeGradsT<T> ng;
        ng.a = Tensor<T>({features});
        ng.b = Tensor<T>({features});
        for (std::size_t f = 0; f < features; ++f) {
          ng.a[f] = T(ga[f]);
          ng.b[f] = T(gb[f]);
        }
        out.emplace(id, std::move(ng));
        deposit(n.inputs[0], std::move(gx));
        break;
      }
      case NodeKind::relu: {
        const Tensor<T>& pre = value(value, n.inputs[0]);
        Tensor<T> gx(gy.shape());
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = pre[i] > T(0) ? gy[i] : T(0);
        deposit(n.inputs[0], std::move(gx));
        break;
      }
      case NodeKind::branch: deposit(n.inputs[0], gy); break;
      case NodeKind::add:
        for (int in : n.inputs) deposit(in, gy);
        break;
      case NodeKind::concat: {
        std::size_t rank = gy.rank();
        std::size_t outer = gy.shape()[0];
        std::size_t inner = 1;
        for (std::size_t d = 2; d < rank; ++d) inner *= gy.shape()[d];
        std::size_t features = gy.shape()[1];
        std::size_t off = 0;
        for (int in : n.inputs) {
          std::size_t f_in = shapes[std::size_t(in)][1];
          Tensor<T> gslice(shapes[std::size_t(in)]);
          for (std::size_t b = 0; b < outer; ++b) {
            const T* src = gy.data() + (b * features * inner) + off;
            T* dst = gslice.data() + b * f_in * inner;
            std::copy(src, src + f_in * inner, dst);
          }
          off += f_in * inner;
          deposit(in, std::move(gslice));
        }
        break;
      }
      case NodeKind::avg_pool: {
        const auto& xshape = shapes[std::size_t(n.inputs[0])];
        std::size_t B = xshape[0], C = xshape[1], H = xshape[2], W = xshape[3];
        std::size_t Ho = gy.shape()[2], Wo = gy.shape()[3];
        T window = T(n.kernel * n.kernel);
        Tensor<T> gx(xshape);
        std::size_t o = 0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oh = 0; oh < Ho; ++oh)
              for (std::size_t ow = 0; ow < Wo; ++ow, ++o) {
                T spread = gy[o] / window;
                for (std::size_t kh = 0; kh < n.kernel; ++kh)
                  for (std::size_t kw = 0; kw < n.kernel; ++kw) {
                    std::ptrdiff_t ih = std::ptrdiff_t(oh * n.stride + kh) -
                                        std::ptrdiff_t(n.pad);
                    std::ptrdiff_t iw = std::ptrdiff_t(ow * n.stride + kw) -
                                        std::ptrdiff_t(n.pad);
                    if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) || iw >= std::ptrdiff_t(W))
                      continue;
                    gx[((b * C + c) * H + std::size_t(ih)) * W + std::size_t(iw)] += spread;
                  }
              }
        deposit(n.inputs[0], std::move(gx));
        break;
      }
      case NodeKind::max_pool: {
        const auto& xshape = shapes[std::size_t(n.inputs[0])];
        const std::vector<std::uint8_t>& idx = tape.pool_argmax.at(id);
        std::size_t B = xshape[0], C = xshape[1], H = xshape[2], W = xshape[3];
        std::size_t Ho = gy.shape()[2], Wo = gy.shape()[3];
        Tensor<T> gx(xshape);
        std::size_t o = 0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oh = 0; oh < Ho; ++oh)
              for (std::size_t ow = 0; ow < Wo; ++ow, ++o) {
                std::size_t kh = idx[o] / n.kernel, kw = idx[o] % n.kernel;
                std::size_t ih = oh * n.stride + kh - n.pad;
                std::size_t iw = ow * n.stride + kw - n.pad;
                gx[((b * C + c) * H + ih) * W + iw] += gy[o];
              }
        deposit(n.inputs[0], std::move(gx));
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Memory accounting for one training step's tape at 32-bit parameter storage.

struct MemoryLine {
  std::string name;
  std::string what;
  std::size_t bytes_fp32 = 0;
  std::size_t bytes_quantized = 0;
};

struct MemoryReport {
  std::size_t bytes_fp32 = 0;
  std::size_t bytes_quantized = 0;
  double ratio = 1.0;
  bool counts_pool_indices = false;  // index bytes are charged, unlike the savings headline
  std::vector<MemoryLine> per_node;
};

template <class T>
MemoryReport memory_report(const GraphT<T>& g, std::size_t batch, QuantScheme scheme) {
  auto shapes = infer_shapes(g, batch);
  MemoryReport rep;
  auto line = [&](const std::string& name, const std::string& what, std::size_t f32,
                  std::size_t q) {
    rep.per_node.push_back({name, what, f32, q});
    rep.bytes_fp32 += f32;
    rep.bytes_quantized += q;
  };
  if (detail::needs_input_save(g)) {
    std::size_t count = batch * detail::numel(g.input_shape);
    line(g.nodes[std::size_t(g.input_id)].name, "raw input (fp32 in both modes)", 4 * count,
         4 * count);
  }
  for (std::size_t id = 0; id < g.nodes.size(); ++id) {
    const NodeT<T>& n = g.nodes[id];
    if (n.kind == NodeKind::norm) {
      std::size_t count = detail::numel(shapes[id]);
      QuantScheme node_scheme =
          n.scheme_override >= 0 ? QuantScheme(n.scheme_override) : scheme;
      std::size_t node_bits =
          node_scheme == QuantScheme::FP32 ? 32 : std::size_t(scheme_info(node_scheme).bits);
      line(n.name, "packed normalized activations",
           4 * count, (count * node_bits + 7) / 8);
    } else if (n.kind == NodeKind::max_pool) {
      std::size_t count = detail::numel(shapes[id]);
      line(n.name, "argmax indices (1 byte each)", count, count);
      rep.counts_pool_indices = true;
    }
  }
  rep.ratio = rep.bytes_fp32 == 0
                  ? 1.0
                  : double(rep.bytes_quantized) / double(rep.bytes_fp32);
  return rep;
}

// ---------------------------------------------------------------------------
// Builders.

// FC(2^n) - Norm - Affine - ReLU - FC(2^n) - Norm - Affine - ReLU - FC(10)
// over a 3072-dimensional input.
template <class T = float>
GraphT<T> build_fc_stack(int width_exponent, QuantScheme scheme) {
  if (width_exponent < 0 || width_exponent > 10)
    throw std::invalid_argument("build_fc_stack: width exponent out of range");
  std::size_t width = std::size_t(1) << width_exponent;
  GraphT<T> g;
  g.scheme = scheme;
  int x = g.add_input({3072});
  int h = g.add_linear(x, 3072, width, "fc0");
  h = g.add_norm(h, width, "norm0");
  h = g.add_affine(h, width, "affine0");
  h = g.add_relu(h, "relu0");
  h = g.add_linear(h, width, width, "fc1");
  h = g.add_norm(h, width, "norm1");
  h = g.add_affine(h, width, "affine1");
  h = g.add_relu(h, "relu1");
  h = g.add_linear(h, width, 10, "fc2");
  g.set_output(h);
  return g;
}

// Pre-activated residual stack on 3x32x32 inputs: a stem conv, then `blocks`
// residual units whose arm reads Norm-Affine-ReLU-Conv twice, then a final
// normalization group and linear classifier.
template <class T = float>
GraphT<T> build_residual_block(std::size_t channels, std::size_t blocks, QuantScheme scheme) {
  if (channels == 0 || blocks == 0)
    throw std::invalid_argument("build_residual_block: zero dims");
  GraphT<T> g;
  g.scheme = scheme;
  int x = g.add_input({3, 32, 32});
  int h = g.add_conv(x, 3, channels, 3, 1, 1, "stem");
  for (std::size_t bl = 0; bl < blocks; ++bl) {
    std::string tag = std::to_string(bl);
    int br = g.add_branch(h, 2, "branch" + tag);
    int arm = g.add_norm(br, channels, "norm" + tag + "a");
    arm = g.add_affine(arm, channels, "affine" + tag + "a");
    arm = g.add_relu(arm, "relu" + tag + "a");
    arm = g.add_conv(arm, channels, channels, 3, 1, 1, "conv" + tag + "a");
    arm = g.add_norm(arm, channels, "norm" + tag + "b");
    arm = g.add_affine(arm, channels, "affine" + tag + "b");
    arm = g.add_relu(arm, "relu" + tag + "b");
    arm = g.add_conv(arm, channels, channels, 3, 1, 1, "conv" + tag + "b");
    h = g.add_add({br, arm}, "join" + tag);
  }
  h = g.add_norm(h, channels, "norm_head");
  h = g.add_affine(h, channels, "affine_head");
  h = g.add_relu(h, "relu_head");
  h = g.add_linear(h, channels * 32 * 32, 10, "classifier");
  g.set_output(h);
  return g;
}

// VGG-style chain M(k)-M(2k)-M(4k) with M(c) = cC3-Norm-Affine-ReLU-cC3-MP3/2-
// Norm-Affine-ReLU, then a linear classifier.  Spatial size 32 -> 15 -> 7 -> 3.
template <class T = float>
GraphT<T> build_small_convnet(std::size_t k, QuantScheme scheme) {
  if (k == 0) throw std::invalid_argument("build_small_convnet: zero width");
  GraphT<T> g;
  g.scheme = scheme;
  int h = g.add_input({3, 32, 32});
  std::size_t c_prev = 3;
  int block = 0;
  for (std::size_t c : {k, 2 * k, 4 * k}) {
    std::string tag = std::to_string(block++);
    h = g.add_conv(h, c_prev, c, 3, 1, 1, "conv" + tag + "a");
    h = g.add_norm(h, c, "norm" + tag + "a");
    h = g.add_affine(h, c, "affine" + tag + "a");
    h = g.add_relu(h, "relu" + tag + "a");
    h = g.add_conv(h, c, c, 3, 1, 1, "conv" + tag + "b");
    h = g.add_max_pool(h, 3, 2, 0, "pool" + tag);
    h = g.add_norm(h, c, "norm" + tag + "b");
    h = g.add_affine(h, c, "affine" + tag + "b");
    h = g.add_relu(h, "relu" + tag + "b");
    c_prev = c;
  }
  h = g.add_linear(h, 4 * k * 3 * 3, 10, "classifier");
  g.set_output(h);
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON container with topology, parameters, running statistics,
// and the storage scheme id.  Numbers are written as doubles, which restores
// 32-bit parameters bit-exactly.

namespace detail {

template <class T>
nlohmann::json tensor_to_json(const Tensor<T>& t) {
  nlohmann::json j;
  j["shape"] = t.shape();
  std::vector<double> data(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) data[i] = double(t[i]);
  j["data"] = std::move(data);
  return j;
}

template <class T>
Tensor<T> tensor_from_json(const nlohmann::json& j) {
  std::vector<std::size_t> shape = j.at("shape").get<std::vector<std::size_t>>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  Tensor<T> t(shape);
  if (t.size() != data.size()) throw std::runtime_error("checkpoint: tensor size mismatch");
  for (std::size_t i = 0; i < data.size(); ++i) t[i] = T(data[i]);
  return t;
}

inline void atomic_write(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write(content.data(), std::streamsize(content.size()));
    if (!f.good()) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

template <class T>
nlohmann::json checkpoint_to_json(const GraphT<T>& g) {
  nlohmann::json j;
  j["format"] = "lpbn-checkpoint";
  j["format_version"] = 1;
  j["scheme"] = int(g.scheme);
  j["input_shape"] = g.input_shape;
  j["input"] = g.input_id;
  j["output"] = g.output_id;
  nlohmann::json nodes = nlohmann::json::array();
  for (const NodeT<T>& n : g.nodes) {
    nlohmann::json jn;
    jn["kind"] = node_kind_name(n.kind);
    jn["name"] = n.name;
    jn["inputs"] = n.inputs;
    switch (n.kind) {
      case NodeKind::learnt_linear:
        jn["w"] = detail::tensor_to_json(n.w);
        jn["bias"] = detail::tensor_to_json(n.bias);
        break;
      case NodeKind::learnt_conv:
        jn["w"] = detail::tensor_to_json(n.w);
        jn["bias"] = detail::tensor_to_json(n.bias);
        jn["kernel"] = n.kernel;
        jn["stride"] = n.stride;
        jn["pad"] = n.pad;
        break;
      case NodeKind::norm:
        jn["running_mean"] = detail::tensor_to_json(n.running.mean);
        jn["running_var"] = detail::tensor_to_json(n.running.var);
        jn["momentum"] = n.running.momentum;
        jn["populated"] = n.running.populated;
        jn["scheme_override"] = n.scheme_override;
        break;
      case NodeKind::affine:
        jn["a"] = detail::tensor_to_json(n.a);
        jn["b"] = detail::tensor_to_json(n.b);
        break;
      case NodeKind::branch: jn["fanout"] = n.fanout; break;
      case NodeKind::avg_pool:
      case NodeKind::max_pool:
        jn["kernel"] = n.kernel;
        jn["stride"] = n.stride;
        jn["pad"] = n.pad;
        break;
      default: break;
    }
    nodes.push_back(std::move(jn));
  }
  j["nodes"] = std::move(nodes);
  return j;
}

template <class T>
GraphT<T> checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != std::string("lpbn-checkpoint"))
    throw std::runtime_error("checkpoint: unrecognized container format");
  GraphT<T> g;
  g.scheme = QuantScheme(j.at("scheme").get<int>());
  g.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
  for (const nlohmann::json& jn : j.at("nodes")) {
    NodeT<T> n;
    n.kind = node_kind_from_name(jn.at("kind").get<std::string>());
    n.name = jn.at("name").get<std::string>();
    n.inputs = jn.at("inputs").get<std::vector<int>>();
    switch (n.kind) {
      case NodeKind::learnt_linear:
        n.w = detail::tensor_from_json<T>(jn.at("w"));
        n.bias = detail::tensor_from_json<T>(jn.at("bias"));
        break;
      case NodeKind::learnt_conv:
        n.w = detail::tensor_from_json<T>(jn.at("w"));
        n.bias = detail::tensor_from_json<T>(jn.at("bias"));
        n.kernel = jn.at("kernel").get<std::size_t>();
        n.stride = jn.at("stride").get<std::size_t>();
        n.pad = jn.at("pad").get<std::size_t>();
        break;
      case NodeKind::norm:
        n.running.mean = detail::tensor_from_json<T>(jn.at("running_mean"));
        n.running.var = detail::tensor_from_json<T>(jn.at("running_var"));
        n.running.momentum = jn.at("momentum").get<double>();
        n.running.populated = jn.at("populated").get<bool>();
        n.scheme_override = jn.value("scheme_override", -1);
        break;
      case NodeKind::affine:
        n.a = detail::tensor_from_json<T>(jn.at("a"));
        n.b = detail::tensor_from_json<T>(jn.at("b"));
        break;
      case NodeKind::branch: n.fanout = jn.at("fanout").get<std::size_t>(); break;
      case NodeKind::avg_pool:
      case NodeKind::max_pool:
        n.kernel = jn.at("kernel").get<std::size_t>();
        n.stride = jn.at("stride").get<std::size_t>();
        n.pad = jn.at("pad").get<std::size_t>();
        break;
      default: break;
    }
    int id = g.add(std::move(n));
    if (g.nodes[std::size_t(id)].kind == NodeKind::input) g.input_id = id;
  }
  g.output_id = j.at("output").get<int>();
  if (g.input_id != j.at("input").get<int>())
    throw std::runtime_error("checkpoint: input designation mismatch");
  if (g.output_id < 0 || g.output_id >= int(g.nodes.size()))
    throw std::runtime_error("checkpoint: output designation out of range");
  return g;
}

template <class T>
void save_checkpoint(const GraphT<T>& g, const std::string& path) {
  detail::atomic_write(path, checkpoint_to_json(g).dump(2) + "\n");
}

template <class T = float>
GraphT<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  nlohmann::json j;
  f >> j;
  return checkpoint_from_json<T>(j);
}

}  // namespace lpbn
