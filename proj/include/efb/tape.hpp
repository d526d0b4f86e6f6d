#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "efb/tensor.hpp"

namespace efb::nn {

class Tape;

/// Lightweight handle to a node owned by a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const;
  const std::vector<double>& value() const;
};

/// Reverse-mode computation tape. Nodes are appended in topological order by
/// the op builders below; backward() replays their closures in reverse and
/// accumulates leaf gradients into the bound Param objects. A tape instance
/// is single-threaded; independent tapes may run concurrently.
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // allocated only when needs_grad
    std::function<void(Tape&, Node&)> back;
    Param* bound = nullptr;
    bool needs_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves -------------------------------------------------------------
  Var constant(Tensor t);
  Var constant(Shape shape, std::vector<double> data);
  Var scalar(double v);
  Var param(Param& p);

  // Elementwise --------------------------------------------------------
  Var affine(Var x, double mul, double add);  // mul*x + add
  Var relu(Var x);
  Var sigmoid(Var x);
  Var logv(Var x);
  Var sqrtv(Var x);
  Var cosv(Var x);
  Var sinv(Var x);

  /// Sign quantizer with a sigmoid-adjusted straight-through backward:
  /// forward sign(sigmoid(x) - 0.5) with sign(0) -> +1; backward multiplies
  /// the incoming gradient by d/dx [2*sigmoid(x) - 1] = 2*s*(1-s).
  Var quantize_ste(Var x);

  // Binary elementwise with trailing-rank broadcasting (dims equal or 1).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var divv(Var a, Var b);

  // Shape --------------------------------------------------------------
  Var reshape(Var x, Shape s);
  Var permute_last2(Var x);                    // (..., A, B) -> (..., B, A)
  Var stack_axis1(const std::vector<Var>& xs); // k * (N, rest) -> (N, k, rest)
  Var select_axis1(Var x, int index);          // (N, K, rest) -> (N, rest)
  Var slice_last(Var x, int start, int len);   // (..., M) -> (..., len)
  Var split_heads(Var x, int heads);           // (N, T, D) -> (N*h, T, D/h)
  Var merge_heads(Var x, int heads);           // (N*h, T, D/h) -> (N, T, D)

  // Reductions ---------------------------------------------------------
  Var sum_all(Var x);    // -> scalar
  Var mean_all(Var x);   // -> scalar
  Var sum_last(Var x);   // (..., M) -> (...)
  Var mean_last(Var x);  // (..., M) -> (...)
  Var diag_last2(Var x); // (..., K, K) -> (..., K)

  // Contractions -------------------------------------------------------
  /// x: (..., I), w: (O, I), optional bias (O). Returns (..., O).
  Var linear(Var x, Var w, Var b = {});
  /// Batched matmul on rank-3 operands: (G, M, K) x (G, K, N) -> (G, M, N),
  /// with optional transposition of the trailing two dims of either operand.
  Var bmm(Var a, Var b, bool trans_a = false, bool trans_b = false);
  /// x: (N, C_in, L), w: (C_out, C_in, W) with odd W, zero same-padding,
  /// optional bias (C_out). Returns (N, C_out, L).
  Var conv1d(Var x, Var w, Var b = {});

  Var softmax_last(Var x);
  Var layernorm(Var x, Var gamma, Var beta, double eps);

  /// 2-D batch norm over the batch axis of x: (N, F). In train mode the batch
  /// moments normalize and, when update_stats is set, refresh the running
  /// stats (momentum * old + (1 - momentum) * new, unbiased variance).
  /// Eval mode normalizes with the running stats.
  Var batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                double eps, double momentum, bool train, bool update_stats);

  // Engine -------------------------------------------------------------
  /// root must be scalar (numel 1): seeds d(root)=1, replays closures in
  /// reverse creation order, accumulates into bound Params. Calling it again
  /// on the same tape accumulates a second full pass.
  void backward(Var root);

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend struct Var;
  int push(Shape shape, bool needs_grad);
  Var make_unary(Var x, Shape out_shape,
                 const std::function<void(const Node&, Node&)>& fwd,
                 const std::function<void(Tape&, Node&)>& bwd);
  Var binary_broadcast(Var a, Var b, int op);

  std::deque<Node> nodes_;
};

}  // namespace efb::nn
