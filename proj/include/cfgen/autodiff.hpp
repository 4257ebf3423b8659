#pragma once

// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// A Graph records every primitive op applied during one forward pass. Nodes
// are appended in evaluation order, so the tape is topologically sorted by
// construction and backward() is a single reverse sweep.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cfgen/tensor.hpp"

namespace cfgen::ad {

/// Handle to a node on a Graph. Only meaningful for the graph that issued it.
struct Var {
  std::size_t id = 0;
};

class Graph {
 public:
  /// Backward rule: receives the graph and the gradient flowing into the
  /// node's output, and accumulates into its operands via accumulate().
  using BackwardFn = std::function<void(Graph&, const Tensor&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf flagged as requiring a gradient (parameters, latent inputs).
  Var variable(Tensor value);

  /// Appends an op result. `fn` is dropped when no operand requires a gradient.
  Var record(Tensor value, std::vector<Var> operands, BackwardFn fn);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar seed. Throws ContractError for non-scalar seeds.
  void backward(Var seed);

  /// Gradient of the last backward() seed w.r.t. `v`; zeros if unreached.
  Tensor grad(Var v) const;

  /// Used by backward rules.
  void accumulate(Var v, const Tensor& g);

 private:
  struct Node {
    Tensor value;
    std::vector<Var> operands;
    BackwardFn backward;
    bool requires_grad = false;
    std::optional<Tensor> grad;
  };
  std::vector<Node> nodes_;
};

enum class Activation { relu, tanh, sigmoid };

// ---- primitive ops ---------------------------------------------------------
// Shapes: linear x[B,in] W[in,out] b[out]; conv2d x[B,Cin,H,W] k[Cout,Cin,K,K]
// b[Cout]. Elementwise binary ops require identical shapes (no broadcasting).

Var linear(Graph& g, Var x, Var w, Var b);
Var conv2d(Graph& g, Var x, Var kernel, Var bias, int stride, int padding);

Var relu(Graph& g, Var x);
Var tanh(Graph& g, Var x);
Var sigmoid(Graph& g, Var x);
Var activation(Graph& g, Var x, Activation kind);
Var softmax(Graph& g, Var x, std::size_t axis);

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double c);
Var square(Graph& g, Var x);
Var exp(Graph& g, Var x);
Var sum(Graph& g, Var x);
Var mean(Graph& g, Var x);
/// Euclidean norm of all elements; the gradient at the origin is taken as 0.
Var l2_norm(Graph& g, Var x);

Var reshape(Graph& g, Var x, Shape shape);
Var concat(Graph& g, std::span<const Var> parts, std::size_t axis);
Var slice(Graph& g, Var x, std::size_t axis, std::size_t begin, std::size_t end);
/// Copies the value as a constant: gradients stop here.
Var detach(Graph& g, Var x);

// ---- losses ----------------------------------------------------------------

/// Mean of squared differences over all elements.
Var loss_mse(Graph& g, Var a, Var b);
/// Mean cross-entropy of softmax over `axis` against integer class targets,
/// one target per position of the remaining axes (row-major order).
Var loss_categorical(Graph& g, Var logits, std::span<const int> targets, std::size_t axis = 1);
/// KL(N(mu, exp(logvar)) || N(0, I)): summed over the last axis, averaged
/// over leading axes.
Var gaussian_kl(Graph& g, Var mu, Var logvar);

// ---- finite-difference checking -------------------------------------------

/// Builds a scalar from a single variable input on a fresh graph.
using ScalarFn = std::function<Var(Graph&, Var)>;

struct GradCheckOptions {
  double step = 1e-4;
  /// Denominator floor of the relative error, guarding near-zero gradients.
  double floor = 1e-4;
  /// If non-empty, only these coordinates are checked.
  std::vector<std::size_t> coordinates;
};

/// Maximum coordinate-wise relative error between backward() and central
/// differences: |a - n| / max(|a|, |n|, floor).
double grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& options = {});

/// Central-difference gradient, exposed for oracles.
Tensor numeric_gradient(const ScalarFn& f, const Tensor& x, double step,
                        std::span<const std::size_t> coordinates = {});

}  // namespace cfgen::ad
