#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "duplex/numerics/array.hpp"
#include "duplex/numerics/params.hpp"

namespace duplex::num {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Array& value() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode recorder over a fixed operator set. Values are checked for
/// finiteness as they are recorded. Not thread-safe; use one tape per thread.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  /// Leaf whose gradient is accumulated into `p.grad` by backward().
  Var param(Param& p);
  /// Leaf with a readable gradient (for checks against inputs).
  Var leaf(Array value);

  Var record(Array value, std::vector<std::size_t> parents, Backward backward);

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  /// Gradient buffer of a node, allocated as zeros on first use.
  Array& grad(std::size_t id);
  const Array& grad_of(Var v) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one value.
  void backward(Var loss);

 private:
  struct Node {
    Array value;
    Array grad;
    Backward backward;
    Param* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

// Recorded operators. All operands must live on the same tape.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
/// Adds a single-row bias to every row.
Var add_row(Var a, Var bias);
Var linear(Var x, Var w, Var b);
Var softmax_rows(Var a);
Var exp(Var a);
Var tanh(Var a);
/// tanh-approximated GELU.
Var gelu(Var a);
Var layernorm_rows(Var x, Var gamma, Var beta, float eps = 1e-5F);
/// Rotates column pairs (2m, 2m+1) of each `head_dim` block of row r by
/// positions[r] * base^(-2m/head_dim).
Var rope_rows(Var x, std::span<const float> positions, std::size_t head_dim, float base);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var sum_all(Var a);
Var mean_all(Var a);
/// Mean over rows with nonzero weight of weight * ||pred_row - target_row||^2,
/// divided by (active rows * cols).
Var masked_mse(Var pred, const Array& target, std::span<const float> row_weights);

/// Non-recorded rotary kernel shared with the positional module.
void rope_rotate_inplace(Array& x, std::span<const float> positions, std::size_t head_dim,
                         float base, bool inverse);

}  // namespace duplex::num
