#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "dsran/error.hpp"
#include "dsran/types.hpp"

namespace dsran {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid for the tape's lifetime.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& data() const;
  const Mat& grad() const;
  Index rows() const;
  Index cols() const;
  double scalar() const;  // requires a 1x1 value
};

// Per-channel batch normalization state. gamma/beta are learnable, the
// running statistics are buffers written by training-mode forwards.
struct BatchNormState {
  Mat gamma;         // 1xC
  Mat beta;          // 1xC
  Mat running_mean;  // 1xC
  Mat running_var;   // 1xC
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNormState make(Index channels);
};

// Append-only record of a forward computation. Creation order is a valid
// topological order, so backward() replays nodes in reverse. A tape is
// single-threaded; run concurrent work on distinct tapes.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value leaf(Mat data);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node.
  // Gradients are reset at the start, so backward() is idempotent.
  void backward(Value loss);

  const Mat& data(int id) const { return nodes_[static_cast<std::size_t>(id)].data; }
  Mat& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Mat& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Deliberately corrupts the relu backward. Negative control for gradcheck.
  void inject_grad_bug(bool on) { inject_grad_bug_ = on; }
  bool grad_bug_injected() const { return inject_grad_bug_; }

  Value alloc(Mat data);
  void set_back(Value v, std::function<void(Tape&)> back);

 private:
  struct Node {
    Mat data;
    Mat grad;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;
  bool inject_grad_bug_ = false;
};

// Maps host parameter matrices to tape leaves, one leaf per matrix no matter
// how many times it is used in a forward pass, so fan-out gradients
// accumulate onto a single node.
class Binder {
 public:
  explicit Binder(Tape& tape) : tape_(&tape) {}

  Tape& tape() { return *tape_; }

  Value operator()(const Mat& host);

  // -1 when the matrix never entered the graph.
  int id_of(const Mat& host) const;

  // Zero matrix of the host's shape when the parameter was unused.
  Mat grad_of(const Mat& host) const;

 private:
  Tape* tape_;
  std::unordered_map<const Mat*, Value> cache_;
};

// --- differentiable ops ---------------------------------------------------

Value matmul(Value x, Value w);             // x * w
Value linear(Value x, Value w);             // alias of matmul
Value linear(Value x, Value w, Value b);    // x * w + b, b broadcast over rows
Value scaled_dot(Value a, Value b, double scale);  // scale * a * b^T
Value scaled_dot(Value a, Value b);                // scale = 1/sqrt(cols)
Value softmax_rows(Value x);
Value relu(Value x);
Value sigmoid(Value x);
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value hadamard(Value a, Value b);
Value affine(Value x, double scale, double shift);
Value concat_nodes(const std::vector<Value>& xs);  // stack along rows
Value concat_cols(const std::vector<Value>& xs);
Value slice_rows(Value x, Index row0, Index nrows);
Value mean_pool_nodes(Value x);  // NxD -> 1xD
Value l2_normalize_rows(Value x);
Value gather_rows(Value table, const std::vector<std::uint32_t>& ids);
Value sum_all(Value x);  // -> 1x1
Value batchnorm(Value x, Value gamma, Value beta, BatchNormState& st, Mode mode);

}  // namespace dsran
