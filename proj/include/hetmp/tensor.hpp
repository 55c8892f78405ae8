#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hetmp {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checked mode: every op scans its output for NaN/Inf and throws NumericError.
void set_checked_mode(bool enabled);
bool checked_mode();

template <typename T>
class Tape;

template <typename T>
struct TensorNode {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  // Propagates this node's grad into its inputs. Empty for leaves.
  std::function<void(TensorNode&)> backward;
  const Tape<T>* tape = nullptr;
  std::size_t tape_id = 0;

  bool is_leaf() const { return !backward; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

/// Dense row-major 2-D array. Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T(0));
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> values);

  static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<T> values);
  static Tensor scalar(T v) { return Tensor(1, 1, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  T operator()(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  T& at(std::size_t r, std::size_t c) { return node_->value[r * node_->cols + c]; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const;
  /// Same values, no gradient history.
  Tensor detach() const { return clone(); }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Records differentiable ops in execution order. Ops record onto the tape
/// that is active on the calling thread (see Tape::Scope).
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const std::shared_ptr<TensorNode<T>>& node);

  /// Seeds d(loss)=1 and runs every recorded backward rule in reverse order.
  /// Leaf gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor<T>& loss);

  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  static Tape* active();

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  std::vector<std::shared_ptr<TensorNode<T>>> nodes_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace hetmp
