#include "hetmp/tensor.hpp"

#include <atomic>

namespace hetmp {

namespace {
std::atomic<bool> g_checked{false};
}  // namespace

void set_checked_mode(bool enabled) { g_checked.store(enabled); }
bool checked_mode() { return g_checked.load(); }

template <typename T>
Tensor<T>::Tensor(std::size_t rows, std::size_t cols, T fill)
    : node_(std::make_shared<TensorNode<T>>()) {
  node_->rows = rows;
  node_->cols = cols;
  node_->value.assign(rows * cols, fill);
}

template <typename T>
Tensor<T>::Tensor(std::size_t rows, std::size_t cols, std::vector<T> values)
    : node_(std::make_shared<TensorNode<T>>()) {
  if (values.size() != rows * cols) {
    throw DimensionError("tensor: " + std::to_string(values.size()) + " values for shape " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  node_->rows = rows;
  node_->cols = cols;
  node_->value = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::parameter(std::size_t rows, std::size_t cols, std::vector<T> values) {
  Tensor t(rows, cols, std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw DimensionError("item() on a non-scalar tensor");
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t(rows(), cols(), node_->value);
  t.set_requires_grad(node_->requires_grad && node_->is_leaf());
  return t;
}

namespace {
template <typename T>
thread_local Tape<T>* t_active_tape = nullptr;
}  // namespace

template <typename T>
Tape<T>* Tape<T>::active() {
  return t_active_tape<T>;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(t_active_tape<T>) {
  t_active_tape<T> = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  t_active_tape<T> = previous_;
}

template <typename T>
void Tape<T>::record(const std::shared_ptr<TensorNode<T>>& node) {
  node->tape = this;
  node->tape_id = nodes_.size();
  nodes_.push_back(node);
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw DimensionError("backward: loss must be a 1x1 tensor");
  }
  const auto& root = loss.node();
  if (root->tape != this || root->tape_id >= nodes_.size() || nodes_[root->tape_id] != root) {
    throw std::logic_error("backward: loss was not recorded on this tape");
  }
  for (auto& n : nodes_) n->grad.assign(n->value.size(), T(0));
  root->grad[0] = T(1);
  for (std::size_t i = root->tape_id + 1; i-- > 0;) {
    auto& n = *nodes_[i];
    n.backward(n);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace hetmp
