#include "mat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace mat::gradcore {

namespace {
int shape_numel(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor shape has negative dim");
    n *= d;
  }
  return n;
}
}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  int n = shape_numel(shape);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::make_shared<std::vector<double>>(n, 0.0);
  node->requires_grad = requires_grad;
  node->needs_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.values().begin(), t.values().end(), v);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  int n = shape_numel(shape);
  if (static_cast<size_t>(n) != data.size())
    throw std::invalid_argument("from_data: shape/data size mismatch");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::make_shared<std::vector<double>>(std::move(data));
  node->requires_grad = requires_grad;
  node->needs_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({}, {v}, requires_grad);
}

double Tensor::item() const {
  if (!node || node->numel() != 1)
    throw std::invalid_argument("item(): tensor is not scalar");
  return (*node->values)[0];
}

std::vector<double>& Tensor::grad() {
  if (!node || !node->requires_grad)
    throw std::logic_error("grad(): tensor does not track gradients");
  if (node->grad.empty())
    node->grad.assign(static_cast<size_t>(node->numel()), 0.0);
  return node->grad;
}

const std::vector<double>& Tensor::grad() const {
  return const_cast<Tensor*>(this)->grad();
}

void Tensor::zero_grad() {
  if (node && !node->grad.empty())
    std::fill(node->grad.begin(), node->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node->shape;
  n->values = node->values;  // alias, no copy
  n->requires_grad = false;
  n->needs_grad = false;
  n->name = node->name;
  return Tensor(std::move(n));
}

Tensor make_op(std::vector<int> shape, std::vector<double> values,
               std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>&, BackwardPass&)>
                   backward_fn) {
  return make_op(std::move(shape),
                 std::make_shared<std::vector<double>>(std::move(values)),
                 std::move(inputs), std::move(backward_fn));
}

Tensor make_op(std::vector<int> shape,
               std::shared_ptr<std::vector<double>> values,
               std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>&, BackwardPass&)>
                   backward_fn) {
  int n = shape_numel(shape);
  if (!values || static_cast<size_t>(n) != values->size())
    throw std::invalid_argument("make_op: shape/value size mismatch");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->parents.reserve(inputs.size());
  for (auto& t : inputs) {
    if (!t.defined()) throw std::invalid_argument("make_op: undefined input");
    node->needs_grad = node->needs_grad || t.node->needs_grad;
    node->parents.push_back(t.node);
  }
  if (node->needs_grad) node->backward_fn = std::move(backward_fn);
  return Tensor(std::move(node));
}

std::vector<double>* BackwardPass::buffer(const NodePtr& n) {
  if (!n->needs_grad) return nullptr;
  auto [it, inserted] = buffers_.try_emplace(n.get());
  if (inserted) it->second.assign(static_cast<size_t>(n->numel()), 0.0);
  return &it->second;
}

void BackwardPass::run(const Tensor& root) {
  if (root.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  if (!root.node->needs_grad) return;

  // Iterative post-order DFS over the needs_grad subgraph.
  order_.clear();
  std::unordered_map<Node*, int> state;  // 0 unseen, 1 open, 2 done
  std::vector<Node*> stack{root.node.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    int& st = state[n];
    if (st == 0) {
      st = 1;
      for (auto& p : n->parents)
        if (p->needs_grad && state[p.get()] == 0) stack.push_back(p.get());
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        order_.push_back(n);
      }
    }
  }

  buffers_.reserve(order_.size());
  buffers_[root.node.get()] = {1.0};

  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* n = *it;
    if (!n->backward_fn) continue;
    auto bit = buffers_.find(n);
    if (bit == buffers_.end()) continue;  // no gradient reached this node
    n->backward_fn(bit->second, *this);
  }
}

void backward(const Tensor& out) {
  BackwardPass pass;
  pass.run(out);
  for (Node* n : pass.visited()) {
    if (!n->requires_grad) continue;
    const std::vector<double>* buf = pass.leaf_buffer(n);
    if (!buf) continue;
    if (n->grad.empty()) n->grad.assign(static_cast<size_t>(n->numel()), 0.0);
    for (size_t i = 0; i < buf->size(); ++i) n->grad[i] += (*buf)[i];
  }
}

const std::vector<double>* BackwardPass::leaf_buffer(Node* n) const {
  auto it = buffers_.find(n);
  return it == buffers_.end() ? nullptr : &it->second;
}

std::vector<double> input_gradient(const Tensor& out, const Tensor& wrt) {
  if (!wrt.node->needs_grad)
    throw std::invalid_argument("input_gradient: wrt does not track gradients");
  BackwardPass pass;
  pass.run(out);
  const std::vector<double>* buf = pass.leaf_buffer(wrt.node.get());
  if (!buf) return std::vector<double>(static_cast<size_t>(wrt.numel()), 0.0);
  return *buf;
}

}  // namespace mat::gradcore
