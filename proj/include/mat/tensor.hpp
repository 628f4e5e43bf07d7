#pragma once
// Reverse-mode autodiff over dense f64 tensors. The graph is dynamic: every
// forward pass builds a fresh DAG of shared_ptr nodes, backward() walks it
// once in reverse topological order, and releasing the root frees the graph.
//
// Gradient storage is two-tier. Leaves created with requires_grad own a
// persistent .grad buffer that accumulates across backward() calls until
// zero_grad(). Interior nodes only ever see transient per-pass buffers
// owned by the BackwardPass, so memory for activation gradients is released
// as soon as the pass ends.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace mat::gradcore {

class BackwardPass;

struct Node {
  std::vector<int> shape;
  // Values are shared so detach() can alias the buffer without copying.
  std::shared_ptr<std::vector<double>> values;
  std::vector<double> grad;  // persistent; leaves with requires_grad only
  bool requires_grad = false;
  // True when this node or any ancestor requires grad; ops consult this to
  // skip whole gradient branches (e.g. network params detached during the
  // adversarial power iteration).
  bool needs_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<double>&, BackwardPass&)> backward_fn;
  std::string name;

  int numel() const {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

using NodePtr = std::shared_ptr<Node>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node != nullptr; }
  const std::vector<int>& shape() const { return node->shape; }
  int numel() const { return node->numel(); }
  int dim(int i) const { return node->shape.at(static_cast<size_t>(i)); }

  double* data() { return node->values->data(); }
  const double* data() const { return node->values->data(); }
  std::vector<double>& values() { return *node->values; }
  const std::vector<double>& values() const { return *node->values; }

  // Scalar nodes only.
  double item() const;

  bool requires_grad() const { return node && node->requires_grad; }

  // Persistent gradient of a requires_grad leaf; allocated zeroed on first
  // access. Throws for non-leaf or non-grad tensors.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  // Leaf alias of the same value buffer with requires_grad off. Gradients
  // never flow through a detached view.
  Tensor detach() const;

  Tensor& set_name(std::string n) {
    node->name = std::move(n);
    return *this;
  }
  const std::string& name() const { return node->name; }

  NodePtr node;
};

// Builds an interior node. `backward_fn` receives the node's upstream
// gradient and must scatter into the parents' buffers via
// BackwardPass::buffer (which returns nullptr for branches that do not
// need gradients -- always check). Inputs that do not need gradients are
// still recorded as parents so the graph keeps their values alive.
Tensor make_op(std::vector<int> shape, std::vector<double> values,
               std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>&, BackwardPass&)>
                   backward_fn);

// Same, but the output buffer is supplied as a shared_ptr so the closure may
// alias it (ops whose backward reads their own forward output).
Tensor make_op(std::vector<int> shape,
               std::shared_ptr<std::vector<double>> values,
               std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>&, BackwardPass&)>
                   backward_fn);

class BackwardPass {
 public:
  // Transient gradient accumulation buffer for `n`, zero-initialized on
  // first request. Returns nullptr when the node does not need gradients;
  // callers skip that branch entirely.
  std::vector<double>* buffer(const NodePtr& n);

  // Runs the pass from a scalar root. Seeds the root's buffer with 1 and
  // invokes backward_fn in reverse topological order.
  void run(const Tensor& root);

  // Nodes visited by run(), in topological order (parents before uses).
  const std::vector<Node*>& visited() const { return order_; }

  // Read-only view of a node's accumulated gradient, nullptr if none.
  const std::vector<double>* leaf_buffer(Node* n) const;

 private:
  std::vector<Node*> order_;
  std::unordered_map<Node*, std::vector<double>> buffers_;
};

// Full backward: accumulates d(out)/d(leaf) into every requires_grad leaf's
// persistent grad. `out` must be scalar.
void backward(const Tensor& out);

// Backward that harvests only d(out)/d(wrt); persistent grads of other
// leaves are untouched. Used for gradients w.r.t. inputs.
std::vector<double> input_gradient(const Tensor& out, const Tensor& wrt);

}  // namespace mat::gradcore
