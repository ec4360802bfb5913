#include "latx/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace latx {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor make_leaf(const Shape& shape, bool requires_grad) {
  for (int d : shape)
    if (d <= 0) throw std::invalid_argument("tensor: nonpositive dim in " + shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = shape;
  n->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor make_op(const Shape& shape, const std::vector<Tensor>& inputs, const char* op) {
  auto n = std::make_shared<detail::Node>();
  n->shape = shape;
  n->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->op = op;
  bool rg = false;
  for (const auto& t : inputs) rg = rg || (t.defined() && t.requires_grad());
  n->requires_grad = rg;
  if (rg) {
    for (const auto& t : inputs)
      if (t.defined()) n->parents.push_back(t.node_);
  }
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return make_leaf(shape, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
  Tensor t = make_leaf(shape, requires_grad);
  for (auto& x : t.vec()) x = v;
  return t;
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  Tensor t = make_leaf(shape, requires_grad);
  t.node_->value = std::move(data);
  return t;
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = make_leaf(shape, requires_grad);
  for (auto& x : t.vec()) x = rng.gauss(0.0, stddev);
  return t;
}

Tensor Tensor::uniform(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad) {
  Tensor t = make_leaf(shape, requires_grad);
  for (auto& x : t.vec()) x = rng.uniform(lo, hi);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
  return node_->shape;
}

int Tensor::dim(int i) const {
  const auto& s = shape();
  int n = static_cast<int>(s.size());
  if (i < 0) i += n;
  if (i < 0 || i >= n) throw std::out_of_range("tensor: dim index out of range");
  return s[i];
}

int64_t Tensor::numel() const { return shape_numel(shape()); }

double* Tensor::data() { return vec().data(); }
const double* Tensor::data() const { return vec().data(); }

std::vector<double>& Tensor::vec() {
  if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
  return node_->value;
}

const std::vector<double>& Tensor::vec() const {
  if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw std::runtime_error("tensor: item() on non-scalar " + shape_str(shape()));
  return vec()[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const auto& s = shape();
  if (idx.size() != s.size()) throw std::invalid_argument("tensor: at() rank mismatch");
  int64_t off = 0;
  size_t k = 0;
  for (int i : idx) {
    off = off * s[k] + i;
    ++k;
  }
  return vec()[static_cast<size_t>(off)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::vector<double>& Tensor::grad() const {
  if (!node_ || node_->grad.size() != node_->value.size())
    throw std::runtime_error("tensor: gradient not populated");
  return node_->grad;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  Tensor t = make_leaf(shape(), false);
  t.node_->value = vec();
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = make_leaf(shape(), requires_grad());
  t.node_->value = vec();
  return t;
}

void Tensor::check_finite(const char* what) const {
  for (double v : vec())
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value in ") + what);
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  if (!loss.node_->requires_grad)
    throw std::invalid_argument("backward: loss does not require gradients");

  // Iterative post-order topological sort; the graph is acyclic by
  // construction (ops only reference already-built nodes).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  struct Item {
    detail::Node* n;
    size_t next_child;
  };
  std::vector<Item> stack;
  stack.push_back({loss.node_.get(), 0});
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    Item& it = stack.back();
    if (it.next_child < it.n->parents.size()) {
      detail::Node* p = it.n->parents[it.next_child++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(it.n);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) n->ensure_grad();
  loss.node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace latx
