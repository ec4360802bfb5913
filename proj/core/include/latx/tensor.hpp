#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "latx/rng.hpp"

namespace latx {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // pulls self.grad into parents
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Dense float64 tensor. A Tensor is a cheap handle onto a graph node; ops on
// tensors that require gradients record a reverse-mode tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int dim(int i) const;  // negative indices allowed
  int64_t numel() const;

  double* data();
  const double* data() const;
  std::vector<double>& vec();
  const std::vector<double>& vec() const;
  double item() const;  // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  const std::vector<double>& grad() const;  // throws if absent
  bool has_grad() const;
  void zero_grad();

  Tensor detach() const;  // same values, fresh leaf, no grad
  Tensor clone() const;   // deep copy leaf preserving requires_grad

  void check_finite(const char* what) const;

  std::shared_ptr<detail::Node> node_;  // exposed for op implementations

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_leaf(const Shape&, bool);
  friend Tensor make_op(const Shape&, const std::vector<Tensor>&, const char*);
};

// Internal constructors used by op implementations.
Tensor make_leaf(const Shape& shape, bool requires_grad);
Tensor make_op(const Shape& shape, const std::vector<Tensor>& inputs, const char* op);

// Reverse-mode sweep from a scalar loss. Populates .grad on every
// requires_grad leaf reachable from the loss.
void backward(const Tensor& loss);

// Frequency-domain intermediate: real and imaginary planes share a shape.
struct ComplexTensor {
  Shape shape;
  std::vector<double> re, im;

  int64_t numel() const { return shape_numel(shape); }
};

}  // namespace latx
