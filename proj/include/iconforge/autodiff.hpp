#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "iconforge/tensor.hpp"

// Reverse-mode differentiation over the closed set of operations the
// registration network and its loss need. A Tape records every operation whose
// inputs require gradients; backward() replays the adjoints in reverse order.
namespace iconforge::ad {

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;
  // Adam state
  std::vector<float> first_moment;
  std::vector<float> second_moment;
  std::int64_t steps = 0;
  bool trainable = true;

  std::size_t size() const { return value.size(); }
};

// Named parameters in insertion order. References stay valid while the store
// lives (parameters are never removed).
class ParamStore {
 public:
  Parameter& add(const std::string& name, std::vector<int> shape, std::vector<float> value);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  std::size_t total_size() const;

  void zero_grad();
  // Marks every parameter whose name starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable);

  // Values only, used to compare models bit for bit.
  bool same_values(const ParamStore& other) const;

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Tensor& value() const { return node_->value; }
  // Gradient after backward (zeros if nothing flowed here).
  const Tensor& grad() const { return node_->grad_buffer(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const { return node_->value.data.at(0); }
  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  // A non-recording tape evaluates operations without keeping adjoint state;
  // intermediate values are released as soon as no Var refers to them.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  // Leaf whose gradient is retained on the Var.
  Var variable(Tensor value);
  // Leaf bound to a parameter; its gradient accumulates into Parameter::grad.
  // Repeated calls for the same parameter return the same leaf.
  Var param(Parameter& p);
  // Read-only binding: the value enters the graph without gradient tracking.
  Var param(const Parameter& p);

  // Records an operation. `backward` receives the output node and must
  // accumulate into the inputs' grad buffers.
  Var record(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward);

  // Seeds d(root)/d(root) = seed at every element of root and propagates.
  // Throws Error("tape-consumed") on a second call.
  void backward(const Var& root, double seed = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  bool record_;
  bool consumed_ = false;
  std::vector<std::shared_ptr<Node>> nodes_;
  std::map<const Parameter*, Var> param_leaves_;
};

// ---- operations -----------------------------------------------------------

// weight: flat [out][in][3][3][3]; bias: [out].
Var conv3d(Tape& t, const Var& x, const Var& weight, const Var& bias, int out_channels);
Var leaky_relu(Tape& t, const Var& x);
Var avg_pool2x(Tape& t, const Var& x);
// Trilinear resize onto `target` dims (normally twice the input size).
Var trilinear_upsample(Tape& t, const Var& x, const Dims3& target);
Var concat_channels(Tape& t, const Var& a, const Var& b);
Var add(Tape& t, const Var& a, const Var& b);
Var mul(Tape& t, const Var& a, const Var& b);
Var scale(Tape& t, const Var& x, double s);
Var sum(Tape& t, const Var& x);
// Samples every channel of `field` at the 3-channel `map`; differentiable in
// both arguments.
Var warp(Tape& t, const Var& field, const Var& map);
// Scalar-valued ops store their result in float; `value_out` receives the
// double-precision value.
Var lncc_similarity(Tape& t, const Var& a, const Var& b, int radius, double epsilon,
                    double* value_out = nullptr);
Var jacobian_penalty(Tape& t, const Var& map, double* value_out = nullptr);
// ||grad(phi_ab o phi_ba) - I||_F^2 averaged over interior nodes.
Var gradicon_regularizer(Tape& t, const Var& phi_ab, const Var& phi_ba,
                         double* value_out = nullptr);

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam update of every trainable parameter, then zeroes
// all gradients. Throws Error("nonfinite-grad") without touching any value
// when a trainable gradient is not finite.
void adam_step(ParamStore& params, const AdamConfig& cfg);

}  // namespace iconforge::ad
