#include "iconforge/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "iconforge/error.hpp"

namespace iconforge::ad {

// ---- ParamStore ------------------------------------------------------------

Parameter& ParamStore::add(const std::string& name, std::vector<int> shape,
                           std::vector<float> value) {
  if (contains(name)) throw Error("param", "duplicate parameter '" + name + "'");
  std::size_t expected = 1;
  for (int s : shape) expected *= static_cast<std::size_t>(s);
  if (expected != value.size()) throw Error("shape", "parameter '" + name + "' size mismatch");
  Parameter p;
  p.name = name;
  p.shape = std::move(shape);
  p.grad.assign(value.size(), 0.0f);
  p.first_moment.assign(value.size(), 0.0f);
  p.second_moment.assign(value.size(), 0.0f);
  p.value = std::move(value);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("param", "no parameter '" + name + "'");
  return params_[it->second];
}

const Parameter& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("param", "no parameter '" + name + "'");
  return params_[it->second];
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0f);
}

void ParamStore::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& p : params_) {
    if (p.name.rfind(prefix, 0) == 0) p.trainable = trainable;
  }
}

bool ParamStore::same_values(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || a.shape != b.shape) return false;
    if (!std::equal(a.value.begin(), a.value.end(), b.value.begin(), b.value.end(),
                    [](float x, float y) { return std::memcmp(&x, &y, sizeof(float)) == 0; })) {
      return false;
    }
  }
  return true;
}

// ---- Tape ------------------------------------------------------------------

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor(value.channels, value.dims);
  return grad;
}

Var Tape::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Tape::variable(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = record_;
  if (record_) nodes_.push_back(n);
  return Var(std::move(n));
}

Var Tape::param(Parameter& p) {
  auto it = param_leaves_.find(&p);
  if (it != param_leaves_.end()) return it->second;
  auto n = std::make_shared<Node>();
  n->value = Tensor(1, {static_cast<int>(p.size()), 1, 1});
  std::copy(p.value.begin(), p.value.end(), n->value.data.begin());
  Var v(n);
  if (record_ && p.trainable) {
    n->requires_grad = true;
    Parameter* target = &p;
    n->backward = [target](Node& self) {
      for (std::size_t i = 0; i < target->grad.size(); ++i) target->grad[i] += self.grad.data[i];
    };
    nodes_.push_back(n);
  }
  param_leaves_.emplace(&p, v);
  return v;
}

Var Tape::param(const Parameter& p) {
  Tensor t(1, {static_cast<int>(p.size()), 1, 1});
  std::copy(p.value.begin(), p.value.end(), t.data.begin());
  return constant(std::move(t));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs,
                 std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  const bool needs = record_ && std::any_of(inputs.begin(), inputs.end(),
                                            [](const Var& v) { return v.requires_grad(); });
  if (needs) {
    n->requires_grad = true;
    n->backward = std::move(backward);
    nodes_.push_back(n);
  }
  return Var(std::move(n));
}

void Tape::backward(const Var& root, double seed) {
  if (consumed_) throw Error("tape-consumed", "backward already ran on this tape");
  consumed_ = true;
  if (!root.requires_grad()) return;
  auto& g = root.node().grad_buffer();
  std::fill(g.data.begin(), g.data.end(), static_cast<float>(seed));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.backward && n.grad.size() == n.value.size()) n.backward(n);
  }
}

// ---- operations -----------------------------------------------------------

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw Error("shape", std::string(op) + ": operand shapes differ");
}

void accumulate(Node& target, const Tensor& g) {
  auto& buf = target.grad_buffer();
  for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += g.data[i];
}

}  // namespace

Var conv3d(Tape& t, const Var& x, const Var& weight, const Var& bias, int out_channels) {
  Tensor out;
  kernels::conv3d_forward(x.value(), weight.value().data, bias.value().data, out_channels, out);
  auto xn = x.ptr(), wn = weight.ptr(), bn = bias.ptr();
  return t.record(std::move(out), {x, weight, bias}, [xn, wn, bn](Node& self) {
    Tensor* gx = xn->requires_grad ? &xn->grad_buffer() : nullptr;
    std::span<float> gw, gb;
    if (wn->requires_grad) gw = wn->grad_buffer().data;
    if (bn->requires_grad) gb = bn->grad_buffer().data;
    kernels::conv3d_backward(xn->value, wn->value.data, self.grad, gx, gw, gb);
  });
}

Var leaky_relu(Tape& t, const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data) v = v > 0.0f ? v : v * kernels::kLeakySlope;
  auto xn = x.ptr();
  return t.record(std::move(out), {x}, [xn](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      g.data[i] += xn->value.data[i] > 0.0f ? self.grad.data[i]
                                            : self.grad.data[i] * kernels::kLeakySlope;
    }
  });
}

Var avg_pool2x(Tape& t, const Var& x) {
  Tensor out;
  kernels::avg_pool2x_forward(x.value(), out);
  auto xn = x.ptr();
  return t.record(std::move(out), {x}, [xn](Node& self) {
    kernels::avg_pool2x_backward(self.grad, xn->grad_buffer());
  });
}

Var trilinear_upsample(Tape& t, const Var& x, const Dims3& target) {
  Tensor out;
  kernels::resize_forward(x.value(), target, out);
  auto xn = x.ptr();
  return t.record(std::move(out), {x}, [xn](Node& self) {
    kernels::resize_backward(self.grad, xn->grad_buffer());
  });
}

Var concat_channels(Tape& t, const Var& a, const Var& b) {
  if (a.value().dims != b.value().dims) throw Error("shape", "concat: spatial dims differ");
  Tensor out(a.value().channels + b.value().channels, a.value().dims);
  std::copy(a.value().data.begin(), a.value().data.end(), out.data.begin());
  std::copy(b.value().data.begin(), b.value().data.end(),
            out.data.begin() + static_cast<std::ptrdiff_t>(a.value().size()));
  auto an = a.ptr(), bn = b.ptr();
  return t.record(std::move(out), {a, b}, [an, bn](Node& self) {
    const std::size_t na = an->value.size();
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < na; ++i) g.data[i] += self.grad.data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[na + i];
    }
  });
}

Var add(Tape& t, const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
  auto an = a.ptr(), bn = b.ptr();
  return t.record(std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) accumulate(*an, self.grad);
    if (bn->requires_grad) accumulate(*bn, self.grad);
  });
}

Var mul(Tape& t, const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
  auto an = a.ptr(), bn = b.ptr();
  return t.record(std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i] * bn->value.data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i] * an->value.data[i];
    }
  });
}

Var scale(Tape& t, const Var& x, double s) {
  Tensor out = x.value();
  for (auto& v : out.data) v = static_cast<float>(v * s);
  auto xn = x.ptr();
  return t.record(std::move(out), {x}, [xn, s](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += static_cast<float>(self.grad.data[i] * s);
  });
}

Var sum(Tape& t, const Var& x) {
  double s = 0.0;
  for (float v : x.value().data) s += v;
  auto xn = x.ptr();
  return t.record(Tensor::scalar(static_cast<float>(s)), {x}, [xn](Node& self) {
    auto& g = xn->grad_buffer();
    const float seed = self.grad.data[0];
    for (auto& v : g.data) v += seed;
  });
}

Var warp(Tape& t, const Var& field, const Var& map) {
  Tensor out;
  kernels::warp_forward(field.value(), map.value(), out);
  auto fn = field.ptr(), mn = map.ptr();
  return t.record(std::move(out), {field, map}, [fn, mn](Node& self) {
    kernels::warp_backward(fn->value, mn->value, self.grad,
                           fn->requires_grad ? &fn->grad_buffer() : nullptr,
                           mn->requires_grad ? &mn->grad_buffer() : nullptr);
  });
}

Var lncc_similarity(Tape& t, const Var& a, const Var& b, int radius, double epsilon,
                    double* value_out) {
  require_same(a.value(), b.value(), "lncc");
  if (a.value().channels != 1) throw Error("shape", "lncc expects single-channel images");
  const bool needs = t.recording() && (a.requires_grad() || b.requires_grad());
  auto cache = needs ? std::make_shared<kernels::LnccCache>() : nullptr;
  const double value = kernels::lncc_forward(a.value().data, b.value().data, a.value().dims,
                                             radius, epsilon, cache.get());
  if (value_out != nullptr) *value_out = value;
  auto an = a.ptr(), bn = b.ptr();
  return t.record(Tensor::scalar(static_cast<float>(value)), {a, b},
                  [an, bn, cache, radius](Node& self) {
                    std::span<float> ga, gb;
                    if (an->requires_grad) ga = an->grad_buffer().data;
                    if (bn->requires_grad) gb = bn->grad_buffer().data;
                    kernels::lncc_backward(an->value.data, bn->value.data, an->value.dims, radius,
                                           *cache, self.grad.data[0], ga, gb);
                  });
}

Var jacobian_penalty(Tape& t, const Var& map, double* value_out) {
  const double value = kernels::jacobian_penalty_forward(map.value());
  if (value_out != nullptr) *value_out = value;
  auto mn = map.ptr();
  return t.record(Tensor::scalar(static_cast<float>(value)), {map}, [mn](Node& self) {
    kernels::jacobian_penalty_backward(mn->value, self.grad.data[0], mn->grad_buffer());
  });
}

Var gradicon_regularizer(Tape& t, const Var& phi_ab, const Var& phi_ba, double* value_out) {
  if (!phi_ab.value().same_shape(phi_ba.value()) || phi_ab.value().channels != 3) {
    throw Error("shape", "gradicon regularizer needs two maps on the same grid");
  }
  return jacobian_penalty(t, warp(t, phi_ab, phi_ba), value_out);
}

// ---- optimizer -------------------------------------------------------------

void adam_step(ParamStore& params, const AdamConfig& cfg) {
  for (const auto& p : params.all()) {
    if (!p.trainable) continue;
    for (float g : p.grad) {
      if (!std::isfinite(g)) {
        params.zero_grad();
        throw Error("nonfinite-grad", "gradient of '" + p.name + "' is not finite");
      }
    }
  }
  for (auto& p : params.all()) {
    if (!p.trainable) continue;
    ++p.steps;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.steps));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.steps));
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double m = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
      p.first_moment[i] = static_cast<float>(m);
      p.second_moment[i] = static_cast<float>(v);
      const double step = cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.epsilon);
      p.value[i] = static_cast<float>(p.value[i] - step);
    }
  }
  params.zero_grad();
}

}  // namespace iconforge::ad
