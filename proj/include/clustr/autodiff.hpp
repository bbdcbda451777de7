#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "clustr/tensor.hpp"

namespace clustr {

/// A named trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

/// Owns every Parameter of one model. Names are unique; references stay valid for the store's lifetime.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name) != 0) throw ParameterError("duplicate parameter name: " + name);
    params_.emplace_back(name, std::move(value));
    index_.emplace(name, &params_.back());
    return params_.back();
  }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParameterError("unknown parameter: " + name);
    return *it->second;
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParameterError("unknown parameter: " + name);
    return *it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  /// Parameters in creation order.
  std::vector<Parameter<T>*> all() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  std::vector<const Parameter<T>*> all() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t count_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }
  std::size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, Parameter<T>*> index_;
};

template <typename T>
class Tape;

/// Handle to a node on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records forward values and backward closures for reverse-mode differentiation.
///
/// Node ids are assigned in creation order, and every op only consumes existing
/// nodes, so reverse id order is a valid topological order for the backward sweep.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(const Tensor<T>& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf for `p`; repeated calls on one tape return the same node.
  Var<T> parameter(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
    // Parameters are copied onto the tape so later optimizer writes cannot alias recorded values.
    Var<T> v = push(p.value, grad_enabled_, nullptr);
    nodes_.back().param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Adds an op result. `fn` is kept only when some input requires a gradient.
  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs, Backward fn) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in);
    return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
  }

  bool requires_grad(Var<T> v) const { return nodes_[v.id()].requires_grad; }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id()].value; }

  /// Gradient accumulator of `v`, allocated on first use.
  Tensor<T>& grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  const Tensor<T>* grad(Var<T> v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  /// Backpropagates from a single-element output and adds leaf gradients into their Parameters.
  void backward(Var<T> out) {
    if (!grad_enabled_) throw NumericError("backward on a tape recorded without gradients");
    if (value(out).size() != 1) {
      throw ShapeError("backward expects a scalar output, got " + shape_string(value(out).shape()));
    }
    grad_buffer(out)[0] += T{1};
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) {
        n.backward(n.grad);
      } else if (n.param != nullptr) {
        auto& dst = n.param->grad.storage();
        const auto& src = n.grad.storage();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Backward fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, std::move(fn), nullptr, requires_grad});
    return Var<T>(this, nodes_.size() - 1);
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::map<const Parameter<T>*, std::size_t> param_nodes_;
};

}  // namespace clustr
