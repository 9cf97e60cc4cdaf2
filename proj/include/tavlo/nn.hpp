#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tavlo/autograd.hpp"

namespace tavlo::nn {

using ad::Var;

// Named trainable tensors in insertion order. Names are stable checkpoint
// keys such as "ast.3.spatial.attn.wq".
template <class S>
class ParameterSet {
 public:
  Var<S> add(const std::string& name, Tensor<S> init) {
    if (index_.count(name))
      throw InvalidConfig("duplicate parameter name '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, Var<S>(std::move(init), true));
    return entries_.back().second;
  }

  const std::vector<std::pair<std::string, Var<S>>>& entries() const {
    return entries_;
  }
  std::vector<std::pair<std::string, Var<S>>>& entries() { return entries_; }

  Var<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidInput("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }
  std::size_t numel() const {
    std::size_t n = 0;
    for (auto& [_, v] : entries_) n += v.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Var<S>>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <class S, class Rng>
Tensor<S> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<S> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : t.vec()) x = static_cast<S>(dist(rng));
  return t;
}

template <class S>
struct Linear {
  Var<S> weight;  // [in, out]
  Var<S> bias;    // [out]

  template <class Rng>
  static Linear make(ParameterSet<S>& ps, const std::string& name,
                     std::size_t in, std::size_t out, Rng& rng,
                     double gain = 1.0) {
    Linear l;
    l.weight = ps.add(name + ".w",
                      normal_tensor<S>({in, out}, gain / std::sqrt(double(in)), rng));
    l.bias = ps.add(name + ".b", Tensor<S>({out}));
    return l;
  }
  Var<S> operator()(const Var<S>& x) const { return ad::linear(x, weight, &bias); }
};

template <class S>
struct LayerNorm {
  Var<S> gamma, beta;
  S eps = S(1e-5);

  static LayerNorm make(ParameterSet<S>& ps, const std::string& name,
                        std::size_t d, S eps = S(1e-5)) {
    LayerNorm l;
    l.gamma = ps.add(name + ".gamma", Tensor<S>({d}, S(1)));
    l.beta = ps.add(name + ".beta", Tensor<S>({d}));
    l.eps = eps;
    return l;
  }
  Var<S> operator()(const Var<S>& x) const {
    return ad::layer_norm(x, gamma, beta, eps);
  }
};

template <class S>
struct Conv2d {
  Var<S> weight;  // [kh*kw*cin, cout]
  Var<S> bias;
  ad::Conv2dGeometry geom;

  template <class Rng>
  static Conv2d make(ParameterSet<S>& ps, const std::string& name,
                     std::size_t cin, std::size_t cout,
                     const ad::Conv2dGeometry& g, Rng& rng) {
    Conv2d c;
    const std::size_t fan_in = g.kh * g.kw * cin;
    // He initialization for ReLU stacks
    c.weight = ps.add(name + ".w", normal_tensor<S>({fan_in, cout},
                                                    std::sqrt(2.0 / fan_in), rng));
    c.bias = ps.add(name + ".b", Tensor<S>({cout}));
    c.geom = g;
    return c;
  }
  Var<S> operator()(const Var<S>& x) const {
    return ad::conv2d(x, weight, bias, geom);
  }
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global L2 norm clip; 0 disables
};

// Adam with optional decoupled weight decay and global-norm clipping.
template <class S>
class Adam {
 public:
  Adam() = default;
  Adam(ParameterSet<S>& params, AdamOptions opt) : opt_(opt) {
    for (auto& [name, v] : params.entries()) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }

  // Returns the pre-clip global gradient norm.
  double step(ParameterSet<S>& params, double lr) {
    ++t_;
    double norm2 = 0;
    for (auto& [_, p] : params.entries())
      for (S g : p.grad().vec()) norm2 += double(g) * double(g);
    const double norm = std::sqrt(norm2);
    const double clip = (opt_.grad_clip > 0 && norm > opt_.grad_clip)
                            ? opt_.grad_clip / norm
                            : 1.0;
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    auto& entries = params.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
      auto& p = entries[k].second;
      auto& w = p.mutable_value();
      const auto& g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = double(g[i]) * clip;
        m[i] = S(opt_.beta1 * m[i] + (1 - opt_.beta1) * gi);
        v[i] = S(opt_.beta2 * v[i] + (1 - opt_.beta2) * gi * gi);
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        double upd = mh / (std::sqrt(vh) + opt_.eps);
        if (opt_.weight_decay > 0) upd += opt_.weight_decay * double(w[i]);
        w[i] = S(double(w[i]) - lr * upd);
      }
    }
    return norm;
  }

  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  std::vector<Tensor<S>>& first_moments() { return m_; }
  std::vector<Tensor<S>>& second_moments() { return v_; }
  const std::vector<Tensor<S>>& first_moments() const { return m_; }
  const std::vector<Tensor<S>>& second_moments() const { return v_; }
  const AdamOptions& options() const { return opt_; }

 private:
  AdamOptions opt_;
  std::vector<Tensor<S>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace tavlo::nn
