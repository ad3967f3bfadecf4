#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ipdr/autodiff.hpp"

namespace ipdr::nn {

using Rng = std::mt19937_64;

inline Tensor randn(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

/// Named, ordered collection of trainable leaves. Names are unique and the
/// insertion order is the checkpoint order.
class ParamSet {
 public:
  ad::Var add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ArgumentError("parameter registered twice: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, ad::param(std::move(init)));
    return items_.back().second;
  }

  const std::vector<std::pair<std::string, ad::Var>>& items() const { return items_; }
  std::vector<std::pair<std::string, ad::Var>>& items() { return items_; }

  ad::Var* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }

  std::vector<ad::Var> vars() const {
    std::vector<ad::Var> out;
    for (const auto& [n, v] : items_) out.push_back(v);
    return out;
  }

  void zero_grad() {
    for (auto& [n, v] : items_) v.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t s = 0;
    for (const auto& [n, v] : items_) s += v.size();
    return s;
  }

 private:
  std::vector<std::pair<std::string, ad::Var>> items_;
  std::map<std::string, std::size_t> index_;
};

/// y = x W + b for x of shape N x in.
struct Linear {
  ad::Var w, b;
  std::size_t in = 0, out = 0;

  static Linear make(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    Linear l;
    l.in = in;
    l.out = out;
    l.w = ps.add(name + ".w", randn({in, out}, std::sqrt(1.0 / static_cast<double>(in)), rng));
    l.b = ps.add(name + ".b", Tensor({out}));
    return l;
  }

  ad::Var operator()(const ad::Var& x) const { return ad::add_rowvec(ad::matmul(x, w), b); }
};

/// Two affine layers with a GELU in between.
struct Mlp2 {
  Linear l1, l2;

  static Mlp2 make(ParamSet& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
                   Rng& rng) {
    Mlp2 m;
    m.l1 = Linear::make(ps, name + ".l1", in, hidden, rng);
    m.l2 = Linear::make(ps, name + ".l2", hidden, out, rng);
    return m;
  }

  ad::Var operator()(const ad::Var& x) const { return l2(ad::gelu(l1(x))); }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected first/second moment optimizer.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamSet& ps) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& items = ps.items();
    if (m_.size() != items.size()) {
      m_.clear();
      v_.clear();
      for (const auto& [n, p] : items) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    for (std::size_t k = 0; k < items.size(); ++k) {
      ad::Var& p = items[k].second;
      const Tensor& g = p.grad();
      Tensor& val = p.mutable_value();
      for (std::size_t i = 0; i < val.size(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mh = m_[k][i] / c1, vh = v_[k][i] / c2;
        val[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace ipdr::nn
