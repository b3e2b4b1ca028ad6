#pragma once

#include "mvcodot/autograd.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvcodot::nn {

using ag::Var;

// Named, ordered collection of trainable tensors. Names are module paths
// such as "decoder.lstm.W"; iteration order is lexicographic so that
// serialisation and optimiser updates are order-stable.
class ParameterStore {
 public:
  Var& add(const std::string& name, Matrix init) {
    auto [it, inserted] = params_.emplace(name, Var::parameter(std::move(init)));
    if (!inserted) throw std::logic_error("duplicate parameter: " + name);
    return it->second;
  }

  Var& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  const Var& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Var>& all() { return params_; }
  const std::map<std::string, Var>& all() const { return params_; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  // L2 norm of the gradients whose name starts with `prefix`.
  double grad_norm(const std::string& prefix = "") const {
    double s = 0.0;
    for (const auto& [name, p] : params_) {
      if (name.rfind(prefix, 0) != 0) continue;
      if (p.grad().size() != 0) s += p.grad().squaredNorm();
    }
    return std::sqrt(s);
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value().size());
    return n;
  }

 private:
  std::map<std::string, Var> params_;
};

inline Matrix xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
  return m;
}

inline Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = d(rng);
  return m;
}

// Affine map applied row-wise: y = x W + b.
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out,
         std::mt19937_64& rng)
      : weight_(store.add(name + ".W", xavier_uniform(in, out, rng))),
        bias_(store.add(name + ".b", Matrix::Zero(1, out))) {}

  Var operator()(const Var& x) const {
    if (x.cols() != weight_.rows()) {
      throw std::invalid_argument("Linear: expected " + std::to_string(weight_.rows()) +
                                  " input features, got " + std::to_string(x.cols()));
    }
    return ag::add_row(ag::matmul(x, weight_), bias_);
  }

  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }
  Eigen::Index in_features() const { return weight_.rows(); }
  Eigen::Index out_features() const { return weight_.cols(); }

 private:
  Var weight_;
  Var bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, Eigen::Index dim)
      : gain_(store.add(name + ".g", Matrix::Ones(1, dim))),
        bias_(store.add(name + ".b", Matrix::Zero(1, dim))) {}

  Var operator()(const Var& x) const { return ag::layer_norm_rows(x, gain_, bias_); }

 private:
  Var gain_;
  Var bias_;
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

// Adaptive moment estimation with bias correction. Moment buffers are keyed
// by parameter name so that state survives serialisation.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamSettings settings) : settings_(settings) {}

  void step(ParameterStore& params, double lr) {
    double clip_scale = 1.0;
    if (settings_.clip_norm > 0.0) {
      const double norm = params.grad_norm();
      if (norm > settings_.clip_norm) clip_scale = settings_.clip_norm / norm;
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(steps_));
    for (auto& [name, p] : params.all()) {
      if (p.grad().size() == 0) continue;
      auto& st = state_[name];
      if (st.m.size() == 0) {
        st.m = Matrix::Zero(p.rows(), p.cols());
        st.v = Matrix::Zero(p.rows(), p.cols());
      }
      const Matrix g = p.grad() * clip_scale;
      st.m = settings_.beta1 * st.m + (1.0 - settings_.beta1) * g;
      st.v = settings_.beta2 * st.v + (1.0 - settings_.beta2) * g.cwiseProduct(g);
      p.mutable_value().array() -=
          lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + settings_.eps);
    }
  }

  struct Moments {
    Matrix m;
    Matrix v;
  };

  const AdamSettings& settings() const { return settings_; }
  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }

 private:
  AdamSettings settings_;
  std::int64_t steps_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace mvcodot::nn
