#include "flownerf/optim.hpp"

#include <cmath>

namespace flownerf {

Adam::Adam(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::add_group(std::string name, double lr, std::vector<Tensor> params) {
  if (lr <= 0.0) {
    throw ConfigError("adam: learning rate for group '" + name +
                      "' must be positive, got " + std::to_string(lr));
  }
  for (auto& p : params) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
  groups_.push_back(Group{std::move(name), lr, std::move(params)});
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t slot = 0;
  for (auto& grp : groups_) {
    for (auto& p : grp.params) {
      std::vector<double>& m = m_[slot];
      std::vector<double>& v = v_[slot];
      ++slot;
      double* w = p.data().data();
      const bool has_g = p.has_grad();
      const double* g = has_g ? p.grad().data() : nullptr;
      for (std::size_t i = 0; i < m.size(); ++i) {
        double gi = has_g ? g[i] : 0.0;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        double denom = std::sqrt(vhat) + eps_;
        if (mhat != 0.0 || denom != 0.0) w[i] -= grp.lr * mhat / denom;
      }
    }
  }
}

void Adam::zero_grad() {
  for (auto& grp : groups_)
    for (auto& p : grp.params) p.zero_grad();
}

double Adam::group_lr(const std::string& name) const {
  for (const auto& grp : groups_)
    if (grp.name == name) return grp.lr;
  throw ConfigError("adam: unknown group '" + name + "'");
}

void Adam::set_group_lr(const std::string& name, double lr) {
  for (auto& grp : groups_) {
    if (grp.name == name) {
      grp.lr = lr;
      return;
    }
  }
  throw ConfigError("adam: unknown group '" + name + "'");
}

void Adam::scale_lrs(double factor, double floor) {
  for (auto& grp : groups_) grp.lr = std::max(floor, grp.lr * factor);
}

}  // namespace flownerf
