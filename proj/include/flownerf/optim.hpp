#pragma once

#include <string>
#include <vector>

#include "flownerf/tensor.hpp"

namespace flownerf {

// Bias-corrected Adam over named parameter groups with per-group learning
// rates. Moment buffers persist across steps and are serialized into
// checkpoints so a resumed run continues bit-exactly.
class Adam {
 public:
  struct Group {
    std::string name;
    double lr = 1e-3;
    std::vector<Tensor> params;
  };

  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void add_group(std::string name, double lr, std::vector<Tensor> params);
  // One update over all groups; t advances once per call.
  void step();
  void zero_grad();

  long long step_count() const { return t_; }
  void set_step_count(long long t) { t_ = t; }

  std::vector<Group>& groups() { return groups_; }
  const std::vector<Group>& groups() const { return groups_; }
  double group_lr(const std::string& name) const;
  void set_group_lr(const std::string& name, double lr);
  void scale_lrs(double factor, double floor);

  // Moment buffers aligned with the flattened (group, param) registration
  // order; exposed for checkpointing.
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }

 private:
  double beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Group> groups_;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace flownerf
