#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dmpanel/common.hpp"
#include "dmpanel/density.hpp"

namespace dmp {

struct SamplerConfig {
  int chains = 4;
  int iter_warmup = 1000;
  int iter_sampling = 1000;
  uint64_t seed = 1;
  double target_accept = 0.8;
  int max_treedepth = 10;
  double init_radius = 2.0;
  int cores = 1; // chain-level threads; results do not depend on it
};

/// Post-warmup draws in constrained space, chain-major, plus per-iteration
/// sampler statistics.
struct Draws {
  int n_chains = 0;
  int n_iter = 0;
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> chains; // per chain: n_iter x names.size()
  std::vector<Eigen::MatrixXd> stats;  // per chain: n_iter x stat_names()
  std::vector<double> warmup_seconds;
  std::vector<double> sample_seconds;
  std::vector<double> elapsed_seconds; // warmup + sampling per chain

  static const std::vector<std::string>& stat_names(); // lp__, energy__, ...

  double value(int chain, int iter, int param) const {
    return chains[chain](iter, param);
  }
  int param_index(const std::string& name) const;
};

/// Adaptive multinomial no-u-turn sampling: dual-averaged step size,
/// windowed diagonal mass-matrix estimation, divergence detection.
/// Deterministic for a given (seed, chain) regardless of thread count.
Draws sample(const LogDensity& target, const SamplerConfig& cfg,
             Warnings* warnings = nullptr);

/// One leapfrog step under a diagonal inverse metric. q, p, g are updated in
/// place (g must hold the gradient at the incoming q); returns the new log
/// density. Exposed so integrator properties are checkable from outside.
double leapfrog_step(const LogDensity& target, const Eigen::VectorXd& inv_metric,
                     double eps, Eigen::VectorXd& q, Eigen::VectorXd& p,
                     Eigen::VectorXd& g);

} // namespace dmp
