#include "dmpanel/nuts.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <thread>

#include "dmpanel/rng.hpp"

namespace dmp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kDivergenceThreshold = 1000.0;

double log_sum_exp2(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Position, momentum, and the cached gradient/value at the position.
struct Phase {
  Eigen::VectorXd q;
  Eigen::VectorXd p;
  Eigen::VectorXd g;
  double lp = 0.0;
};

// The multinomial candidate carried up through tree merges.
struct Candidate {
  Eigen::VectorXd q;
  Eigen::VectorXd g;
  double lp = 0.0;
  double energy = 0.0;
};

// Dual averaging of log step size (Hoffman-Gelman schedule).
class StepSizeAdapter {
 public:
  void restart(double eps) {
    mu_ = std::log(10.0 * eps);
    log_eps_ = std::log(eps);
    log_eps_bar_ = 0.0;
    h_bar_ = 0.0;
    m_ = 0;
  }
  void learn(double accept_stat, double target) {
    ++m_;
    double eta = 1.0 / (m_ + t0_);
    h_bar_ = (1.0 - eta) * h_bar_ + eta * (target - accept_stat);
    log_eps_ = mu_ - std::sqrt(static_cast<double>(m_)) / gamma_ * h_bar_;
    double w = std::pow(static_cast<double>(m_), -kappa_);
    log_eps_bar_ = w * log_eps_ + (1.0 - w) * log_eps_bar_;
  }
  double current() const { return std::exp(log_eps_); }
  double averaged() const { return std::exp(log_eps_bar_); }

 private:
  static constexpr double gamma_ = 0.05;
  static constexpr double t0_ = 10.0;
  static constexpr double kappa_ = 0.75;
  double mu_ = 0.0, log_eps_ = 0.0, log_eps_bar_ = 0.0, h_bar_ = 0.0;
  long m_ = 0;
};

// Streaming mean/variance for the mass matrix windows.
class Welford {
 public:
  explicit Welford(int dim) : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)) {}
  void reset() {
    n_ = 0;
    mean_.setZero();
    m2_.setZero();
  }
  void add(const Eigen::VectorXd& x) {
    ++n_;
    Eigen::VectorXd d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d.cwiseProduct(x - mean_);
  }
  long count() const { return n_; }
  // Shrinks the sample variance toward a small constant, as in windowed
  // adaptation, so short windows do not produce degenerate metrics.
  Eigen::VectorXd regularized_variance() const {
    double n = static_cast<double>(n_);
    Eigen::VectorXd var = m2_ / std::max(1.0, n - 1.0);
    return (n / (n + 5.0)) * var + (1e-3 * 5.0 / (n + 5.0)) * Eigen::VectorXd::Ones(var.size());
  }

 private:
  long n_ = 0;
  Eigen::VectorXd mean_;
  Eigen::VectorXd m2_;
};

// Ends (exclusive, in warmup iterations) of the mass-matrix windows for the
// 75 / 25-doubling / 50 schedule. The last window absorbs the remainder so
// it never spills into the step-size-only tail.
std::vector<int> window_ends(int iter_warmup, int init_buffer, int base_window, int term_buffer) {
  std::vector<int> ends;
  int limit = iter_warmup - term_buffer;
  int start = init_buffer;
  int size = base_window;
  while (start < limit) {
    int end = start + size;
    if (end + 2 * size > limit) end = limit;
    ends.push_back(end);
    start = end;
    size *= 2;
  }
  return ends;
}

class ChainSampler {
 public:
  ChainSampler(const LogDensity& model, const SamplerConfig& cfg, int chain_index)
      : model_(model),
        cfg_(cfg),
        dim_(model.dim()),
        rng_(Rng::derive_key(cfg.seed, {static_cast<uint64_t>(chain_index + 1)})),
        inv_metric_(Eigen::VectorXd::Ones(model.dim())),
        chain_index_(chain_index) {}

  void run(Eigen::MatrixXd& out_draws, Eigen::MatrixXd& out_stats, double& warmup_elapsed,
           double& sample_elapsed) {
    auto t0 = std::chrono::steady_clock::now();
    initialize();

    StepSizeAdapter adapt;
    eps_ = find_initial_stepsize(1.0);
    adapt.restart(eps_);

    Welford welford(dim_);
    std::vector<int> ends = window_ends(cfg_.iter_warmup, 75, 25, 50);
    std::size_t next_window = 0;
    int metric_window_start = 75;
    long warmup_divergences = 0;

    for (int it = 0; it < cfg_.iter_warmup; ++it) {
      Transition tr = transition();
      if (tr.divergent) ++warmup_divergences;
      adapt.learn(tr.accept_stat, cfg_.target_accept);
      eps_ = adapt.current();
      if (it >= metric_window_start && next_window < ends.size()) welford.add(cur_.q);
      if (next_window < ends.size() && it + 1 == ends[next_window]) {
        if (welford.count() >= 2) inv_metric_ = welford.regularized_variance();
        welford.reset();
        ++next_window;
        eps_ = find_initial_stepsize(eps_);
        adapt.restart(eps_);
      }
    }
    if (warmup_divergences == cfg_.iter_warmup)
      throw numeric_error("every warmup iteration diverged; the posterior is numerically unstable "
                          "at this scale (check priors and predictor scaling)");
    eps_ = adapt.averaged();
    auto t1 = std::chrono::steady_clock::now();
    warmup_elapsed = std::chrono::duration<double>(t1 - t0).count();

    Eigen::VectorXd reported;
    for (int it = 0; it < cfg_.iter_sampling; ++it) {
      Transition tr = transition();
      model_.values(cur_.q, reported);
      out_draws.row(it) = reported.transpose();
      out_stats(it, 0) = cur_.lp;
      out_stats(it, 1) = tr.energy;
      out_stats(it, 2) = tr.divergent ? 1.0 : 0.0;
      out_stats(it, 3) = static_cast<double>(tr.treedepth);
      out_stats(it, 4) = static_cast<double>(tr.n_leapfrog);
      out_stats(it, 5) = eps_;
      out_stats(it, 6) = tr.accept_stat;
    }
    sample_elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  }

 private:
  struct Transition {
    double accept_stat = 0.0;
    double energy = 0.0;
    bool divergent = false;
    int treedepth = 0;
    long n_leapfrog = 0;
  };

  void initialize() {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Eigen::VectorXd q(dim_);
      for (int i = 0; i < dim_; ++i) q[i] = rng_.uniform(-cfg_.init_radius, cfg_.init_radius);
      Eigen::VectorXd g;
      double lp = model_.value_and_grad(q, g);
      if (std::isfinite(lp) && g.allFinite()) {
        cur_.q = std::move(q);
        cur_.g = std::move(g);
        cur_.lp = lp;
        return;
      }
    }
    throw numeric_error("failed to initialize chain " + std::to_string(chain_index_ + 1) +
                        ": no finite log posterior found in 100 random starts");
  }

  double kinetic(const Eigen::VectorXd& p) const {
    return 0.5 * p.dot(inv_metric_.cwiseProduct(p));
  }

  Eigen::VectorXd draw_momentum() {
    Eigen::VectorXd p(dim_);
    for (int i = 0; i < dim_; ++i) p[i] = rng_.normal() / std::sqrt(inv_metric_[i]);
    return p;
  }

  void leapfrog(Phase& z, double eps) const {
    z.lp = leapfrog_step(model_, inv_metric_, eps, z.q, z.p, z.g);
  }

  // Coarse bracketing of the step size: double or halve until a single step
  // from the current point crosses 80% acceptance.
  double find_initial_stepsize(double eps) {
    Phase z;
    z.q = cur_.q;
    z.g = cur_.g;
    z.lp = cur_.lp;
    z.p = draw_momentum();
    double h0 = -z.lp + kinetic(z.p);

    auto log_accept = [&](double trial_eps) {
      Phase w = z;
      leapfrog(w, trial_eps);
      double h = -w.lp + kinetic(w.p);
      if (!std::isfinite(h)) return -kInf;
      return h0 - h;
    };

    const double threshold = std::log(0.8);
    int direction = log_accept(eps) > threshold ? 1 : -1;
    for (int i = 0; i < 100; ++i) {
      double la = log_accept(eps);
      if (direction == 1 && !(la > threshold)) break;
      if (direction == -1 && !(la < threshold)) break;
      eps = direction == 1 ? 2.0 * eps : 0.5 * eps;
      if (eps > 1e7 || eps < 1e-16)
        throw numeric_error("step-size search diverged on chain " +
                            std::to_string(chain_index_ + 1) +
                            "; the gradient may be wrong or the scale extreme");
    }
    return eps;
  }

  bool uturn(const Eigen::VectorXd& rho, const Eigen::VectorXd& p_sharp_beg,
             const Eigen::VectorXd& p_sharp_end) const {
    return !(rho.dot(p_sharp_beg) > 0.0 && rho.dot(p_sharp_end) > 0.0);
  }

  // Builds 2^depth new states extending from z (updated in place to the far
  // edge). Returns false when the subtree diverged or turned on itself, in
  // which case no state of the subtree may be used.
  bool build_tree(int depth, Phase& z, double direction, double h0, Eigen::VectorXd& rho,
                  Eigen::VectorXd& p_sharp_beg, Eigen::VectorXd& p_sharp_end, Candidate& cand,
                  double& log_sum_weight, double& sum_accept, long& n_leapfrog, bool& divergent) {
    if (depth == 0) {
      leapfrog(z, direction * eps_);
      ++n_leapfrog;
      double h = -z.lp + kinetic(z.p);
      if (!std::isfinite(h)) h = kInf;
      double delta = h - h0;
      if (delta > kDivergenceThreshold) {
        divergent = true;
        return false;
      }
      log_sum_weight = log_sum_exp2(log_sum_weight, -delta);
      sum_accept += std::exp(std::min(0.0, -delta));
      cand.q = z.q;
      cand.g = z.g;
      cand.lp = z.lp;
      cand.energy = h;
      rho += z.p;
      p_sharp_beg = inv_metric_.cwiseProduct(z.p);
      p_sharp_end = p_sharp_beg;
      return true;
    }

    double lsw_left = -kInf, lsw_right = -kInf;
    Eigen::VectorXd rho_left = Eigen::VectorXd::Zero(dim_);
    Eigen::VectorXd rho_right = Eigen::VectorXd::Zero(dim_);
    Eigen::VectorXd sharp_left_end(dim_), sharp_right_beg(dim_);
    Candidate cand_right;

    if (!build_tree(depth - 1, z, direction, h0, rho_left, p_sharp_beg, sharp_left_end, cand,
                    lsw_left, sum_accept, n_leapfrog, divergent))
      return false;
    if (!build_tree(depth - 1, z, direction, h0, rho_right, sharp_right_beg, p_sharp_end,
                    cand_right, lsw_right, sum_accept, n_leapfrog, divergent))
      return false;

    double lsw = log_sum_exp2(lsw_left, lsw_right);
    if (rng_.u01() < std::exp(lsw_right - lsw)) cand = cand_right;
    log_sum_weight = log_sum_exp2(log_sum_weight, lsw);
    Eigen::VectorXd rho_sub = rho_left + rho_right;
    rho += rho_sub;
    return !uturn(rho_sub, p_sharp_beg, p_sharp_end);
  }

  Transition transition() {
    Transition tr;
    Phase fwd, bwd;
    fwd.q = cur_.q;
    fwd.g = cur_.g;
    fwd.lp = cur_.lp;
    fwd.p = draw_momentum();
    bwd = fwd;

    double h0 = -fwd.lp + kinetic(fwd.p);
    Eigen::VectorXd rho = fwd.p;
    Eigen::VectorXd sharp_bwd = inv_metric_.cwiseProduct(fwd.p);
    Eigen::VectorXd sharp_fwd = sharp_bwd;

    Candidate cand{cur_.q, cur_.g, cur_.lp, h0};
    double log_sum_weight = 0.0; // the seed state has unit weight
    double sum_accept = 0.0;

    for (int depth = 0; depth < cfg_.max_treedepth; ++depth) {
      double direction = rng_.u01() < 0.5 ? -1.0 : 1.0;
      Phase& edge = direction > 0 ? fwd : bwd;

      double lsw_sub = -kInf;
      Eigen::VectorXd rho_sub = Eigen::VectorXd::Zero(dim_);
      Eigen::VectorXd sharp_sub_beg(dim_), sharp_sub_end(dim_);
      Candidate cand_sub;
      bool valid = build_tree(depth, edge, direction, h0, rho_sub, sharp_sub_beg, sharp_sub_end,
                              cand_sub, lsw_sub, sum_accept, tr.n_leapfrog, tr.divergent);
      if (tr.divergent) break;
      if (!valid) break;

      // biased progressive sampling: fresh subtrees win outright when heavier
      if (lsw_sub > log_sum_weight) {
        cand = cand_sub;
      } else if (rng_.u01() < std::exp(lsw_sub - log_sum_weight)) {
        cand = cand_sub;
      }
      log_sum_weight = log_sum_exp2(log_sum_weight, lsw_sub);
      rho += rho_sub;
      if (direction > 0)
        sharp_fwd = sharp_sub_end;
      else
        sharp_bwd = sharp_sub_end;
      tr.treedepth = depth + 1;
      if (uturn(rho, sharp_bwd, sharp_fwd)) break;
    }

    cur_.q = std::move(cand.q);
    cur_.g = std::move(cand.g);
    cur_.lp = cand.lp;

    tr.energy = cand.energy;
    tr.accept_stat = tr.n_leapfrog > 0 ? sum_accept / static_cast<double>(tr.n_leapfrog) : 0.0;
    return tr;
  }

  const LogDensity& model_;
  const SamplerConfig& cfg_;
  int dim_;
  Rng rng_;
  Eigen::VectorXd inv_metric_;
  Phase cur_;
  double eps_ = 1.0;
  int chain_index_;
};

} // namespace

double leapfrog_step(const LogDensity& target, const Eigen::VectorXd& inv_metric, double eps,
                     Eigen::VectorXd& q, Eigen::VectorXd& p, Eigen::VectorXd& g) {
  p += 0.5 * eps * g;
  q += eps * inv_metric.cwiseProduct(p);
  double lp = target.value_and_grad(q, g);
  p += 0.5 * eps * g;
  return lp;
}

const std::vector<std::string>& Draws::stat_names() {
  static const std::vector<std::string> names = {
      "lp__",        "energy__", "divergent__", "treedepth__",
      "n_leapfrog__", "stepsize__", "accept__"};
  return names;
}

int Draws::param_index(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  throw spec_error("unknown parameter `" + name + "` in draws");
}

Draws sample(const LogDensity& target, const SamplerConfig& cfg, Warnings* warnings) {
  if (cfg.chains < 1) throw spec_error("chains must be at least 1");
  if (cfg.iter_warmup < 150)
    throw spec_error("iter_warmup must be at least 150 to fit the adaptation schedule");
  if (cfg.iter_sampling < 1) throw spec_error("iter_sampling must be at least 1");
  if (!(cfg.target_accept > 0.0 && cfg.target_accept < 1.0))
    throw spec_error("target_accept must lie in (0, 1)");
  if (cfg.max_treedepth < 1) throw spec_error("max_treedepth must be at least 1");
  if (!(cfg.init_radius > 0.0)) throw spec_error("init_radius must be positive");

  Draws out;
  out.n_chains = cfg.chains;
  out.n_iter = cfg.iter_sampling;
  out.names = target.value_names();
  const int n_params = static_cast<int>(out.names.size());
  out.chains.assign(cfg.chains, Eigen::MatrixXd(cfg.iter_sampling, n_params));
  out.stats.assign(
      cfg.chains,
      Eigen::MatrixXd(cfg.iter_sampling, static_cast<int>(Draws::stat_names().size())));
  out.warmup_seconds.assign(cfg.chains, 0.0);
  out.sample_seconds.assign(cfg.chains, 0.0);
  out.elapsed_seconds.assign(cfg.chains, 0.0);

  std::mutex err_mutex;
  std::vector<std::string> errors;
  auto run_chain = [&](int c) {
    try {
      ChainSampler chain(target, cfg, c);
      chain.run(out.chains[c], out.stats[c], out.warmup_seconds[c], out.sample_seconds[c]);
      out.elapsed_seconds[c] = out.warmup_seconds[c] + out.sample_seconds[c];
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(err_mutex);
      errors.push_back(e.what());
    }
  };

  int workers = std::max(1, std::min(cfg.cores, cfg.chains));
  if (workers == 1) {
    for (int c = 0; c < cfg.chains; ++c) run_chain(c);
  } else {
    for (int first = 0; first < cfg.chains; first += workers) {
      std::vector<std::thread> pool;
      for (int c = first; c < std::min(cfg.chains, first + workers); ++c)
        pool.emplace_back(run_chain, c);
      for (auto& t : pool) t.join();
    }
  }
  if (!errors.empty()) throw numeric_error(errors.front());

  if (warnings) {
    long total_divergent = 0;
    long saturated = 0;
    for (int c = 0; c < cfg.chains; ++c) {
      total_divergent += static_cast<long>(out.stats[c].col(2).sum());
      saturated +=
          (out.stats[c].col(3).array() >= static_cast<double>(cfg.max_treedepth)).count();
    }
    if (total_divergent > 0)
      warnings->push_back(std::to_string(total_divergent) +
                          " divergent transitions after warmup; results may be biased");
    if (saturated > 0)
      warnings->push_back(std::to_string(saturated) +
                          " transitions hit the maximum tree depth; sampling may be inefficient");
  }
  return out;
}

} // namespace dmp
