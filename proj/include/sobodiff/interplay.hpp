// Copyright 2026 The sobodiff Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef SOBODIFF_INTERPLAY_HPP
#define SOBODIFF_INTERPLAY_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sobodiff/buffer.hpp"
#include "sobodiff/common.hpp"
#include "sobodiff/denoiser.hpp"
#include "sobodiff/losses.hpp"
#include "sobodiff/rollout.hpp"
#include "sobodiff/systems.hpp"
#include "sobodiff/trajopt.hpp"

namespace sobodiff::interplay {

enum class Method { SobDiff, Diff, Mlp, SobMlp, ToOnly };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::SobDiff: return "sob_diff";
    case Method::Diff: return "diff";
    case Method::Mlp: return "mlp";
    case Method::SobMlp: return "sob_mlp";
    case Method::ToOnly: return "to_only";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "sob_diff") return Method::SobDiff;
  if (s == "diff") return Method::Diff;
  if (s == "mlp") return Method::Mlp;
  if (s == "sob_mlp") return Method::SobMlp;
  if (s == "to_only") return Method::ToOnly;
  throw ContractViolation("unknown method '" + s + "'");
}

inline bool is_diffusion(Method m) { return m == Method::SobDiff || m == Method::Diff; }
inline bool is_direct(Method m) { return m == Method::Mlp || m == Method::SobMlp; }
inline bool is_sobolev(Method m) { return m == Method::SobDiff || m == Method::SobMlp; }

/// Cost overflow convention: means are computed on capped values and the cap
/// is flagged, mirroring the infinity marker used for diverged policies.
inline constexpr double kCostCap = 1e5;
inline double capped_cost(double c) { return std::isfinite(c) ? std::min(c, kCostCap) : kCostCap; }

struct InterplayConfig {
  int n_algo = 1;
  std::vector<int> n_traj = {10};  // per-iteration; the last entry repeats
  bool reset_buffer = true;
  int n_eval = 50;
  bool refit_norm = false;  // when false, normalization is frozen after the first fit
  int attempt_budget_factor = 10;
  trajopt::SolveOptions solve;
  losses::TrainConfig train;
  rollout::RolloutConfig roll;
  systems::TaskSampling sampling;

  int n_traj_at(int iteration) const {  // iteration is 1-based
    require(!n_traj.empty() && n_traj.front() >= 1, "InterplayConfig: n_traj must be >= 1");
    int idx = std::min<int>(iteration - 1, static_cast<int>(n_traj.size()) - 1);
    return n_traj[idx];
  }

  void validate() const {
    require(n_algo >= 1, "InterplayConfig: n_algo must be >= 1");
    for (int n : n_traj) require(n >= 1, "InterplayConfig: n_traj entries must be >= 1");
    train.validate();
  }
};

/// Trained-policy handle used for warm-start rollouts.
struct PolicyRef {
  const denoiser::Denoiser* den = nullptr;
  const denoiser::DirectPolicy* direct = nullptr;
  bool valid() const { return den != nullptr || direct != nullptr; }
};

inline rollout::RolloutResult run_policy(const PolicyRef& policy,
                                         const systems::SystemSpec& spec,
                                         const systems::TaskParams& xi,
                                         const rollout::RolloutConfig& cfg, Rng& rng) {
  if (policy.den) return rollout::rollout_policy(*policy.den, spec, xi, cfg, rng);
  return rollout::rollout_direct(*policy.direct, spec, xi, cfg.kp, cfg.kd);
}

struct CollectionStats {
  int accepted = 0;
  int rejected = 0;
  int attempts = 0;
  int cold_win = 0;
  int warm_win = 0;
  int cold_converged = 0;
  int warm_converged = 0;
  int warm_attempts = 0;
  std::vector<int> iters_cold;  // converged cold solves
  std::vector<int> iters_warm;  // converged warm solves
  double mean_cost = 0.0;

  double rejection_rate() const {
    int n = accepted + rejected;
    return n == 0 ? 0.0 : static_cast<double>(rejected) / n;
  }
  double cold_rejection_rate() const {
    return attempts == 0 ? 0.0 : 1.0 - static_cast<double>(cold_converged) / attempts;
  }
  double warm_rejection_rate() const {
    return warm_attempts == 0 ? 0.0 : 1.0 - static_cast<double>(warm_converged) / warm_attempts;
  }
};

inline double median(std::vector<int> v) {
  if (v.empty()) return -1.0;
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// ArgminCost: among converged candidates return the lower-cost one; Reject
/// (empty optional) when neither converged within n_max.
struct ArgminOutcome {
  std::optional<trajopt::SolveResult> result;
  std::string source;  // "cold" | "warmstart"
};

inline ArgminOutcome argmin_cost(const trajopt::SolveResult& cold,
                                 const trajopt::SolveResult* warm) {
  ArgminOutcome out;
  if (cold.converged && (!warm || !warm->converged || cold.cost <= warm->cost)) {
    out.result = cold;
    out.source = "cold";
  } else if (warm && warm->converged) {
    out.result = *warm;
    out.source = "warmstart";
  }
  return out;
}

namespace detail {

struct Attempt {
  systems::TaskParams xi;
  trajopt::SolveResult cold;
  bool has_warm = false;
  trajopt::SolveResult warm;
};

inline Attempt run_attempt(const systems::SystemSpec& spec, const PolicyRef& policy,
                           const InterplayConfig& cfg, Rng rng) {
  Attempt a;
  a.xi = systems::sample_task(spec, rng, cfg.sampling);
  Mat X0, U0;
  systems::interpolate_init(spec, a.xi, X0, U0);
  a.cold = trajopt::solve(spec, a.xi, X0, U0, cfg.solve);
  if (policy.valid()) {
    Rng roll_rng = rng.derive("warm_rollout");
    auto rr = run_policy(policy, spec, a.xi, cfg.roll, roll_rng);
    if (rr.ok) {
      a.has_warm = true;
      a.warm = trajopt::solve(spec, a.xi, rr.X, rr.U, cfg.solve);
    }
  }
  return a;
}

}  // namespace detail

/// Algorithm-1 collection block: sample xi, solve cold from the interpolation
/// and (when a policy exists) warm from its rollout, keep the argmin of the
/// converged pair, resample on rejection. Attempts run speculatively in
/// parallel but are accepted in attempt order, so results are independent of
/// the worker count.
inline CollectionStats collect_iteration(const systems::SystemSpec& spec, const PolicyRef& policy,
                                         const InterplayConfig& cfg, int n_traj,
                                         buffer::Buffer& buf, Rng& rng) {
  CollectionStats stats;
  const int budget = cfg.attempt_budget_factor * n_traj;
  const int wave = std::max(4, thread_count());
  double cost_sum = 0.0;
  int next_attempt = 0;
  while (stats.accepted < n_traj) {
    if (next_attempt >= budget) {
      throw NumericFailure("collect_iteration: attempt budget exhausted (" +
                           std::to_string(next_attempt) + " attempts, " +
                           std::to_string(stats.accepted) + "/" + std::to_string(n_traj) +
                           " accepted, rejection rate " + std::to_string(stats.rejection_rate()) +
                           ")");
    }
    int n = std::min(wave, budget - next_attempt);
    std::vector<detail::Attempt> results(n);
    parallel_for(n, [&](int i) {
      results[i] = detail::run_attempt(spec, policy, cfg, rng.derive("attempt", next_attempt + i));
    });
    for (int i = 0; i < n && stats.accepted < n_traj; ++i) {
      const auto& a = results[i];
      ++stats.attempts;
      if (a.cold.converged) {
        ++stats.cold_converged;
        stats.iters_cold.push_back(a.cold.iters);
      }
      if (policy.valid()) {
        ++stats.warm_attempts;
        if (a.has_warm && a.warm.converged) {
          ++stats.warm_converged;
          stats.iters_warm.push_back(a.warm.iters);
        }
      }
      auto pick = argmin_cost(a.cold, a.has_warm ? &a.warm : nullptr);
      if (!pick.result) {
        ++stats.rejected;
        continue;
      }
      ++stats.accepted;
      if (pick.source == "cold")
        ++stats.cold_win;
      else
        ++stats.warm_win;
      cost_sum += pick.result->cost;
      buf.insert(buffer::make_record(spec, a.xi, *pick.result, pick.source));
    }
    next_attempt += n;
  }
  stats.mean_cost = stats.accepted > 0 ? cost_sum / stats.accepted : 0.0;
  return stats;
}

struct IterationMetrics {
  int iteration = 0;
  double mean_policy_cost = 0.0;
  double mean_refined_cost = 0.0;
  double mean_cold_cost = 0.0;
  double rejection_rate = 0.0;
  double median_iters_warm = -1.0;
  double median_iters_cold = -1.0;
  double mean_denoiser_evals = 0.0;
  double train_final_loss = 0.0;
  CollectionStats collection;
};

struct EvalOutcome {
  double policy_cost = 0.0;   // capped
  bool policy_overflow = false;
  bool refined_converged = false;
  double refined_cost = 0.0;  // capped
  int refined_iters = 0;
  int denoiser_evals = 0;
};

/// Held-out evaluation of a trained policy: rollout cost, plus the cost after
/// refining (solver warm-started from the rollout). Line-search monotonicity
/// guarantees refined <= policy cost on converged instances.
inline EvalOutcome evaluate_instance(const systems::SystemSpec& spec, const PolicyRef& policy,
                                     const InterplayConfig& cfg, const systems::TaskParams& xi,
                                     Rng& rng) {
  EvalOutcome out;
  auto rr = run_policy(policy, spec, xi, cfg.roll, rng);
  if (!rr.ok) {
    out.policy_cost = kCostCap;
    out.policy_overflow = true;
    return out;
  }
  out.denoiser_evals = rr.denoiser_evals;
  out.policy_overflow = !(rr.cost < kCostCap);
  out.policy_cost = capped_cost(rr.cost);
  auto refined = trajopt::solve(spec, xi, rr.X, rr.U, cfg.solve);
  out.refined_converged = refined.converged;
  out.refined_cost = capped_cost(refined.converged ? refined.cost : kCostCap);
  out.refined_iters = refined.iters;
  if (refined.converged && rr.cost < kCostCap)
    require(refined.cost <= rr.cost + 1e-9, "refined cost exceeded the policy rollout cost");
  return out;
}

struct InterplayResult {
  std::optional<denoiser::Denoiser> den;
  std::optional<denoiser::DirectPolicy> direct;
  std::vector<IterationMetrics> iterations;
};

/// The full alternating loop: collect (cold + policy-warm-started solves),
/// train, evaluate on held-out instances; repeat n_algo times. The policy
/// persists across iterations and keeps training on the refreshed buffer.
/// `on_iteration(buf, iter)` runs after each collection (snapshot hook).
template <class IterHook>
inline InterplayResult run(const systems::SystemSpec& spec, const InterplayConfig& cfg,
                           Method method, std::uint64_t seed, IterHook&& on_iteration) {
  cfg.validate();
  require(method != Method::ToOnly, "interplay::run: to_only has no learning loop");
  Rng root(seed);
  buffer::Buffer buf(spec);
  InterplayResult res;
  bool norm_fitted = false;

  for (int iter = 1; iter <= cfg.n_algo; ++iter) {
    if (cfg.reset_buffer) buf.reset();
    const int n_traj = cfg.n_traj_at(iter);

    PolicyRef policy;
    if (res.den) policy.den = &*res.den;
    if (res.direct) policy.direct = &*res.direct;

    Rng collect_rng = root.derive("collect", iter);
    IterationMetrics m;
    m.iteration = iter;
    m.collection = collect_iteration(spec, policy, cfg, n_traj, buf, collect_rng);
    if (cfg.reset_buffer)
      require(static_cast<int>(buf.size()) == n_traj, "buffer size != n_traj after collection");
    on_iteration(buf, iter);

    if (!norm_fitted || cfg.refit_norm) {
      auto ns = buf.fit_norm();
      norm_fitted = true;
      if (!res.den && !res.direct) {
        Rng init_rng = root.derive("init");
        if (is_diffusion(method))
          res.den.emplace(spec, cfg.train.T_h, cfg.train.T_o, cfg.train.K_train, ns, init_rng);
        else
          res.direct.emplace(spec, ns, init_rng);
      }
      // A refit while a policy exists would shift its input scaling; the
      // stats stay frozen unless refit_norm is explicitly enabled.
    }

    losses::TrainConfig tc = cfg.train;
    if (!is_sobolev(method)) tc.alpha_sob = 0.0;
    Rng train_rng = root.derive("train", iter);
    losses::TrainReport report;
    if (res.den)
      report = losses::train(*res.den, buf, tc, train_rng);
    else
      report = losses::train(*res.direct, buf, tc, train_rng);
    m.train_final_loss = report.final_loss();

    PolicyRef trained;
    if (res.den) trained.den = &*res.den;
    if (res.direct) trained.direct = &*res.direct;

    std::vector<EvalOutcome> evals(cfg.n_eval);
    std::vector<double> cold_costs(cfg.n_eval);
    parallel_for(cfg.n_eval, [&](int j) {
      Rng er = root.derive("eval", iter * 1000003ULL + j);
      auto xi = systems::sample_task(spec, er, cfg.sampling);
      evals[j] = evaluate_instance(spec, trained, cfg, xi, er);
      Mat X0, U0;
      systems::interpolate_init(spec, xi, X0, U0);
      auto cold = trajopt::solve(spec, xi, X0, U0, cfg.solve);
      cold_costs[j] = capped_cost(cold.converged ? cold.cost : kCostCap);
    });
    double sp = 0, sr = 0, sc = 0, se = 0;
    for (int j = 0; j < cfg.n_eval; ++j) {
      sp += evals[j].policy_cost;
      sr += evals[j].refined_cost;
      sc += cold_costs[j];
      se += evals[j].denoiser_evals;
    }
    m.mean_policy_cost = sp / cfg.n_eval;
    m.mean_refined_cost = sr / cfg.n_eval;
    m.mean_cold_cost = sc / cfg.n_eval;
    m.mean_denoiser_evals = se / cfg.n_eval;
    m.rejection_rate = m.collection.rejection_rate();
    m.median_iters_warm = median(m.collection.iters_warm);
    m.median_iters_cold = median(m.collection.iters_cold);
    res.iterations.push_back(std::move(m));
  }
  return res;
}

inline InterplayResult run(const systems::SystemSpec& spec, const InterplayConfig& cfg,
                           Method method, std::uint64_t seed) {
  return run(spec, cfg, method, seed, [](const buffer::Buffer&, int) {});
}

}  // namespace sobodiff::interplay

#endif  // SOBODIFF_INTERPLAY_HPP
