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

#ifndef SOBODIFF_DDPM_HPP
#define SOBODIFF_DDPM_HPP

#include <cmath>
#include <vector>

#include "sobodiff/common.hpp"

namespace sobodiff::ddpm {

/// Squared-cosine noising schedule over K steps. Arrays are indexed by
/// k in [1, K]; index 0 holds the alpha_bar_0 = 1 convention (so the
/// posterior variance beta_tilde_1 is exactly 0 and the last ancestral step
/// is deterministic).
struct NoiseSchedule {
  int K = 0;
  std::vector<double> beta;        // beta[0] unused
  std::vector<double> alpha;       // 1 - beta_k
  std::vector<double> alpha_bar;   // alpha_bar[0] = 1
  std::vector<double> beta_tilde;  // posterior variance, beta_tilde[1] = 0

  /// Posterior mean coefficients of Eq.-style mu_tilde_k(tau_k, tau_0):
  /// mu = c_tau0(k) * tau_0 + c_tauk(k) * tau_k.
  double c_tau0(int k) const {
    return std::sqrt(alpha_bar[k - 1]) * beta[k] / (1.0 - alpha_bar[k]);
  }
  double c_tauk(int k) const {
    return std::sqrt(alpha[k]) * (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]);
  }

  void validate() const {
    require(K >= 1, "NoiseSchedule: K must be >= 1");
    for (int k = 1; k <= K; ++k) {
      require(beta[k] > 0.0 && beta[k] < 1.0, "NoiseSchedule: beta out of (0,1)");
      require(alpha_bar[k] < alpha_bar[k - 1], "NoiseSchedule: alpha_bar must strictly decrease");
    }
  }
};

/// Improved-DDPM squared-cosine profile with offset s = 0.008 and betas
/// clipped at 0.999; alpha_bar is then the cumulative product of (1 - beta).
inline NoiseSchedule make_schedule(int K) {
  require(K >= 1, "make_schedule: K must be >= 1");
  auto f = [](double t) {
    double c = std::cos((t + 0.008) / 1.008 * M_PI / 2.0);
    return c * c;
  };
  NoiseSchedule s;
  s.K = K;
  s.beta.assign(K + 1, 0.0);
  s.alpha.assign(K + 1, 0.0);
  s.alpha_bar.assign(K + 1, 1.0);
  s.beta_tilde.assign(K + 1, 0.0);
  for (int k = 1; k <= K; ++k) {
    double t0 = static_cast<double>(k - 1) / K;
    double t1 = static_cast<double>(k) / K;
    s.beta[k] = std::min(1.0 - f(t1) / f(t0), 0.999);
    s.alpha[k] = 1.0 - s.beta[k];
    s.alpha_bar[k] = s.alpha_bar[k - 1] * s.alpha[k];
    s.beta_tilde[k] = (1.0 - s.alpha_bar[k - 1]) / (1.0 - s.alpha_bar[k]) * s.beta[k];
  }
  s.validate();
  return s;
}

/// Forward noising: tau_k = sqrt(alpha_bar_k) tau_0 + sqrt(1 - alpha_bar_k) eps.
inline Mat q_sample(const Mat& tau0, int k, const Mat& eps, const NoiseSchedule& s) {
  require(k >= 1 && k <= s.K, "q_sample: k out of range");
  require(eps.rows() == tau0.rows() && eps.cols() == tau0.cols(), "q_sample: eps shape mismatch");
  return std::sqrt(s.alpha_bar[k]) * tau0 + std::sqrt(1.0 - s.alpha_bar[k]) * eps;
}

/// One ancestral step: tau_{k-1} ~ N(mu_tilde_k(tau_k, tau0_hat), beta_tilde_k I).
/// Noiseless at k = 1.
inline Mat posterior_step(const Mat& tau_k, const Mat& tau0_hat, int k, const NoiseSchedule& s,
                          Rng& rng) {
  require(k >= 1 && k <= s.K, "posterior_step: k out of range");
  Mat mu = s.c_tau0(k) * tau0_hat + s.c_tauk(k) * tau_k;
  if (k == 1) return mu;
  double sigma = std::sqrt(s.beta_tilde[k]);
  return mu + sigma * rng.normal_mat(static_cast<int>(tau_k.rows()),
                                     static_cast<int>(tau_k.cols()));
}

struct GenerateOptions {
  bool clip_tau0 = false;  // clip the tau_0 estimate to [-1, 1] between steps
};

/// Algorithm-2 reverse process with inpainting. The denoiser type must expose
///   norm()            -> buffer::NormStats-like with norm_actions/denorm/...
///   schedule()        -> NoiseSchedule
///   horizon()/history() -> T_h / T_o
///   action_dim()
///   predict_tau0_normalized(tau_k_norm, k, xi_norm, o_hist_norm) -> Mat
/// K_rollout < K starts ancestral sampling at step K_rollout from pure noise.
/// Inputs o_hist/a_hist are physical; the returned tau_0 is physical with its
/// history rows overwritten by a_hist exactly.
template <class DenoiserT>
inline Mat generate(const DenoiserT& den, const Vec& xi_vec, const Mat& o_hist, const Mat& a_hist,
                    int K_rollout, Rng& rng, const GenerateOptions& opt = {}) {
  const auto& sched = den.schedule();
  require(K_rollout >= 1 && K_rollout <= sched.K, "generate: K_rollout out of range");
  const int T_h = den.horizon();
  const int T_o = den.history();
  const int n_a = den.action_dim();
  require(a_hist.rows() == T_o && a_hist.cols() == n_a, "generate: a_hist shape mismatch");

  const auto& ns = den.norm();
  Mat a_hist_n = ns.norm_actions(a_hist);
  Mat o_hist_n = ns.norm_obs(o_hist);
  Vec xi_n = ns.norm_xi(xi_vec);

  Mat tau = rng.normal_mat(T_h, n_a);
  Mat tau0_hat;
  for (int k = K_rollout; k >= 1; --k) {
    tau.topRows(T_o) = a_hist_n;
    tau0_hat = den.predict_tau0_normalized(tau, k, xi_n, o_hist_n);
    if (!tau0_hat.allFinite()) throw NumericFailure("generate: non-finite denoiser output");
    if (opt.clip_tau0) tau0_hat = tau0_hat.cwiseMax(-1.0).cwiseMin(1.0);
    tau = posterior_step(tau, tau0_hat, k, sched, rng);
  }
  Mat out = ns.denorm_actions(tau);
  out.topRows(T_o) = a_hist;
  check_finite(out, "generate output");
  return out;
}

}  // namespace sobodiff::ddpm

#endif  // SOBODIFF_DDPM_HPP
