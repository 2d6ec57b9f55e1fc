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

#ifndef SOBODIFF_ROLLOUT_HPP
#define SOBODIFF_ROLLOUT_HPP

#include <algorithm>

#include "sobodiff/common.hpp"
#include "sobodiff/ddpm.hpp"
#include "sobodiff/denoiser.hpp"
#include "sobodiff/systems.hpp"

namespace sobodiff::rollout {

struct RolloutConfig {
  int T_a = 31;
  int T_o = 1;
  int K_rollout = 5;
  double kp = 50.0;
  double kd = 10.0;
  bool clip_tau0 = false;

  void validate(int T_h, int K) const {
    require(T_a >= 1 && T_a <= T_h - T_o, "RolloutConfig: need 1 <= T_a <= T_h - T_o");
    require(K_rollout >= 1 && K_rollout <= K, "RolloutConfig: need 1 <= K_rollout <= K");
  }
};

/// Low-level controller for a = x mode: PD toward the desired row, which is
/// the state to reach by the end of the current step. The fully actuated
/// point mass gets an exact acceleration feedforward plus a correction on the
/// predicted endpoint (zero on dynamics-consistent references, so solver
/// trajectories are tracked exactly).
inline Vec inverse_control(const systems::SystemSpec& spec, const Vec& x, const Vec& a_des,
                           double kp = 50.0, double kd = 10.0) {
  require(a_des.size() == spec.n_x, "inverse_control: a_des must be a full state row");
  const int nq = spec.n_q;
  Vec q = x.head(nq), v = x.tail(nq);
  Vec q_des = a_des.head(nq), v_des = a_des.tail(nq);
  Vec u;
  if (spec.name == "point_mass_2d") {
    u = spec.p.mass * (v_des - v) / spec.dt + kp * (q_des - q - spec.dt * v_des);
  } else {
    u = kp * (q_des - q) + kd * (v_des - v);
  }
  return systems::clamp_control(spec, u);
}

struct RolloutResult {
  Mat X;  // (T+1) x n_x
  Mat U;  // T x n_u
  bool ok = true;
  int windows = 0;
  int denoiser_evals = 0;
  double cost = 0.0;
};

namespace detail {

// History rows for the window starting at trajectory time t1 (may be
// negative at the episode start: states pad with x_init, controls with 0).
template <class GetX, class GetU>
inline void build_history(const systems::SystemSpec& spec, const Vec& x_init, int t1, int T_o,
                          GetX&& get_x, GetU&& get_u, systems::ActionMode mode, Mat& o_hist,
                          Mat& a_hist) {
  o_hist.resize(T_o, spec.n_x + spec.n_u);
  a_hist.resize(T_o, spec.n_a);
  for (int o = 0; o < T_o; ++o) {
    int s = t1 + o;
    Vec xs = s >= 0 ? get_x(s) : x_init;
    Vec up = s - 1 >= 0 ? get_u(s - 1) : Vec::Zero(spec.n_u);
    o_hist.row(o).head(spec.n_x) = xs.transpose();
    o_hist.row(o).tail(spec.n_u) = up.transpose();
    if (mode == systems::ActionMode::Control)
      a_hist.row(o) = (s >= 0 ? get_u(s) : Vec::Zero(spec.n_u)).transpose();
    else
      a_hist.row(o) = xs.transpose();
  }
}

}  // namespace detail

/// Receding-horizon execution of the diffusion policy: generate a chunk,
/// play T_a of its action rows (truncated at the horizon end), update the
/// histories, repeat. For a = u the first applied row maps to the current
/// step; for a = x the applied rows are targets for the upcoming steps, so
/// the inpainted history ends at the current (known) state.
inline RolloutResult rollout_policy(const denoiser::Denoiser& den,
                                    const systems::SystemSpec& spec,
                                    const systems::TaskParams& xi, const RolloutConfig& cfg,
                                    Rng& rng) {
  cfg.validate(den.horizon(), den.schedule().K);
  require(cfg.T_o == den.history(), "rollout_policy: T_o differs from the trained history length");
  const int T = spec.T;
  const int T_o = cfg.T_o;
  RolloutResult res;
  res.X.resize(T + 1, spec.n_x);
  res.U.resize(T, spec.n_u);
  res.X.row(0) = xi.x_init.transpose();

  Vec xi_vec = systems::xi_vector(xi);
  auto get_x = [&](int s) { return Vec(res.X.row(s).transpose()); };
  auto get_u = [&](int s) { return Vec(res.U.row(s).transpose()); };

  int w = 0;  // steps applied so far
  while (w < T) {
    int t1 = spec.action_mode == systems::ActionMode::Control ? w - T_o : w + 1 - T_o;
    Mat o_hist, a_hist;
    detail::build_history(spec, xi.x_init, t1, T_o, get_x, get_u, spec.action_mode, o_hist,
                          a_hist);
    Mat tau0;
    try {
      tau0 = ddpm::generate(den, xi_vec, o_hist, a_hist, cfg.K_rollout,
                            rng, {cfg.clip_tau0});
    } catch (const NumericFailure&) {
      res.ok = false;
      return res;
    }
    ++res.windows;
    res.denoiser_evals += cfg.K_rollout;

    int n_apply = std::min(cfg.T_a, T - w);
    for (int s = 0; s < n_apply; ++s) {
      Vec x = res.X.row(w).transpose();
      Vec u;
      if (spec.action_mode == systems::ActionMode::Control)
        u = systems::clamp_control(spec, tau0.row(T_o + s).transpose());
      else
        u = inverse_control(spec, x, tau0.row(T_o + s).transpose(), cfg.kp, cfg.kd);
      Vec xn;
      try {
        xn = systems::step(spec, x, u);
      } catch (const NumericFailure&) {
        res.ok = false;
        return res;
      }
      res.U.row(w) = u.transpose();
      res.X.row(w + 1) = xn.transpose();
      ++w;
    }
  }
  res.cost = systems::trajectory_cost(spec, xi, res.X, res.U);
  return res;
}

/// Direct-MLP execution: u_t = clamp(pi(x_t, xi)) for torque control, or the
/// inverse controller tracking the predicted next state.
inline RolloutResult rollout_direct(const denoiser::DirectPolicy& policy,
                                    const systems::SystemSpec& spec,
                                    const systems::TaskParams& xi, double kp = 50.0,
                                    double kd = 10.0) {
  RolloutResult res;
  res.X.resize(spec.T + 1, spec.n_x);
  res.U.resize(spec.T, spec.n_u);
  res.X.row(0) = xi.x_init.transpose();
  Vec xi_vec = systems::xi_vector(xi);
  for (int t = 0; t < spec.T; ++t) {
    Vec x = res.X.row(t).transpose();
    Vec a;
    try {
      a = policy.predict(x, xi_vec);
    } catch (const NumericFailure&) {
      res.ok = false;
      return res;
    }
    Vec u = spec.action_mode == systems::ActionMode::Control
                ? systems::clamp_control(spec, a)
                : inverse_control(spec, x, a, kp, kd);
    Vec xn;
    try {
      xn = systems::step(spec, x, u);
    } catch (const NumericFailure&) {
      res.ok = false;
      return res;
    }
    res.U.row(t) = u.transpose();
    res.X.row(t + 1) = xn.transpose();
  }
  res.cost = systems::trajectory_cost(spec, xi, res.X, res.U);
  return res;
}

}  // namespace sobodiff::rollout

#endif  // SOBODIFF_ROLLOUT_HPP
