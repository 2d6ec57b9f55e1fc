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

#ifndef SOBODIFF_TRAJOPT_HPP
#define SOBODIFF_TRAJOPT_HPP

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "sobodiff/common.hpp"
#include "sobodiff/systems.hpp"

namespace sobodiff::trajopt {

struct SolveOptions {
  int n_max = 1000;
  double cost_tol = 1e-7;   // relative cost-decrease threshold
  double grad_tol = 1e-9;   // expected-decrease threshold
  double reg_init = 0.0;    // Levenberg-Marquardt lambda; 0 until first rejection
  double reg_min = 1e-8;    // lambda snaps to 0 once it decays below this
  double reg_max = 1e8;
  int ls_max_steps = 20;
  double ls_backtrack = 0.5;
  double armijo_c = 1e-4;
};

enum class SolveStatus { Converged, MaxIterations, NonFinite, RegSaturated };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Converged: return "converged";
    case SolveStatus::MaxIterations: return "max_iterations";
    case SolveStatus::NonFinite: return "non_finite";
    case SolveStatus::RegSaturated: return "reg_saturated";
  }
  return "?";
}

struct SolveResult {
  Mat X;                    // (T+1) x n_x
  Mat U;                    // T x n_u, clamped controls as applied
  std::vector<Mat> gains;   // T feedback matrices K_t (n_u x n_x)
  double cost = 0.0;
  int iters = 0;
  bool converged = false;
  int ls_failures = 0;
  SolveStatus status = SolveStatus::MaxIterations;
  std::vector<double> cost_history;  // accepted-iteration costs, monotone
};

/// Generic discrete OCP: time-indexed dynamics/derivatives/cost callbacks.
/// systems::make_problem adapts a SystemSpec; tests build LQR instances
/// directly.
struct OcpProblem {
  int n_x = 0;
  int n_u = 0;
  int T = 0;
  Vec x_init;
  double u_max = std::numeric_limits<double>::infinity();
  std::function<Vec(int, const Vec&, const Vec&)> dynamics;
  std::function<void(int, const Vec&, const Vec&, Mat&, Mat&)> dyn_jac;
  // t == T evaluates the terminal cost; u is ignored there.
  std::function<systems::CostExpansion(int, const Vec&, const Vec&)> cost;
  // Optional PSD-Hessian variant (generalized Gauss-Newton) the iteration
  // passes prefer; exact curvature can make the value recursion blow up on
  // unstable systems under heavy regularization.
  std::function<systems::CostExpansion(int, const Vec&, const Vec&)> cost_gn;
  // Optional closed-loop initializer used while re-simulating the provided
  // guess: maps (t, x, X0 row t, U0 row t) to the applied control. Feasible
  // guesses reproduce exactly (the correction vanishes on track); infeasible
  // ones (e.g. interpolations) are servoed toward their state rows. When
  // absent the initial rollout is open loop.
  std::function<Vec(int, const Vec&, const Vec&, const Vec&)> init_control;
  // Optional second-order dynamics contraction (Hxx, Hux, Huu against a
  // cost-to-go gradient w). When present, the final gain-extraction pass
  // includes it so reported gains are the exact sensitivity du*/dx, not the
  // Gauss-Newton approximation the iterations use.
  std::function<void(int, const Vec&, const Vec&, const Vec&, Mat&, Mat&, Mat&)>
      dyn_hess_contract;

  Vec clamp(const Vec& u) const {
    if (!std::isfinite(u_max)) return u;
    Vec c = u;
    for (int i = 0; i < c.size(); ++i) c[i] = std::clamp(c[i], -u_max, u_max);
    return c;
  }
};

inline OcpProblem make_problem(const systems::SystemSpec& spec, const systems::TaskParams& xi) {
  OcpProblem p;
  p.n_x = spec.n_x;
  p.n_u = spec.n_u;
  p.T = spec.T;
  p.x_init = xi.x_init;
  p.u_max = spec.u_max;
  p.dynamics = [spec](int, const Vec& x, const Vec& u) { return systems::step(spec, x, u); };
  p.dyn_jac = [spec](int, const Vec& x, const Vec& u, Mat& A, Mat& B) {
    systems::jacobians(spec, x, u, A, B);
  };
  p.cost = [spec, xi](int t, const Vec& x, const Vec& u) {
    return systems::cost_expansion(spec, xi, t, x, u);
  };
  p.cost_gn = [spec, xi](int t, const Vec& x, const Vec& u) {
    return systems::cost_expansion_gn(spec, xi, t, x, u);
  };
  // PD servo toward the guess's state rows (x = [q; v] layout).
  const int nq = spec.n_q;
  p.init_control = [nq](int, const Vec& x, const Vec& x_des, const Vec& u0) -> Vec {
    return u0 + 50.0 * (x_des.head(nq) - x.head(nq)) + 10.0 * (x_des.tail(nq) - x.tail(nq));
  };
  p.dyn_hess_contract = [spec](int, const Vec& x, const Vec& u, const Vec& w, Mat& Hxx, Mat& Hux,
                               Mat& Huu) {
    systems::hessian_contraction(spec, x, u, w, Hxx, Hux, Huu);
  };
  return p;
}

namespace detail {

struct Rollout {
  Mat X, U;
  double cost = 0.0;
  bool finite = true;
};

// Closed-loop forward pass around (Xn, Un) with step length alpha. With empty
// gains this is the initial (re-)simulation from the provided guess, using
// the problem's init_control servo when present.
inline Rollout forward_pass(const OcpProblem& p, const Mat& Xn, const Mat& Un,
                            const std::vector<Vec>& k, const std::vector<Mat>& K, double alpha) {
  Rollout r;
  r.X.resize(p.T + 1, p.n_x);
  r.U.resize(p.T, p.n_u);
  Vec x = p.x_init;
  r.X.row(0) = x.transpose();
  for (int t = 0; t < p.T; ++t) {
    Vec u = Un.row(t).transpose();
    if (!k.empty())
      u += alpha * k[t] + K[t] * (x - Xn.row(t).transpose());
    else if (p.init_control)
      u = p.init_control(t, x, Xn.row(t).transpose(), u);
    u = p.clamp(u);
    auto ce = p.cost(t, x, u);
    r.cost += ce.l;
    Vec xn;
    try {
      xn = p.dynamics(t, x, u);
    } catch (const NumericFailure&) {
      r.finite = false;
      return r;
    }
    if (!xn.allFinite() || !std::isfinite(r.cost)) {
      r.finite = false;
      return r;
    }
    r.U.row(t) = u.transpose();
    r.X.row(t + 1) = xn.transpose();
    x = xn;
  }
  r.cost += p.cost(p.T, x, Vec::Zero(p.n_u)).l;
  if (!std::isfinite(r.cost)) r.finite = false;
  return r;
}

struct BackwardPass {
  std::vector<Vec> k;
  std::vector<Mat> K;
  double delta1 = 0.0;  // sum k'Qu
  double delta2 = 0.0;  // sum 0.5 k'Quu k
  bool ok = false;
};

// Gauss-Newton value recursion (second-order cost expansion, first-order
// dynamics) with additive regularization on Quu. With exact = true the
// dynamics curvature contraction is added, turning the recursion into the
// full second-order one whose gains are the true sensitivity.
inline BackwardPass backward_pass(const OcpProblem& p, const Mat& X, const Mat& U, double lambda,
                                  bool exact = false) {
  BackwardPass bp;
  bp.k.resize(p.T);
  bp.K.resize(p.T);
  const auto& stage_cost = !exact && p.cost_gn ? p.cost_gn : p.cost;
  auto term = stage_cost(p.T, X.row(p.T).transpose(), Vec::Zero(p.n_u));
  Vec Vx = term.lx;
  Mat Vxx = term.lxx;
  Mat A, B;
  for (int t = p.T - 1; t >= 0; --t) {
    Vec x = X.row(t).transpose();
    Vec u = U.row(t).transpose();
    auto ce = stage_cost(t, x, u);
    p.dyn_jac(t, x, u, A, B);
    Vec Qx = ce.lx + A.transpose() * Vx;
    Vec Qu = ce.lu + B.transpose() * Vx;
    Mat Qxx = ce.lxx + A.transpose() * Vxx * A;
    Mat Quu = ce.luu + B.transpose() * Vxx * B;
    Mat Qux = ce.lux + B.transpose() * Vxx * A;
    if (exact && p.dyn_hess_contract) {
      Mat Hxx, Hux, Huu;
      p.dyn_hess_contract(t, x, u, Vx, Hxx, Hux, Huu);
      Qxx += Hxx;
      Qux += Hux;
      Quu += Huu;
    }
    Mat Quu_reg = Quu + lambda * Mat::Identity(p.n_u, p.n_u);
    Eigen::LLT<Mat> llt(Quu_reg);
    if (llt.info() != Eigen::Success) return bp;  // not PD: caller bumps lambda
    bp.k[t] = -llt.solve(Qu);
    bp.K[t] = -llt.solve(Qux);
    bp.delta1 += bp.k[t].dot(Qu);
    bp.delta2 += 0.5 * bp.k[t].dot(Quu * bp.k[t]);
    Vx = Qx + bp.K[t].transpose() * Quu * bp.k[t] + bp.K[t].transpose() * Qu +
         Qux.transpose() * bp.k[t];
    Vxx = Qxx + bp.K[t].transpose() * Quu * bp.K[t] + bp.K[t].transpose() * Qux +
          Qux.transpose() * bp.K[t];
    Vxx = 0.5 * (Vxx + Vxx.transpose());
    if (!Vx.allFinite() || !Vxx.allFinite()) return bp;
  }
  bp.ok = true;
  return bp;
}

}  // namespace detail

/// iLQR. The initial trajectory is the re-simulation of U0 from x_init
/// (X0 need not be feasible); accepted iterations never increase cost.
/// Returned gains are the last backward pass's feedback matrices.
inline SolveResult solve(const OcpProblem& p, const Mat& X0, const Mat& U0,
                         const SolveOptions& opts = {}) {
  require(U0.rows() == p.T && U0.cols() == p.n_u, "solve: U0 shape mismatch");
  require(X0.rows() == p.T + 1 && X0.cols() == p.n_x, "solve: X0 shape mismatch");
  SolveResult res;

  auto cur = detail::forward_pass(p, X0, U0, {}, {}, 1.0);
  if (!cur.finite) {
    res.status = SolveStatus::NonFinite;
    return res;
  }
  res.cost_history.push_back(cur.cost);

  double lambda = opts.reg_init;
  std::vector<Mat> last_gains;
  int iter = 0;
  SolveStatus status = SolveStatus::MaxIterations;

  while (iter < opts.n_max) {
    ++iter;
    detail::BackwardPass bp;
    for (;;) {
      bp = detail::backward_pass(p, cur.X, cur.U, lambda);
      if (bp.ok) break;
      lambda = std::max(lambda * 10.0, opts.reg_min);
      if (lambda > opts.reg_max) {
        status = SolveStatus::RegSaturated;
        break;
      }
    }
    if (status == SolveStatus::RegSaturated) break;
    last_gains = bp.K;

    double expected = -(bp.delta1 + bp.delta2);  // predicted decrease at alpha = 1
    if (!std::isfinite(expected)) {
      status = SolveStatus::NonFinite;
      break;
    }
    // A tiny expected decrease only means convergence when the step is
    // essentially unregularized; large lambda shrinks steps by itself.
    if (expected < opts.grad_tol && lambda <= 100.0 * opts.reg_min) {
      status = SolveStatus::Converged;
      break;
    }

    bool accepted = false;
    double alpha = 1.0;
    for (int ls = 0; ls < opts.ls_max_steps; ++ls, alpha *= opts.ls_backtrack) {
      auto trial = detail::forward_pass(p, cur.X, cur.U, bp.k, bp.K, alpha);
      if (!trial.finite) {
        ++res.ls_failures;
        continue;
      }
      double exp_alpha = -(alpha * bp.delta1 + alpha * alpha * bp.delta2);
      double decrease = cur.cost - trial.cost;
      bool enough = exp_alpha > 0.0 ? decrease >= opts.armijo_c * exp_alpha : decrease > 0.0;
      if (enough) {
        double rel = decrease / std::max(1.0, std::abs(cur.cost));
        cur = trial;
        res.cost_history.push_back(cur.cost);
        lambda *= 0.5;
        if (lambda < opts.reg_min) lambda = 0.0;
        accepted = true;
        // Tiny relative progress only signals convergence on a full step;
        // a backtracked alpha shrinks the decrease by itself.
        if (rel < opts.cost_tol && alpha == 1.0) status = SolveStatus::Converged;
        break;
      }
      ++res.ls_failures;
    }
    if (status == SolveStatus::Converged) break;
    if (!accepted) {
      // No step improved while the predicted decrease is already negligible:
      // the trajectory sits at the solver's numerical floor.
      if (expected < 1e3 * opts.grad_tol) {
        status = SolveStatus::Converged;
        break;
      }
      lambda = std::max(lambda * 10.0, opts.reg_min);
      if (lambda > opts.reg_max) {
        status = SolveStatus::RegSaturated;
        break;
      }
    }
  }

  res.X = cur.X;
  res.U = cur.U;
  res.cost = cur.cost;
  res.iters = iter;
  res.status = status;
  res.converged = status == SolveStatus::Converged;
  if (p.dyn_hess_contract) {
    // Final gain-extraction pass with exact dynamics curvature, unregularized
    // (the terminal lambda may be inflated by end-of-descent line-search
    // failures and would bias the gains). Regularize only if positivity
    // fails.
    double lam = 0.0;
    for (;;) {
      auto bp = detail::backward_pass(p, cur.X, cur.U, lam, true);
      if (bp.ok) {
        last_gains = bp.K;
        break;
      }
      lam = std::max(lam * 10.0, opts.reg_min);
      if (lam > opts.reg_max) break;
    }
  } else if (last_gains.empty()) {
    // Converged-at-entry edge: still report gains around the final trajectory.
    auto bp = detail::backward_pass(p, cur.X, cur.U, lambda);
    if (bp.ok) last_gains = bp.K;
  }
  res.gains = last_gains;
  return res;
}

inline SolveResult solve(const systems::SystemSpec& spec, const systems::TaskParams& xi,
                         const Mat& X0, const Mat& U0, const SolveOptions& opts = {}) {
  return solve(make_problem(spec, xi), X0, U0, opts);
}

// ---------------------------------------------------------------------------
// LQR oracle.
// ---------------------------------------------------------------------------

struct LQRProblem {
  Mat A, B, Q, R, QT;
  int T = 0;
};

struct RiccatiSolution {
  std::vector<Mat> K;  // T gains, u_t = K_t x_t
  std::vector<Mat> P;  // T+1 cost-to-go matrices
};

/// Exact backward Riccati recursion; K_t = -(R + B'P_{t+1}B)^{-1} B'P_{t+1}A.
inline RiccatiSolution riccati_reference(const LQRProblem& p) {
  require(p.T >= 1, "riccati_reference: T must be >= 1");
  RiccatiSolution s;
  s.K.resize(p.T);
  s.P.resize(p.T + 1);
  s.P[p.T] = p.QT;
  for (int t = p.T - 1; t >= 0; --t) {
    Mat BtP = p.B.transpose() * s.P[t + 1];
    Mat G = p.R + BtP * p.B;
    Eigen::LDLT<Mat> ldlt(G);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
      throw NumericFailure("riccati_reference: R + B'PB is singular or indefinite");
    s.K[t] = -ldlt.solve(BtP * p.A);
    Mat P = p.Q + p.A.transpose() * s.P[t + 1] * p.A +
            p.A.transpose() * s.P[t + 1] * p.B * s.K[t];
    s.P[t] = 0.5 * (P + P.transpose());
  }
  return s;
}

/// Embeds an LQR instance as an unclamped OcpProblem (cost x'Qx + u'Ru,
/// terminal x'QTx, with the 1/1 convention — no 1/2 factors).
inline OcpProblem lqr_to_problem(const LQRProblem& p, const Vec& x_init) {
  OcpProblem o;
  o.n_x = static_cast<int>(p.A.rows());
  o.n_u = static_cast<int>(p.B.cols());
  o.T = p.T;
  o.x_init = x_init;
  o.dynamics = [p](int, const Vec& x, const Vec& u) -> Vec { return p.A * x + p.B * u; };
  o.dyn_jac = [p](int, const Vec&, const Vec&, Mat& A, Mat& B) {
    A = p.A;
    B = p.B;
  };
  o.cost = [p, nx = o.n_x, nu = o.n_u](int t, const Vec& x, const Vec& u) {
    systems::CostExpansion c;
    if (t >= p.T) {
      c.l = x.dot(p.QT * x);
      c.lx = 2.0 * p.QT * x;
      c.lxx = 2.0 * p.QT;
      c.lu = Vec::Zero(nu);
      c.luu = Mat::Zero(nu, nu);
      c.lux = Mat::Zero(nu, nx);
      return c;
    }
    c.l = x.dot(p.Q * x) + u.dot(p.R * u);
    c.lx = 2.0 * p.Q * x;
    c.lu = 2.0 * p.R * u;
    c.lxx = 2.0 * p.Q;
    c.luu = 2.0 * p.R;
    c.lux = Mat::Zero(nu, nx);
    return c;
  };
  return o;
}

/// Optimal LQR cost from x_init is x'P_0 x under the same convention.
inline double lqr_optimal_cost(const RiccatiSolution& s, const Vec& x_init) {
  return x_init.dot(s.P[0] * x_init);
}

}  // namespace sobodiff::trajopt

#endif  // SOBODIFF_TRAJOPT_HPP
