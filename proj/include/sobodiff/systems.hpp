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

#ifndef SOBODIFF_SYSTEMS_HPP
#define SOBODIFF_SYSTEMS_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "sobodiff/common.hpp"

namespace sobodiff::systems {

/// Which variable the policy generates: raw torques/forces (a = u) or
/// full state rows tracked by a low-level controller (a = x).
enum class ActionMode { Control, State };

inline std::string to_string(ActionMode m) {
  return m == ActionMode::Control ? "u" : "x";
}

inline ActionMode action_mode_from_string(const std::string& s) {
  if (s == "u") return ActionMode::Control;
  if (s == "x") return ActionMode::State;
  throw ContractViolation("unknown action mode '" + s + "' (expected \"u\" or \"x\")");
}

struct CostWeights {
  double goal = 10.0;      // stage weight on ||end_effector - goal||^2
  double u_reg = 0.1;      // stage weight on ||u||^2
  double term_pos = 100.0; // terminal weight on ||end_effector - goal||^2
  double term_vel = 1.0;   // terminal weight on ||v||^2
  double bound = 100.0;    // quadratic penalty past |u_i| = u_max
  double obstacle = 200.0; // quadratic penalty inside obstacle + margin
  double obstacle_margin = 0.05;
};

struct PhysicalParams {
  double mass = 1.0;
  double length = 1.0;
  double mass2 = 1.0;    // second link (double pendulum)
  double length2 = 1.0;  // second link (double pendulum)
  double gravity = 9.81;
  double damping = 0.0;
};

/// Static description of one dynamical system: dimensions, integration
/// step, horizon, bounds, cost weights and physical parameters.
/// State layout is always x = [q; v].
struct SystemSpec {
  std::string name;
  double dt = 0.05;
  int T = 100;
  int n_q = 1;
  int n_x = 2;
  int n_u = 1;
  int n_a = 1;
  ActionMode action_mode = ActionMode::Control;
  double u_max = 25.0;
  CostWeights w;
  PhysicalParams p;

  int n_v() const { return n_x - n_q; }
  int ee_dim() const { return name == "pendulum" || name == "double_pendulum" || name == "point_mass_2d" ? 2 : n_q; }

  void validate() const {
    require(dt > 0.0, "SystemSpec: dt must be positive");
    require(T >= 2, "SystemSpec: horizon T must be >= 2");
    require(n_x == 2 * n_q, "SystemSpec: n_x must equal dim(q) + dim(v)");
    if (action_mode == ActionMode::Control)
      require(n_a == n_u, "SystemSpec: action mode a=u forces n_a = n_u");
    else
      require(n_a == n_x, "SystemSpec: action mode a=x forces n_a = n_x");
  }
};

struct Obstacle {
  Eigen::Vector2d center;
  double radius = 0.0;
};

/// One problem instance xi: where to start, where to go, and the penalty
/// parameters the cost uses for this instance.
struct TaskParams {
  Vec x_init;
  Vec goal;
  std::vector<Obstacle> obstacles;
  double w_obstacle = 200.0;
  double w_bound = 100.0;
  double margin = 0.05;
};

/// Conditioning vector fed to learned policies: [x_init; goal].
/// Obstacles are fixed per task family and not part of the conditioning.
inline Vec xi_vector(const TaskParams& xi) {
  Vec v(xi.x_init.size() + xi.goal.size());
  v << xi.x_init, xi.goal;
  return v;
}

inline SystemSpec make_spec(const std::string& name) {
  SystemSpec s;
  s.name = name;
  if (name == "point_mass_2d") {
    s.dt = 0.05;
    s.T = 60;
    s.n_q = 2;
    s.n_x = 4;
    s.n_u = 2;
    s.action_mode = ActionMode::State;
    s.n_a = s.n_x;
    s.u_max = 10.0;
  } else if (name == "pendulum") {
    s.dt = 0.05;
    s.T = 100;
    s.n_q = 1;
    s.n_x = 2;
    s.n_u = 1;
    s.action_mode = ActionMode::Control;
    s.n_a = s.n_u;
    s.u_max = 25.0;
  } else if (name == "double_pendulum") {
    s.dt = 0.02;
    s.T = 150;
    s.n_q = 2;
    s.n_x = 4;
    s.n_u = 2;
    s.action_mode = ActionMode::Control;
    s.n_a = s.n_u;
    s.u_max = 25.0;
  } else {
    throw ContractViolation("unknown system '" + name + "'");
  }
  s.validate();
  return s;
}

inline void to_json(nlohmann::json& j, const SystemSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"dt", s.dt},
                     {"T", s.T},
                     {"n_q", s.n_q},
                     {"n_x", s.n_x},
                     {"n_u", s.n_u},
                     {"n_a", s.n_a},
                     {"action_mode", to_string(s.action_mode)},
                     {"u_max", s.u_max},
                     {"weights",
                      {{"goal", s.w.goal},
                       {"u_reg", s.w.u_reg},
                       {"term_pos", s.w.term_pos},
                       {"term_vel", s.w.term_vel},
                       {"bound", s.w.bound},
                       {"obstacle", s.w.obstacle},
                       {"obstacle_margin", s.w.obstacle_margin}}},
                     {"params",
                      {{"mass", s.p.mass},
                       {"length", s.p.length},
                       {"mass2", s.p.mass2},
                       {"length2", s.p.length2},
                       {"gravity", s.p.gravity},
                       {"damping", s.p.damping}}}};
}

inline void from_json(const nlohmann::json& j, SystemSpec& s) {
  s = make_spec(j.at("name").get<std::string>());
  if (j.contains("dt")) s.dt = j.at("dt").get<double>();
  if (j.contains("T")) s.T = j.at("T").get<int>();
  if (j.contains("u_max")) s.u_max = j.at("u_max").get<double>();
  if (j.contains("action_mode")) {
    s.action_mode = action_mode_from_string(j.at("action_mode").get<std::string>());
    s.n_a = s.action_mode == ActionMode::Control ? s.n_u : s.n_x;
  }
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    if (w.contains("goal")) s.w.goal = w.at("goal").get<double>();
    if (w.contains("u_reg")) s.w.u_reg = w.at("u_reg").get<double>();
    if (w.contains("term_pos")) s.w.term_pos = w.at("term_pos").get<double>();
    if (w.contains("term_vel")) s.w.term_vel = w.at("term_vel").get<double>();
    if (w.contains("bound")) s.w.bound = w.at("bound").get<double>();
    if (w.contains("obstacle")) s.w.obstacle = w.at("obstacle").get<double>();
    if (w.contains("obstacle_margin")) s.w.obstacle_margin = w.at("obstacle_margin").get<double>();
  }
  if (j.contains("params")) {
    const auto& p = j.at("params");
    if (p.contains("mass")) s.p.mass = p.at("mass").get<double>();
    if (p.contains("length")) s.p.length = p.at("length").get<double>();
    if (p.contains("mass2")) s.p.mass2 = p.at("mass2").get<double>();
    if (p.contains("length2")) s.p.length2 = p.at("length2").get<double>();
    if (p.contains("gravity")) s.p.gravity = p.at("gravity").get<double>();
    if (p.contains("damping")) s.p.damping = p.at("damping").get<double>();
  }
  s.validate();
}

inline Vec clamp_control(const SystemSpec& spec, const Vec& u) {
  Vec c = u;
  for (int i = 0; i < c.size(); ++i) c[i] = std::clamp(c[i], -spec.u_max, spec.u_max);
  return c;
}

// ---------------------------------------------------------------------------
// Dynamics. Semi-implicit Euler throughout: v' = v + dt*acc, q' = q + dt*v'.
// ---------------------------------------------------------------------------

namespace detail {

// Double pendulum (point masses at link ends): returns joint accelerations and,
// if requested, the analytic partials d(qdd)/d(q, v, u).
inline Eigen::Vector2d double_pendulum_acc(const SystemSpec& s, const Vec& x, const Vec& u,
                                           Mat* d_dq = nullptr, Mat* d_dv = nullptr,
                                           Mat* d_du = nullptr) {
  const double m1 = s.p.mass, m2 = s.p.mass2, l1 = s.p.length, l2 = s.p.length2;
  const double g = s.p.gravity, b = s.p.damping;
  const double t1 = x[0], t2 = x[1], w1 = x[2], w2 = x[3];
  const double c2 = std::cos(t2), s2 = std::sin(t2);
  const double s1 = std::sin(t1), c1 = std::cos(t1);
  const double s12 = std::sin(t1 + t2), c12 = std::cos(t1 + t2);

  Eigen::Matrix2d M;
  M << (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2,
      m2 * l2 * l2 + m2 * l1 * l2 * c2, m2 * l2 * l2 + m2 * l1 * l2 * c2, m2 * l2 * l2;

  const double h = m2 * l1 * l2 * s2;
  Eigen::Vector2d cor(-h * (w2 * w2 + 2.0 * w1 * w2), h * w1 * w1);
  Eigen::Vector2d grav((m1 + m2) * g * l1 * s1 + m2 * g * l2 * s12, m2 * g * l2 * s12);
  Eigen::Vector2d rhs = Eigen::Vector2d(u[0], u[1]) - cor - grav - b * Eigen::Vector2d(w1, w2);

  Eigen::Matrix2d Minv = M.inverse();
  Eigen::Vector2d acc = Minv * rhs;

  if (d_dq || d_dv || d_du) {
    // dM/dt2 (dM/dt1 = 0)
    Eigen::Matrix2d dM2;
    dM2 << -2.0 * m2 * l1 * l2 * s2, -m2 * l1 * l2 * s2, -m2 * l1 * l2 * s2, 0.0;
    const double dh2 = m2 * l1 * l2 * c2;

    Eigen::Vector2d drhs_t1(-((m1 + m2) * g * l1 * c1 + m2 * g * l2 * c12), -m2 * g * l2 * c12);
    Eigen::Vector2d drhs_t2 =
        Eigen::Vector2d(dh2 * (w2 * w2 + 2.0 * w1 * w2), -dh2 * w1 * w1) -
        Eigen::Vector2d(m2 * g * l2 * c12, m2 * g * l2 * c12);
    Eigen::Vector2d drhs_w1 = Eigen::Vector2d(2.0 * h * w2, -2.0 * h * w1) - Eigen::Vector2d(b, 0.0);
    Eigen::Vector2d drhs_w2 = Eigen::Vector2d(2.0 * h * (w1 + w2), 0.0) - Eigen::Vector2d(0.0, b);

    if (d_dq) {
      d_dq->resize(2, 2);
      d_dq->col(0) = Minv * drhs_t1;
      d_dq->col(1) = Minv * (drhs_t2 - dM2 * acc);
    }
    if (d_dv) {
      d_dv->resize(2, 2);
      d_dv->col(0) = Minv * drhs_w1;
      d_dv->col(1) = Minv * drhs_w2;
    }
    if (d_du) *d_du = Minv;
  }
  return acc;
}

}  // namespace detail

/// Discrete dynamics x_{t+1} = f(x, u).
inline Vec step(const SystemSpec& spec, const Vec& x, const Vec& u) {
  require(x.size() == spec.n_x && u.size() == spec.n_u, "step: dimension mismatch");
  const double dt = spec.dt;
  Vec next(spec.n_x);
  if (spec.name == "point_mass_2d") {
    Eigen::Vector2d v = x.segment<2>(2) + dt * Eigen::Vector2d(u[0], u[1]) / spec.p.mass;
    next.segment<2>(2) = v;
    next.segment<2>(0) = x.segment<2>(0) + dt * v;
  } else if (spec.name == "pendulum") {
    const double ml2 = spec.p.mass * spec.p.length * spec.p.length;
    double acc = (u[0] - spec.p.mass * spec.p.gravity * spec.p.length * std::sin(x[0]) -
                  spec.p.damping * x[1]) /
                 ml2;
    double v = x[1] + dt * acc;
    next << x[0] + dt * v, v;
  } else if (spec.name == "double_pendulum") {
    Eigen::Vector2d acc = detail::double_pendulum_acc(spec, x, u);
    Eigen::Vector2d v = x.segment<2>(2) + dt * acc;
    next.segment<2>(2) = v;
    next.segment<2>(0) = x.segment<2>(0) + dt * v;
  } else {
    throw ContractViolation("step: unknown system '" + spec.name + "'");
  }
  if (!next.allFinite()) throw NumericFailure("step: non-finite state for system " + spec.name);
  return next;
}

/// Analytic dynamics Jacobians A = df/dx, B = df/du.
inline void jacobians(const SystemSpec& spec, const Vec& x, const Vec& u, Mat& A, Mat& B) {
  require(x.size() == spec.n_x && u.size() == spec.n_u, "jacobians: dimension mismatch");
  const double dt = spec.dt;
  const int nq = spec.n_q;
  A.setZero(spec.n_x, spec.n_x);
  B.setZero(spec.n_x, spec.n_u);
  Mat dq, dv, du;
  if (spec.name == "point_mass_2d") {
    dq = Mat::Zero(2, 2);
    dv = Mat::Zero(2, 2);
    du = Mat::Identity(2, 2) / spec.p.mass;
  } else if (spec.name == "pendulum") {
    const double ml2 = spec.p.mass * spec.p.length * spec.p.length;
    dq = Mat::Constant(1, 1, -spec.p.mass * spec.p.gravity * spec.p.length * std::cos(x[0]) / ml2);
    dv = Mat::Constant(1, 1, -spec.p.damping / ml2);
    du = Mat::Constant(1, 1, 1.0 / ml2);
  } else if (spec.name == "double_pendulum") {
    detail::double_pendulum_acc(spec, x, u, &dq, &dv, &du);
  } else {
    throw ContractViolation("jacobians: unknown system '" + spec.name + "'");
  }
  // v' = v + dt*acc ; q' = q + dt*v'
  Mat I = Mat::Identity(nq, nq);
  A.block(nq, 0, nq, nq) = dt * dq;
  A.block(nq, nq, nq, nq) = I + dt * dv;
  A.block(0, 0, nq, nq) = I + dt * dt * dq;
  A.block(0, nq, nq, nq) = dt * (I + dt * dv);
  B.block(nq, 0, nq, spec.n_u) = dt * du;
  B.block(0, 0, nq, spec.n_u) = dt * dt * du;
}

/// Second-order dynamics contraction with a cost-to-go gradient w:
///   Hxx = sum_i w_i d2f_i/dx dx,  Hux = sum_i w_i d2f_i/du dx,
///   Huu = sum_i w_i d2f_i/du du.
/// Point mass is linear (all zero) and the pendulum is analytic; the double
/// pendulum differentiates its analytic Jacobians by central differences.
inline void hessian_contraction(const SystemSpec& spec, const Vec& x, const Vec& u, const Vec& w,
                                Mat& Hxx, Mat& Hux, Mat& Huu) {
  const int nx = spec.n_x, nu = spec.n_u;
  Hxx = Mat::Zero(nx, nx);
  Hux = Mat::Zero(nu, nx);
  Huu = Mat::Zero(nu, nu);
  if (spec.name == "point_mass_2d") return;
  if (spec.name == "pendulum") {
    const double dt = spec.dt;
    const double gl = spec.p.gravity * std::sin(x[0]) / spec.p.length;
    Hxx(0, 0) = w[0] * dt * dt * gl + w[1] * dt * gl;
    return;
  }
  const double h = 1e-5;
  auto grad_x = [&](const Vec& xx, const Vec& uu) {
    Mat A, B;
    jacobians(spec, xx, uu, A, B);
    return Vec(A.transpose() * w);
  };
  auto grad_u = [&](const Vec& xx, const Vec& uu) {
    Mat A, B;
    jacobians(spec, xx, uu, A, B);
    return Vec(B.transpose() * w);
  };
  for (int j = 0; j < nx; ++j) {
    Vec xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    Hxx.col(j) = (grad_x(xp, u) - grad_x(xm, u)) / (2.0 * h);
    Hux.col(j) = (grad_u(xp, u) - grad_u(xm, u)) / (2.0 * h);
  }
  for (int j = 0; j < nu; ++j) {
    Vec up = u, um = u;
    up[j] += h;
    um[j] -= h;
    Huu.col(j) = (grad_u(x, up) - grad_u(x, um)) / (2.0 * h);
  }
  Hxx = 0.5 * (Hxx + Hxx.transpose());
  Huu = 0.5 * (Huu + Huu.transpose());
}

// ---------------------------------------------------------------------------
// End-effector map and costs.
// ---------------------------------------------------------------------------

/// Task-space position: pendulum tip (theta = 0 hangs down), double-pendulum
/// tip, or the point mass position itself.
inline Eigen::Vector2d end_effector(const SystemSpec& spec, const Vec& x) {
  if (spec.name == "point_mass_2d") return x.segment<2>(0);
  if (spec.name == "pendulum") {
    const double l = spec.p.length;
    return {l * std::sin(x[0]), -l * std::cos(x[0])};
  }
  const double l1 = spec.p.length, l2 = spec.p.length2;
  return {l1 * std::sin(x[0]) + l2 * std::sin(x[0] + x[1]),
          -l1 * std::cos(x[0]) - l2 * std::cos(x[0] + x[1])};
}

namespace detail {

// d(ee)/dq and per-output-row second derivatives d2(ee_i)/dq2.
inline void ee_derivatives(const SystemSpec& spec, const Vec& x, Mat& J, Mat& H0, Mat& H1) {
  const int nq = spec.n_q;
  J.setZero(2, nq);
  H0.setZero(nq, nq);
  H1.setZero(nq, nq);
  if (spec.name == "point_mass_2d") {
    J = Mat::Identity(2, 2);
  } else if (spec.name == "pendulum") {
    const double l = spec.p.length;
    J << l * std::cos(x[0]), l * std::sin(x[0]);
    H0(0, 0) = -l * std::sin(x[0]);
    H1(0, 0) = l * std::cos(x[0]);
  } else {
    const double l1 = spec.p.length, l2 = spec.p.length2;
    const double c1 = std::cos(x[0]), s1 = std::sin(x[0]);
    const double c12 = std::cos(x[0] + x[1]), s12 = std::sin(x[0] + x[1]);
    J << l1 * c1 + l2 * c12, l2 * c12, l1 * s1 + l2 * s12, l2 * s12;
    H0 << -l1 * s1 - l2 * s12, -l2 * s12, -l2 * s12, -l2 * s12;
    H1 << l1 * c1 + l2 * c12, l2 * c12, l2 * c12, l2 * c12;
  }
}

}  // namespace detail

struct CostExpansion {
  double l = 0.0;
  Vec lx, lu;
  Mat lxx, luu, lux;
};

namespace detail {

// Shared between the value-only and the expansion paths.
inline double obstacle_penalty(const TaskParams& xi, const Eigen::Vector2d& p) {
  double pen = 0.0;
  for (const auto& ob : xi.obstacles) {
    double d = (p - ob.center).norm();
    double gap = ob.radius + xi.margin - d;
    if (gap > 0.0) pen += xi.w_obstacle * gap * gap;
  }
  return pen;
}

inline double bound_penalty(const SystemSpec& spec, const TaskParams& xi, const Vec& u) {
  double pen = 0.0;
  for (int i = 0; i < u.size(); ++i) {
    double over = std::abs(u[i]) - spec.u_max;
    if (over > 0.0) pen += xi.w_bound * over * over;
  }
  return pen;
}

}  // namespace detail

/// Stage cost value only (t in [0, T-1]) or terminal value (t = T).
inline double cost_value(const SystemSpec& spec, const TaskParams& xi, int t, const Vec& x,
                         const Vec& u) {
  const Eigen::Vector2d e = end_effector(spec, x) - Eigen::Vector2d(xi.goal[0], xi.goal[1]);
  const Eigen::Vector2d pos = end_effector(spec, x);
  if (t >= spec.T) {
    double c = spec.w.term_pos * e.squaredNorm() +
               spec.w.term_vel * x.tail(spec.n_v()).squaredNorm();
    return c + detail::obstacle_penalty(xi, pos);
  }
  return spec.w.goal * e.squaredNorm() + spec.w.u_reg * u.squaredNorm() +
         detail::bound_penalty(spec, xi, u) + detail::obstacle_penalty(xi, pos);
}

namespace detail {

// Shared cost expansion. With exact_hessian = false the second-order
// residual-curvature terms are dropped (generalized Gauss-Newton): the
// resulting stage Hessians are PSD, which keeps the solver's value recursion
// bounded on unstable systems.
inline CostExpansion cost_expansion_impl(const SystemSpec& spec, const TaskParams& xi, int t,
                                         const Vec& x, const Vec& u, bool exact_hessian) {
  require(t >= 0 && t <= spec.T, "cost_expansion: t out of range");
  const int nx = spec.n_x, nu = spec.n_u, nq = spec.n_q;
  CostExpansion c;
  c.lx = Vec::Zero(nx);
  c.lu = Vec::Zero(nu);
  c.lxx = Mat::Zero(nx, nx);
  c.luu = Mat::Zero(nu, nu);
  c.lux = Mat::Zero(nu, nx);

  const bool terminal = t >= spec.T;
  const double w_pos = terminal ? spec.w.term_pos : spec.w.goal;

  // Goal-tracking term through the end-effector map.
  Mat J, H0, H1;
  ee_derivatives(spec, x, J, H0, H1);
  Eigen::Vector2d e = end_effector(spec, x) - Eigen::Vector2d(xi.goal[0], xi.goal[1]);
  c.l += w_pos * e.squaredNorm();
  c.lx.head(nq) += 2.0 * w_pos * J.transpose() * e;
  c.lxx.topLeftCorner(nq, nq) += 2.0 * w_pos * J.transpose() * J;
  if (exact_hessian) c.lxx.topLeftCorner(nq, nq) += 2.0 * w_pos * (e[0] * H0 + e[1] * H1);

  if (terminal) {
    const int nv = spec.n_v();
    c.l += spec.w.term_vel * x.tail(nv).squaredNorm();
    c.lx.tail(nv) += 2.0 * spec.w.term_vel * x.tail(nv);
    c.lxx.bottomRightCorner(nv, nv) += 2.0 * spec.w.term_vel * Mat::Identity(nv, nv);
  } else {
    c.l += spec.w.u_reg * u.squaredNorm();
    c.lu += 2.0 * spec.w.u_reg * u;
    c.luu += 2.0 * spec.w.u_reg * Mat::Identity(nu, nu);
    // Control-bound penalty, C^1 at the boundary.
    for (int i = 0; i < nu; ++i) {
      double over = std::abs(u[i]) - spec.u_max;
      if (over > 0.0) {
        double sgn = u[i] > 0.0 ? 1.0 : -1.0;
        c.l += xi.w_bound * over * over;
        c.lu[i] += 2.0 * xi.w_bound * over * sgn;
        c.luu(i, i) += 2.0 * xi.w_bound;
      }
    }
  }

  // Obstacle penalty acts on the end-effector position.
  for (const auto& ob : xi.obstacles) {
    Eigen::Vector2d p = end_effector(spec, x);
    Eigen::Vector2d diff = p - ob.center;
    double d = diff.norm();
    double gap = ob.radius + xi.margin - d;
    if (gap <= 0.0 || d < 1e-12) continue;
    Eigen::Vector2d nd = diff / d;  // grad of d wrt p
    c.l += xi.w_obstacle * gap * gap;
    Eigen::Vector2d dpen_dp = -2.0 * xi.w_obstacle * gap * nd;
    Mat d2pen_dp2 = 2.0 * xi.w_obstacle * nd * nd.transpose();
    if (exact_hessian) {
      Mat hess_d = (Mat::Identity(2, 2) - nd * nd.transpose()) / d;
      d2pen_dp2 -= 2.0 * xi.w_obstacle * gap * hess_d;
    }
    c.lx.head(nq) += J.transpose() * dpen_dp;
    c.lxx.topLeftCorner(nq, nq) += J.transpose() * d2pen_dp2 * J;
    if (exact_hessian)
      c.lxx.topLeftCorner(nq, nq) += dpen_dp[0] * H0 + dpen_dp[1] * H1;
  }
  return c;
}

}  // namespace detail

/// Exact value/gradient/Hessian expansion of the stage (t < T) or terminal
/// (t = T) cost, penalties included.
inline CostExpansion cost_expansion(const SystemSpec& spec, const TaskParams& xi, int t,
                                    const Vec& x, const Vec& u) {
  return detail::cost_expansion_impl(spec, xi, t, x, u, true);
}

/// Generalized Gauss-Newton expansion: same value and gradients, PSD
/// Hessians (residual curvature dropped). The solver iterates on this.
inline CostExpansion cost_expansion_gn(const SystemSpec& spec, const TaskParams& xi, int t,
                                       const Vec& x, const Vec& u) {
  return detail::cost_expansion_impl(spec, xi, t, x, u, false);
}

/// Total trajectory cost J(X, U; xi), Eq. (1) style: stage sum plus terminal.
inline double trajectory_cost(const SystemSpec& spec, const TaskParams& xi, const Mat& X,
                              const Mat& U) {
  require(X.rows() == spec.T + 1 && U.rows() == spec.T, "trajectory_cost: bad shapes");
  double J = 0.0;
  for (int t = 0; t < spec.T; ++t)
    J += cost_value(spec, xi, t, X.row(t).transpose(), U.row(t).transpose());
  J += cost_value(spec, xi, spec.T, X.row(spec.T).transpose(), Vec::Zero(spec.n_u));
  return J;
}

// ---------------------------------------------------------------------------
// Task sampling and solver initialization.
// ---------------------------------------------------------------------------

struct TaskSampling {
  double start_angle_range = 0.5;  // rad, uniform about the downward position
  double workspace = 0.9;          // point-mass positions drawn in [-w, w]^2
  std::vector<Obstacle> obstacles; // fixed per task family
};

/// Goal as task-space target: upright tip for pendulums, sampled position
/// for the point mass.
inline Vec upright_goal(const SystemSpec& spec) {
  Vec g(2);
  if (spec.name == "pendulum")
    g << 0.0, spec.p.length;
  else
    g << 0.0, spec.p.length + spec.p.length2;
  return g;
}

inline TaskParams sample_task(const SystemSpec& spec, Rng& rng, const TaskSampling& ts = {}) {
  TaskParams xi;
  xi.w_obstacle = spec.w.obstacle;
  xi.w_bound = spec.w.bound;
  xi.margin = spec.w.obstacle_margin;
  xi.obstacles = ts.obstacles;
  if (spec.name == "pendulum" || spec.name == "double_pendulum") {
    xi.x_init = Vec::Zero(spec.n_x);
    for (int i = 0; i < spec.n_q; ++i)
      xi.x_init[i] = rng.uniform(-ts.start_angle_range, ts.start_angle_range);
    xi.goal = upright_goal(spec);
    return xi;
  }
  if (spec.name != "point_mass_2d")
    throw ContractViolation("sample_task: unknown system '" + spec.name + "'");

  auto clear_of_obstacles = [&](const Eigen::Vector2d& p) {
    for (const auto& ob : xi.obstacles)
      if ((p - ob.center).norm() <= ob.radius + xi.margin) return false;
    return true;
  };
  auto draw_point = [&](const char* what) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Eigen::Vector2d p(rng.uniform(-ts.workspace, ts.workspace),
                        rng.uniform(-ts.workspace, ts.workspace));
      if (clear_of_obstacles(p)) return p;
    }
    throw NumericFailure(std::string("sample_task: no clear ") + what + " after 1000 resamples");
  };
  Eigen::Vector2d p0 = draw_point("start");
  Eigen::Vector2d pg = draw_point("goal");
  xi.x_init = Vec::Zero(4);
  xi.x_init.segment<2>(0) = p0;
  xi.goal = pg;
  return xi;
}

/// State consistent with the goal (used by the interpolation init and as the
/// tail of the reference window): the nearest upright with zero velocity, or
/// the goal position at rest. The tip target is the same for +pi and -pi;
/// interpolating toward the nearer one guides the natural swing direction.
inline Vec goal_state(const SystemSpec& spec, const TaskParams& xi) {
  Vec xg = Vec::Zero(spec.n_x);
  if (spec.name == "pendulum" || spec.name == "double_pendulum") {
    xg[0] = xi.x_init[0] >= 0.0 ? M_PI : -M_PI;
  } else {
    xg.segment<2>(0) = xi.goal;
  }
  return xg;
}

/// Interpolate(x_0, x_target): straight-line states over T+1 steps with
/// velocities ramped to zero, and zero controls.
inline void interpolate_init(const SystemSpec& spec, const TaskParams& xi, Mat& X0, Mat& U0) {
  const Vec xg = goal_state(spec, xi);
  X0.resize(spec.T + 1, spec.n_x);
  U0 = Mat::Zero(spec.T, spec.n_u);
  for (int t = 0; t <= spec.T; ++t) {
    double a = static_cast<double>(t) / spec.T;
    X0.row(t) = ((1.0 - a) * xi.x_init + a * xg).transpose();
  }
}

}  // namespace sobodiff::systems

#endif  // SOBODIFF_SYSTEMS_HPP
