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

#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "sobodiff/sensitivity.hpp"
#include "sobodiff/systems.hpp"
#include "sobodiff/trajopt.hpp"

using namespace sobodiff;
using namespace sobodiff::sensitivity;

namespace {

// Brute-force oracle: unclamped closed-loop rollout from a perturbed state at
// window time t1+o, collecting the action rows of the window.
Mat fd_chunk_jacobian(const systems::SystemSpec& spec, const trajopt::SolveResult& res, int t1,
                      int T_h, int T_o, double h = 1e-6) {
  const int n_x = spec.n_x, n_a = spec.n_a;
  auto window_actions = [&](int o, const Vec& x_start) {
    Mat acts(T_h, n_a);
    for (int hh = 0; hh < o; ++hh)
      acts.row(hh) = spec.action_mode == systems::ActionMode::Control
                         ? res.U.row(t1 + hh)
                         : res.X.row(t1 + hh);
    Vec x = x_start;
    for (int hh = o; hh < T_h; ++hh) {
      int t = t1 + hh;
      Vec u = res.U.row(t < spec.T ? t : spec.T - 1).transpose() +
              res.gains[t < spec.T ? t : spec.T - 1] * (x - res.X.row(t).transpose());
      if (spec.action_mode == systems::ActionMode::Control)
        acts.row(hh) = u.transpose();
      else
        acts.row(hh) = x.transpose();
      if (hh + 1 < T_h) x = systems::step(spec, x, u);
    }
    return acts;
  };
  Mat J(T_h * n_a, T_o * n_x);
  for (int o = 0; o < T_o; ++o) {
    Vec x0 = res.X.row(t1 + o).transpose();
    for (int j = 0; j < n_x; ++j) {
      Vec xp = x0, xm = x0;
      xp[j] += h;
      xm[j] -= h;
      Mat dp = window_actions(o, xp), dm = window_actions(o, xm);
      for (int hh = 0; hh < T_h; ++hh)
        J.block(hh * n_a, o * n_x + j, n_a, 1) =
            (dp.row(hh) - dm.row(hh)).transpose() / (2.0 * h);
    }
  }
  return J;
}

trajopt::SolveResult solved_pendulum(const systems::SystemSpec& spec, systems::TaskParams& xi) {
  Rng rng(17);
  xi = systems::sample_task(spec, rng);
  Mat X0, U0;
  systems::interpolate_init(spec, xi, X0, U0);
  auto res = trajopt::solve(spec, xi, X0, U0);
  REQUIRE(res.converged);
  return res;
}

}  // namespace

TEST_CASE("zero gains reduce Phi to the open-loop A") {
  auto spec = systems::make_spec("pendulum");
  Rng rng(3);
  std::vector<Mat> A(4), B(4), K(4);
  for (int t = 0; t < 4; ++t) {
    Vec x = rng.normal_vec(2), u = rng.normal_vec(1);
    systems::jacobians(spec, x, u, A[t], B[t]);
    K[t] = Mat::Zero(1, 2);
  }
  auto cl = assemble_closed_loop(A, B, K, systems::ActionMode::Control);
  for (int t = 0; t < 4; ++t) REQUIRE(oracles::rel_error(cl.Phi[t], A[t]) < 1e-14);
}

TEST_CASE("trivial chunk Jacobians in state mode") {
  // A single identity Phi chain: T_h = 1 gives I, T_h = 2 stacks [I; Phi].
  std::vector<Mat> A = {Mat::Identity(2, 2) * 0.9}, B = {Mat::Ones(2, 1)},
                   K = {Mat::Zero(1, 2)};
  auto cl = assemble_closed_loop(A, B, K, systems::ActionMode::State);
  Mat J1 = chunk_jacobian(cl, 0, 1, 1);
  REQUIRE(oracles::rel_error(J1, Mat(Mat::Identity(2, 2))) < 1e-14);
  Mat J2 = chunk_jacobian(cl, 0, 2, 1);
  REQUIRE(oracles::rel_error(Mat(J2.topRows(2)), Mat(Mat::Identity(2, 2))) < 1e-14);
  REQUIRE(oracles::rel_error(Mat(J2.bottomRows(2)), cl.Phi[0]) < 1e-14);
}

TEST_CASE("closed-loop Phi matches finite differences of the feedback map") {
  auto spec = systems::make_spec("pendulum");
  systems::TaskParams xi;
  auto res = solved_pendulum(spec, xi);
  auto cl = closed_loop_jacobians(spec, res);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    int t = rng.uniform_int(0, spec.T - 1);
    Vec xt = res.X.row(t).transpose();
    auto closed = [&](const Vec& x) {
      Vec u = res.U.row(t).transpose() + res.gains[t] * (x - xt);
      return systems::step(spec, x, u);
    };
    Mat fd = oracles::fd_jacobian(closed, xt);
    REQUIRE(oracles::rel_error(cl.Phi[t], fd) < 1e-4);
  }
}

TEST_CASE("pendulum chunk Jacobian matches the rollout perturbation oracle") {
  auto spec = systems::make_spec("pendulum");
  systems::TaskParams xi;
  auto res = solved_pendulum(spec, xi);
  auto cl = closed_loop_jacobians(spec, res);
  const int T_h = 8, T_o = 1;
  for (int t1 : {0, 20, 47}) {
    Mat J = chunk_jacobian(cl, t1, T_h, T_o);
    Mat J_fd = fd_chunk_jacobian(spec, res, t1, T_h, T_o);
    REQUIRE(oracles::rel_error(J, J_fd) < 1e-4);
  }
}

TEST_CASE("state-mode chunk Jacobian with history rows matches the oracle") {
  auto spec = systems::make_spec("point_mass_2d");
  Rng rng(8);
  auto xi = systems::sample_task(spec, rng);
  Mat X0, U0;
  systems::interpolate_init(spec, xi, X0, U0);
  auto res = trajopt::solve(spec, xi, X0, U0);
  REQUIRE(res.converged);
  auto cl = closed_loop_jacobians(spec, res);
  const int T_h = 6, T_o = 2;
  Mat J = chunk_jacobian(cl, 3, T_h, T_o);
  Mat J_fd = fd_chunk_jacobian(spec, res, 3, T_h, T_o);
  REQUIRE(oracles::rel_error(J, J_fd) < 1e-4);

  // Diagonal history blocks are exactly the identity, future-into-past blocks
  // exactly zero.
  REQUIRE(oracles::rel_error(Mat(J.block(0, 0, 4, 4)), Mat(Mat::Identity(4, 4))) < 1e-14);
  REQUIRE(oracles::rel_error(Mat(J.block(4, 4, 4, 4)), Mat(Mat::Identity(4, 4))) < 1e-14);
  REQUIRE(J.block(0, 4, 4, 4).norm() == 0.0);
}

TEST_CASE("composition property over adjacent sub-windows") {
  // Phi products compose: the (h, 0) block over [t1, t1+T_h) equals the
  // chained product of the two sub-window chains.
  auto spec = systems::make_spec("double_pendulum");
  Rng rng(12);
  std::vector<Mat> A(12), B(12), K(12);
  for (int t = 0; t < 12; ++t) {
    Vec x = rng.normal_vec(4) * 0.3, u = rng.normal_vec(2);
    systems::jacobians(spec, x, u, A[t], B[t]);
    K[t] = rng.normal_mat(2, 4) * 0.2;
  }
  auto cl = assemble_closed_loop(A, B, K, systems::ActionMode::Control);
  Rng pick(9);
  for (int trial = 0; trial < 5; ++trial) {
    int t1 = pick.uniform_int(0, 3);
    int split = pick.uniform_int(2, 4);
    int T_h = split + pick.uniform_int(2, 4);
    Mat J_full = chunk_jacobian(cl, t1, T_h, 1);
    // Chain of Phi across the split point.
    Mat P = Mat::Identity(4, 4);
    for (int h = 0; h < split; ++h) P = cl.Phi[t1 + h] * P;
    Mat J_tail = chunk_jacobian(cl, t1 + split, T_h - split, 1);
    for (int h = split; h < T_h; ++h) {
      Mat expected = J_tail.block((h - split) * 2, 0, 2, 4) * P;
      REQUIRE(oracles::rel_error(Mat(J_full.block(h * 2, 0, 2, 4)), expected) < 1e-10);
    }
  }
}

TEST_CASE("window bounds are enforced") {
  std::vector<Mat> A(3, Mat::Identity(2, 2)), B(3, Mat::Ones(2, 1)), K(3, Mat::Zero(1, 2));
  auto cl = assemble_closed_loop(A, B, K, systems::ActionMode::Control);
  REQUIRE_THROWS_AS(chunk_jacobian(cl, 1, 3, 1), ContractViolation);
  REQUIRE_THROWS_AS(chunk_jacobian(cl, -1, 2, 1), ContractViolation);
  REQUIRE_NOTHROW(chunk_jacobian(cl, 0, 3, 1));
}
