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

#ifndef SOBODIFF_SENSITIVITY_HPP
#define SOBODIFF_SENSITIVITY_HPP

#include <vector>

#include "sobodiff/common.hpp"
#include "sobodiff/systems.hpp"
#include "sobodiff/trajopt.hpp"

namespace sobodiff::sensitivity {

/// Closed-loop derivatives along a solved trajectory:
///   Phi_t = dx_{t+1}/dx_t = A_t + B_t K_t    (t in [0, T-1])
///   D_t   = da_t/dx_t = K_t (a = u) or I (a = x).
struct ClosedLoopJacobians {
  std::vector<Mat> Phi;
  std::vector<Mat> D;
  int n_x = 0;
  int n_a = 0;
  systems::ActionMode mode = systems::ActionMode::Control;
};

/// Assemble from stored per-step A_t, B_t and gains (buffer path).
inline ClosedLoopJacobians assemble_closed_loop(const std::vector<Mat>& A,
                                                const std::vector<Mat>& B,
                                                const std::vector<Mat>& K,
                                                systems::ActionMode mode) {
  require(A.size() == B.size() && A.size() == K.size(),
          "assemble_closed_loop: per-step matrix counts differ");
  require(!A.empty(), "assemble_closed_loop: empty trajectory");
  ClosedLoopJacobians cl;
  const int T = static_cast<int>(A.size());
  cl.n_x = static_cast<int>(A[0].rows());
  cl.mode = mode;
  cl.n_a = mode == systems::ActionMode::Control ? static_cast<int>(K[0].rows()) : cl.n_x;
  cl.Phi.resize(T);
  cl.D.resize(T);
  for (int t = 0; t < T; ++t) {
    cl.Phi[t] = A[t] + B[t] * K[t];
    cl.D[t] = mode == systems::ActionMode::Control ? K[t] : Mat::Identity(cl.n_x, cl.n_x);
  }
  return cl;
}

/// Eq.-(2) chaining from a converged solve, with analytic A_t, B_t at
/// (x_t, u_t).
inline ClosedLoopJacobians closed_loop_jacobians(const systems::SystemSpec& spec,
                                                 const trajopt::SolveResult& res) {
  require(res.converged, "closed_loop_jacobians: result must be converged");
  require(static_cast<int>(res.gains.size()) == spec.T, "closed_loop_jacobians: missing gains");
  std::vector<Mat> A(spec.T), B(spec.T);
  for (int t = 0; t < spec.T; ++t)
    systems::jacobians(spec, res.X.row(t).transpose(), res.U.row(t).transpose(), A[t], B[t]);
  return assemble_closed_loop(A, B, res.gains, spec.action_mode);
}

/// Chunk-level derivative target d(tau_0)/d(x_hist), a (T_h*n_a) x (T_o*n_x)
/// block matrix over the window starting at t1. Block (h, o):
///   o >  h : zero (future states cannot influence past actions)
///   o == h : D_{t1+h}
///   o <  h : D_{t1+h} * Phi_{t1+h-1} * ... * Phi_{t1+o}
inline Mat chunk_jacobian(const ClosedLoopJacobians& cl, int t1, int T_h, int T_o) {
  const int T = static_cast<int>(cl.Phi.size());
  require(t1 >= 0 && T_o >= 1 && T_h >= T_o, "chunk_jacobian: bad window");
  if (cl.mode == systems::ActionMode::Control)
    require(t1 + T_h - 1 <= T - 1, "chunk_jacobian: window out of range");
  else
    require(t1 + T_h - 1 <= T, "chunk_jacobian: window out of range");

  auto D_at = [&](int t) -> Mat {
    if (cl.mode == systems::ActionMode::State) return Mat::Identity(cl.n_x, cl.n_x);
    return cl.D[t];
  };

  Mat J = Mat::Zero(T_h * cl.n_a, T_o * cl.n_x);
  for (int o = 0; o < T_o; ++o) {
    Mat P = Mat::Identity(cl.n_x, cl.n_x);  // Phi_{t1+h-1} ... Phi_{t1+o}
    for (int h = o; h < T_h; ++h) {
      if (h > o) P = cl.Phi[t1 + h - 1] * P;
      J.block(h * cl.n_a, o * cl.n_x, cl.n_a, cl.n_x) = D_at(t1 + h) * P;
    }
  }
  check_finite(J, "chunk_jacobian");
  return J;
}

}  // namespace sobodiff::sensitivity

#endif  // SOBODIFF_SENSITIVITY_HPP
