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

#ifndef SOBODIFF_LOSSES_HPP
#define SOBODIFF_LOSSES_HPP

#include <cmath>
#include <string>
#include <vector>

#include "sobodiff/buffer.hpp"
#include "sobodiff/common.hpp"
#include "sobodiff/ddpm.hpp"
#include "sobodiff/denoiser.hpp"

namespace sobodiff::losses {

struct TrainConfig {
  double alpha_sob = 1.0;
  int n_proj = 1;
  int n_pl = 1000;       // epochs
  int batch_size = 64;
  double lr = 1e-3;
  int K_train = 5;
  int T_h = 32;
  int T_o = 1;
  int T_a = 31;
  std::string alpha_sob_schedule = "const";

  void validate() const {
    require(alpha_sob >= 0.0, "TrainConfig: alpha_sob must be >= 0");
    require(n_proj >= 1, "TrainConfig: n_proj must be >= 1");
    require(T_o >= 1 && T_h >= T_o, "TrainConfig: need 1 <= T_o <= T_h");
    require(T_a >= 1 && T_a <= T_h - T_o, "TrainConfig: need 1 <= T_a <= T_h - T_o");
    require(batch_size >= 1 && n_pl >= 0 && lr > 0.0 && K_train >= 1, "TrainConfig: bad fields");
  }
};

namespace detail {

template <class DenoiserT>
Mat flatten_rowmajor(const DenoiserT& den, const Mat& m) {
  (void)den;
  Vec v(m.rows() * m.cols());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) v[r * m.cols() + c] = m(r, c);
  return v;
}

}  // namespace detail

/// Plain per-step diffusion loss on one chunk: draw k ~ U(1, K_train) and
/// eps ~ N(0, I), noise, inpaint the history rows, and score
/// ||tau0 - tau_theta(tau_k, k, xi, o_hist)||^2 in normalized units.
/// Draw order (k, eps) matches sobolev_diff_loss so shared seeds give
/// identical noising.
template <class DenoiserT>
double diff_loss(const DenoiserT& den, const buffer::Chunk& chunk, Rng& rng, int K_train = 0) {
  const auto& ns = den.norm();
  const auto& sched = den.schedule();
  if (K_train <= 0) K_train = sched.K;
  Mat tau0_n = ns.norm_actions(chunk.tau0);
  int k = rng.uniform_int(1, K_train);
  Mat eps = rng.normal_mat(den.horizon(), den.action_dim());
  Mat tk = ddpm::q_sample(tau0_n, k, eps, sched);
  tk.topRows(den.history()) = tau0_n.topRows(den.history());
  Mat pred = den.predict_tau0_normalized(tk, k, ns.norm_xi(chunk.xi_vec),
                                         ns.norm_obs(chunk.o_hist));
  return (tau0_n - pred).squaredNorm();
}

/// Per-step Sobolev + diffusion loss on one chunk: the diffusion term plus
/// the projected derivative mismatch
///   (alpha/n_proj) sum_i || v_i^T J_target - d(v_i^T tau0_hat)/d(x_hist) ||^2
/// with v_i uniform on the unit sphere of the flattened output space.
/// History rows participate with their causal J_target blocks.
template <class DenoiserT>
double sobolev_diff_loss(const DenoiserT& den, const buffer::Chunk& chunk, double alpha_sob,
                         int n_proj, Rng& rng, int K_train = 0) {
  require(chunk.j_target.size() > 0, "sobolev_diff_loss: chunk missing J_target");
  require(n_proj >= 1, "sobolev_diff_loss: n_proj must be >= 1");
  const auto& ns = den.norm();
  const auto& sched = den.schedule();
  if (K_train <= 0) K_train = sched.K;
  Mat tau0_n = ns.norm_actions(chunk.tau0);
  int k = rng.uniform_int(1, K_train);
  Mat eps = rng.normal_mat(den.horizon(), den.action_dim());
  Mat tk = ddpm::q_sample(tau0_n, k, eps, sched);
  tk.topRows(den.history()) = tau0_n.topRows(den.history());
  Vec xi_n = ns.norm_xi(chunk.xi_vec);
  Mat o_n = ns.norm_obs(chunk.o_hist);
  Mat Jn = ns.norm_jacobian(chunk.j_target, den.action_dim(), den.system().n_x);

  double loss = 0.0;
  Mat pred;
  for (int i = 0; i < n_proj; ++i) {
    Vec v = rng.unit_sphere(den.output_dim());
    auto [p, g] = den.forward_with_input_grad(tk, k, xi_n, o_n, v);
    pred = p;
    Vec target = Jn.transpose() * v;
    loss += alpha_sob / n_proj * (g - target).squaredNorm();
  }
  loss += (tau0_n - pred).squaredNorm();
  return loss;
}

/// Direct-policy Sobolev regression loss on one state-action pair:
/// ||pi(x, xi) - a_target||^2 plus the projected gradient mismatch against
/// K_target. alpha_sob = 0 is the plain MLP baseline.
inline double sobolev_mlp_loss(const denoiser::DirectPolicy& policy, const Vec& x,
                               const Vec& xi_vec, const Vec& a_target, const Mat& k_target,
                               double alpha_sob, int n_proj, Rng& rng) {
  denoiser::DirectSample s{x, xi_vec, a_target, k_target};
  // Single-sample loss re-uses the batched path; the gradient is discarded.
  auto [loss, grads] = policy.loss_and_param_grad({s}, alpha_sob, n_proj, rng);
  (void)grads;
  return loss;
}

struct TrainReport {
  std::vector<double> epoch_loss;
  bool aborted = false;

  double final_loss() const { return epoch_loss.empty() ? 0.0 : epoch_loss.back(); }
};

/// Algorithm-1 policy-learning block for the diffusion policy: n_pl epochs of
/// ceil(|D| (T - T_h) / T_h) chunk draws, Adam steps per batch. Deterministic
/// under the seed. A non-finite loss aborts with the last epoch's parameters
/// restored.
inline TrainReport train(denoiser::Denoiser& den, const buffer::Buffer& buf,
                         const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  require(buf.size() > 0, "train: empty buffer");
  TrainReport report;
  denoiser::Adam adam(cfg.lr);
  denoiser::AlphaWeight aw{denoiser::alpha_mode_from_string(cfg.alpha_sob_schedule)};
  const int E = buf.epoch_chunks(cfg.T_h);
  denoiser::MlpParams snapshot = den.params();
  for (int epoch = 0; epoch < cfg.n_pl; ++epoch) {
    double sum = 0.0;
    int count = 0;
    int remaining = E;
    try {
      while (remaining > 0) {
        int n = std::min(cfg.batch_size, remaining);
        remaining -= n;
        std::vector<buffer::Chunk> batch;
        batch.reserve(n);
        for (int i = 0; i < n; ++i) batch.push_back(buf.sample_chunk(rng, cfg.T_h, cfg.T_o));
        auto [loss, grads] =
            den.loss_and_param_grad(batch, cfg.alpha_sob, cfg.n_proj, rng, cfg.K_train, aw);
        adam.step(den.params(), grads);
        sum += loss * n;
        count += n;
      }
    } catch (const NumericFailure&) {
      den.params() = snapshot;
      report.aborted = true;
      return report;
    }
    snapshot = den.params();
    report.epoch_loss.push_back(sum / count);
  }
  return report;
}

/// Direct-policy training: one epoch is |D| * T state-action pairs.
inline TrainReport train(denoiser::DirectPolicy& policy, const buffer::Buffer& buf,
                         const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  require(buf.size() > 0, "train: empty buffer");
  const auto& spec = buf.spec();
  TrainReport report;
  denoiser::Adam adam(cfg.lr);
  const int E = buf.epoch_pairs();
  auto draw_sample = [&](Rng& r) {
    const auto& rec = buf.record(r.uniform_index(buf.size()));
    int t = r.uniform_int(0, spec.T - 1);
    denoiser::DirectSample s;
    s.x = rec.X.row(t).transpose();
    s.xi_vec = systems::xi_vector(rec.xi);
    if (spec.action_mode == systems::ActionMode::Control) {
      s.a_target = rec.U.row(t).transpose();
      s.k_target = rec.K[t];
    } else {
      s.a_target = rec.X.row(t + 1).transpose();
      s.k_target = rec.A[t] + rec.B[t] * rec.K[t];
    }
    return s;
  };
  denoiser::MlpParams snapshot = policy.params();
  for (int epoch = 0; epoch < cfg.n_pl; ++epoch) {
    double sum = 0.0;
    int count = 0;
    int remaining = E;
    try {
      while (remaining > 0) {
        int n = std::min(cfg.batch_size, remaining);
        remaining -= n;
        std::vector<denoiser::DirectSample> batch;
        batch.reserve(n);
        for (int i = 0; i < n; ++i) batch.push_back(draw_sample(rng));
        auto [loss, grads] = policy.loss_and_param_grad(batch, cfg.alpha_sob, cfg.n_proj, rng);
        adam.step(policy.params(), grads);
        sum += loss * n;
        count += n;
      }
    } catch (const NumericFailure&) {
      policy.params() = snapshot;
      report.aborted = true;
      return report;
    }
    snapshot = policy.params();
    report.epoch_loss.push_back(sum / count);
  }
  return report;
}

/// Full-process variant: value and derivative mismatch of the *entire*
/// K-step reverse process against the chunk. Evaluated only as a logged
/// metric (it is not a training mode); the chained derivative is propagated
/// through every denoising step by forward tangents, with the inpainted rows
/// carrying their J_target history blocks.
template <class DenoiserT>
double full_process_metric(const DenoiserT& den, const buffer::Chunk& chunk, double alpha_sob,
                           Rng& rng) {
  const auto& ns = den.norm();
  const auto& sched = den.schedule();
  const int T_h = den.horizon(), T_o = den.history(), n_a = den.action_dim();
  const int n_x = den.system().n_x;
  const int d_out = T_h * n_a;
  const int d_hist = T_o * n_x;

  Mat tau0_n = ns.norm_actions(chunk.tau0);
  Mat a_hist_n = tau0_n.topRows(T_o);
  Vec xi_n = ns.norm_xi(chunk.xi_vec);
  Mat o_n = ns.norm_obs(chunk.o_hist);
  Mat Jn = ns.norm_jacobian(chunk.j_target, n_a, n_x);

  auto x_rows = den.x_hist_input_rows();
  auto flatten = [&](const Mat& m) {
    Vec v(d_out);
    for (int h = 0; h < T_h; ++h)
      for (int j = 0; j < n_a; ++j) v[h * n_a + j] = m(h, j);
    return v;
  };
  auto unflatten = [&](const Vec& v) {
    Mat m(T_h, n_a);
    for (int h = 0; h < T_h; ++h)
      for (int j = 0; j < n_a; ++j) m(h, j) = v[h * n_a + j];
    return m;
  };

  // State: flattened tau and its Jacobian wrt x_hist (normalized units).
  Vec tau = flatten(rng.normal_mat(T_h, n_a));
  Mat dtau = Mat::Zero(d_out, d_hist);
  Mat hist_jac = Jn.topRows(T_o * n_a);  // d(a_hist)/d(x_hist)

  for (int k = sched.K; k >= 1; --k) {
    Mat tau_m = unflatten(tau);
    tau_m.topRows(T_o) = a_hist_n;
    tau = flatten(tau_m);
    dtau.topRows(T_o * n_a) = hist_jac;

    // Denoiser JVP per x_hist coordinate: tangent enters through both the
    // tau_k rows and the o_hist state rows.
    denoiser::MlpCache cache;
    Vec in = den.pack_input(unflatten(tau), k, xi_n, o_n);
    Mat y = denoiser::mlp_forward(den.arch(), den.params(), in, cache);
    Mat dIn = Mat::Zero(den.input_dim(), d_hist);
    dIn.topRows(d_out) = dtau;
    for (int c = 0; c < d_hist; ++c) dIn(x_rows[c], c) = 1.0;
    // Broadcast the single-sample cache across tangent columns.
    denoiser::MlpCache wide = cache;
    for (auto& z : wide.Z) z = z.col(0).replicate(1, d_hist);
    for (auto& d1 : wide.D1) d1 = d1.col(0).replicate(1, d_hist);
    Mat dPred = denoiser::mlp_jvp(den.arch(), den.params(), wide, dIn);
    Vec pred = y.col(0);

    double c0 = sched.c_tau0(k), ck = sched.c_tauk(k);
    Vec mu = c0 * pred + ck * tau;
    Mat dmu = c0 * dPred + ck * dtau;
    if (k > 1) {
      double sigma = std::sqrt(sched.beta_tilde[k]);
      tau = mu + sigma * flatten(rng.normal_mat(T_h, n_a));
    } else {
      tau = mu;
    }
    dtau = dmu;
  }
  Mat final_m = unflatten(tau);
  final_m.topRows(T_o) = a_hist_n;
  dtau.topRows(T_o * n_a) = hist_jac;
  double value = (flatten(final_m) - flatten(tau0_n)).squaredNorm();
  double deriv = (dtau - Jn).squaredNorm();
  return value + alpha_sob * deriv;
}

}  // namespace sobodiff::losses

#endif  // SOBODIFF_LOSSES_HPP
