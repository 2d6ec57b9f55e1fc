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
#include <cstdio>

#include "oracles.hpp"
#include "sobodiff/denoiser.hpp"

using namespace sobodiff;
using namespace sobodiff::denoiser;

namespace {

buffer::NormStats stats_for(const systems::SystemSpec& spec, int n_xi) {
  buffer::NormStats ns;
  ns.a_center = Vec::Zero(spec.n_a);
  ns.a_half = Vec::Ones(spec.n_a);
  ns.obs_center = Vec::Zero(spec.n_x + spec.n_u);
  ns.obs_half = Vec::Ones(spec.n_x + spec.n_u);
  ns.xi_center = Vec::Zero(n_xi);
  ns.xi_half = Vec::Ones(n_xi);
  return ns;
}

Denoiser tiny_denoiser(std::uint64_t seed, std::vector<int> hidden = {2},
                       Activation act = Activation::Tanh) {
  auto spec = systems::make_spec("pendulum");
  spec.T = 10;
  Rng rng(seed);
  return Denoiser(spec, /*T_h=*/3, /*T_o=*/1, /*K=*/5, stats_for(spec, 4), rng, hidden, act);
}

buffer::Chunk synthetic_chunk(const Denoiser& den, Rng& rng) {
  buffer::Chunk ch;
  const auto& s = den.system();
  ch.tau0 = rng.normal_mat(den.horizon(), s.n_a) * 0.5;
  ch.o_hist = rng.normal_mat(den.history(), s.n_x + s.n_u) * 0.5;
  ch.x_hist = ch.o_hist.leftCols(s.n_x);
  ch.a_hist = ch.tau0.topRows(den.history());
  ch.xi_vec = rng.normal_vec(4) * 0.5;
  ch.j_target = rng.normal_mat(den.horizon() * s.n_a, den.history() * s.n_x);
  return ch;
}

struct FlatParams {
  static Vec flatten(const MlpParams& p) {
    std::size_t n = p.count();
    Vec v(n);
    int at = 0;
    for (std::size_t l = 0; l < p.W.size(); ++l) {
      for (int c = 0; c < p.W[l].cols(); ++c)
        for (int r = 0; r < p.W[l].rows(); ++r) v[at++] = p.W[l](r, c);
      for (int r = 0; r < p.b[l].size(); ++r) v[at++] = p.b[l][r];
    }
    return v;
  }
  static void unflatten(const Vec& v, MlpParams& p) {
    int at = 0;
    for (std::size_t l = 0; l < p.W.size(); ++l) {
      for (int c = 0; c < p.W[l].cols(); ++c)
        for (int r = 0; r < p.W[l].rows(); ++r) p.W[l](r, c) = v[at++];
      for (int r = 0; r < p.b[l].size(); ++r) p.b[l][r] = v[at++];
    }
  }
  static Vec flatten(const MlpGrads& g) {
    MlpParams tmp;
    tmp.W = g.W;
    tmp.b = g.b;
    return flatten(tmp);
  }
};

}  // namespace

TEST_CASE("initialization") {
  SECTION("same seed gives identical parameters") {
    auto a = tiny_denoiser(5);
    auto b = tiny_denoiser(5);
    for (std::size_t l = 0; l < a.params().W.size(); ++l)
      REQUIRE((a.params().W[l] - b.params().W[l]).norm() == 0.0);
  }
  SECTION("output magnitude is O(1) on unit inputs") {
    auto spec = systems::make_spec("pendulum");
    Rng rng(1);
    Denoiser den(spec, 8, 1, 5, stats_for(spec, 4), rng, {64, 64, 64});
    Rng draw(2);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      Mat tau = draw.normal_mat(8, 1);
      Mat o = draw.normal_mat(1, 3);
      Mat y = den.forward(tau, 3, draw.normal_vec(4), o);
      worst = std::max(worst, y.cwiseAbs().maxCoeff());
    }
    REQUIRE(worst > 1e-4);
    REQUIRE(worst < 10.0);
  }
  SECTION("zero hidden layers are rejected") {
    auto spec = systems::make_spec("pendulum");
    Rng rng(1);
    REQUIRE_THROWS_AS(Denoiser(spec, 3, 1, 5, stats_for(spec, 4), rng, {}),
                      ContractViolation);
  }
}

TEST_CASE("forward evaluation") {
  auto den = tiny_denoiser(7, {16, 16});
  Rng rng(3);
  auto ch = synthetic_chunk(den, rng);
  Mat tau_k = rng.normal_mat(3, 1);

  SECTION("deterministic") {
    Mat a = den.forward(tau_k, 2, ch.xi_vec, ch.o_hist);
    Mat b = den.forward(tau_k, 2, ch.xi_vec, ch.o_hist);
    REQUIRE((a - b).norm() == 0.0);
  }
  SECTION("extended evaluation returns a bitwise-equal prediction") {
    Vec v = rng.unit_sphere(3);
    auto [pred, g] = den.forward_with_input_grad(tau_k, 2, ch.xi_vec, ch.o_hist, v);
    Mat plain = den.forward(tau_k, 2, ch.xi_vec, ch.o_hist);
    REQUIRE((pred - plain).norm() == 0.0);
    REQUIRE(g.size() == 2);
  }
}

TEST_CASE("input gradient matches finite differences") {
  for (auto act : {Activation::Tanh, Activation::Softplus}) {
    auto den = tiny_denoiser(11, {8, 8}, act);
    Rng rng(5);
    auto ch = synthetic_chunk(den, rng);
    Mat tau_k = rng.normal_mat(3, 1);
    for (int trial = 0; trial < 5; ++trial) {
      Vec v = rng.unit_sphere(3);
      auto [pred, g] = den.forward_with_input_grad(tau_k, 3, ch.xi_vec, ch.o_hist, v);
      auto scalar = [&](const Vec& x_hist_flat) {
        Mat o = ch.o_hist;
        o.row(0).head(2) = x_hist_flat.transpose();
        Mat y = den.forward(tau_k, 3, ch.xi_vec, o);
        double s = 0.0;
        for (int h = 0; h < 3; ++h) s += v[h] * y(h, 0);
        return s;
      };
      Vec g_fd = oracles::fd_gradient(scalar, ch.o_hist.row(0).head(2).transpose());
      REQUIRE(oracles::rel_error(g, g_fd) < 1e-6);
    }
  }
}

TEST_CASE("zero weights give a zero input gradient") {
  auto den = tiny_denoiser(13, {4});
  for (auto& W : den.params().W) W.setZero();
  for (auto& b : den.params().b) b.setZero();
  Rng rng(6);
  auto ch = synthetic_chunk(den, rng);
  auto [pred, g] = den.forward_with_input_grad(rng.normal_mat(3, 1), 1, ch.xi_vec, ch.o_hist,
                                               rng.unit_sphere(3));
  REQUIRE(pred.norm() == 0.0);
  REQUIRE(g.norm() == 0.0);
}

TEST_CASE("linear network input gradient equals the weight composition") {
  auto den = tiny_denoiser(17, {6, 5}, Activation::Identity);
  Rng rng(7);
  auto ch = synthetic_chunk(den, rng);
  const auto& W = den.params().W;
  Mat compose = W[2] * W[1] * W[0];  // d(out)/d(input)
  auto rows = den.x_hist_input_rows();
  for (int trial = 0; trial < 3; ++trial) {
    Vec v = rng.unit_sphere(3);
    // Constant in tau_k: evaluate at two different noised inputs.
    auto [p1, g1] = den.forward_with_input_grad(rng.normal_mat(3, 1), 1, ch.xi_vec, ch.o_hist, v);
    auto [p2, g2] = den.forward_with_input_grad(rng.normal_mat(3, 1), 4, ch.xi_vec, ch.o_hist, v);
    REQUIRE((g1 - g2).norm() < 1e-12);
    Vec expected(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) expected[i] = v.transpose() * compose.col(rows[i]);
    REQUIRE(oracles::rel_error(g1, expected) < 1e-12);
  }
}

TEST_CASE("input gradient is linear in v") {
  auto den = tiny_denoiser(19, {8});
  Rng rng(8);
  auto ch = synthetic_chunk(den, rng);
  Mat tau_k = rng.normal_mat(3, 1);
  Vec v1 = rng.normal_vec(3), v2 = rng.normal_vec(3);
  auto g = [&](const Vec& v) {
    return den.forward_with_input_grad(tau_k, 2, ch.xi_vec, ch.o_hist, v).second;
  };
  REQUIRE((g(v1 + v2) - (g(v1) + g(v2))).norm() < 1e-10);
}

TEST_CASE("parameter gradient matches finite differences of the full loss") {
  // Exercises the double-backpropagation pathway: central differences of the
  // scalar loss over every parameter of a tiny net.
  for (auto act : {Activation::Tanh, Activation::Softplus}) {
    auto den = tiny_denoiser(23, {2}, act);
    Rng rng(9);
    std::vector<buffer::Chunk> batch = {synthetic_chunk(den, rng), synthetic_chunk(den, rng)};
    const double alpha = 0.7;
    const int n_proj = 2;
    const std::uint64_t loss_seed = 4242;

    auto loss_at = [&](const Vec& theta) {
      MlpParams p = den.params();
      FlatParams::unflatten(theta, p);
      Denoiser d = den;
      d.params() = p;
      Rng r(loss_seed);
      return d.loss_and_param_grad(batch, alpha, n_proj, r).first;
    };

    for (int point = 0; point < 3; ++point) {
      Rng pr(100 + point);
      Vec theta = FlatParams::flatten(den.params());
      if (point > 0) theta += pr.normal_vec(theta.size()) * 0.3;
      MlpParams p = den.params();
      FlatParams::unflatten(theta, p);
      Denoiser d = den;
      d.params() = p;
      Rng r(loss_seed);
      auto [loss, grads] = d.loss_and_param_grad(batch, alpha, n_proj, r);
      Vec g = FlatParams::flatten(grads);
      Vec g_fd = oracles::fd_gradient(loss_at, theta, 1e-5);
      REQUIRE(oracles::rel_error(g, g_fd) < 1e-4);
      REQUIRE(std::isfinite(loss));
    }
  }
}

TEST_CASE("alpha = 0 reduces to the plain diffusion gradient") {
  auto den = tiny_denoiser(29, {4});
  Rng rng(10);
  std::vector<buffer::Chunk> batch = {synthetic_chunk(den, rng)};
  Rng r1(77), r2(77);
  auto [l0, g0] = den.loss_and_param_grad(batch, 0.0, 1, r1);
  // Reference: value-term-only finite differences.
  auto loss_at = [&](const Vec& theta) {
    MlpParams p = den.params();
    FlatParams::unflatten(theta, p);
    Denoiser d = den;
    d.params() = p;
    Rng r(77);
    return d.loss_and_param_grad(batch, 0.0, 1, r).first;
  };
  Vec g_fd = oracles::fd_gradient(loss_at, FlatParams::flatten(den.params()), 1e-5);
  REQUIRE(oracles::rel_error(FlatParams::flatten(g0), g_fd) < 1e-5);
  (void)l0;
  (void)r2;
}

TEST_CASE("sobolev term is invariant to the sign of v") {
  // With n_proj draws consumed identically, flipping v leaves the loss value
  // unchanged (squared-norm symmetry); verified through the public API by
  // direct construction.
  auto den = tiny_denoiser(31, {4});
  Rng rng(12);
  auto ch = synthetic_chunk(den, rng);
  Mat tau_k = rng.normal_mat(3, 1);
  Vec v = rng.unit_sphere(3);
  Mat Jn = den.norm().norm_jacobian(ch.j_target, 1, 2);
  auto term = [&](const Vec& vv) {
    auto [pred, g] = den.forward_with_input_grad(tau_k, 2, ch.xi_vec, ch.o_hist, vv);
    Vec target = Jn.transpose() * vv;
    return (g - target).squaredNorm();
  };
  REQUIRE(std::abs(term(v) - term(-v)) < 1e-14);
}

TEST_CASE("checkpoint save/load round trip is exact") {
  auto den = tiny_denoiser(37, {8, 8});
  std::string path = "denoiser_ckpt_test.json";
  den.save(path);
  auto loaded = Denoiser::load(path);
  REQUIRE(loaded.horizon() == den.horizon());
  REQUIRE(loaded.history() == den.history());
  REQUIRE(loaded.schedule().K == den.schedule().K);
  for (std::size_t l = 0; l < den.params().W.size(); ++l) {
    REQUIRE((loaded.params().W[l] - den.params().W[l]).norm() == 0.0);
    REQUIRE((loaded.params().b[l] - den.params().b[l]).norm() == 0.0);
  }
  Rng rng(13);
  auto ch = synthetic_chunk(den, rng);
  Mat tau_k = rng.normal_mat(3, 1);
  Mat a = den.forward(tau_k, 2, ch.xi_vec, ch.o_hist);
  Mat b = loaded.forward(tau_k, 2, ch.xi_vec, ch.o_hist);
  REQUIRE((a - b).norm() == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("direct policy gradient matches finite differences") {
  auto spec = systems::make_spec("pendulum");
  Rng rng(41);
  DirectPolicy pol(spec, stats_for(spec, 4), rng, {3});
  std::vector<DirectSample> batch;
  for (int i = 0; i < 2; ++i) {
    DirectSample s;
    s.x = rng.normal_vec(2) * 0.5;
    s.xi_vec = rng.normal_vec(4) * 0.5;
    s.a_target = rng.normal_vec(1);
    s.k_target = rng.normal_mat(1, 2);
    batch.push_back(s);
  }
  auto loss_at = [&](const Vec& theta) {
    MlpParams p = pol.params();
    FlatParams::unflatten(theta, p);
    DirectPolicy q = pol;
    q.params() = p;
    Rng r(55);
    return q.loss_and_param_grad(batch, 1.0, 2, r).first;
  };
  Rng r(55);
  auto [loss, grads] = pol.loss_and_param_grad(batch, 1.0, 2, r);
  Vec g = FlatParams::flatten(grads);
  Vec g_fd = oracles::fd_gradient(loss_at, FlatParams::flatten(pol.params()), 1e-5);
  REQUIRE(oracles::rel_error(g, g_fd) < 1e-4);
  (void)loss;
}
