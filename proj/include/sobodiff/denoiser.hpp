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

#ifndef SOBODIFF_DENOISER_HPP
#define SOBODIFF_DENOISER_HPP

#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sobodiff/buffer.hpp"
#include "sobodiff/common.hpp"
#include "sobodiff/ddpm.hpp"
#include "sobodiff/systems.hpp"

namespace sobodiff::denoiser {

// ---------------------------------------------------------------------------
// Fully connected network with batched evaluation (columns = samples) and the
// derivative machinery the Sobolev loss needs: exact input gradients, forward
// tangents, and the forward-over-reverse sweep that differentiates the input
// gradient with respect to the parameters.
// Activations must be C^2 so the input gradient is itself differentiable.
// ---------------------------------------------------------------------------

enum class Activation { Tanh, Softplus, Identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Softplus: return "softplus";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "softplus") return Activation::Softplus;
  if (s == "identity") return Activation::Identity;
  throw ContractViolation("unknown activation '" + s + "'");
}

struct MlpSpec {
  int in = 0;
  int out = 0;
  std::vector<int> hidden;
  Activation act = Activation::Tanh;

  int layers() const { return static_cast<int>(hidden.size()) + 1; }

  std::vector<int> dims() const {
    std::vector<int> d;
    d.push_back(in);
    for (int h : hidden) d.push_back(h);
    d.push_back(out);
    return d;
  }

  void validate() const {
    require(in >= 1 && out >= 1, "MlpSpec: in/out must be positive");
    require(!hidden.empty(), "MlpSpec: at least one hidden layer required");
    for (int h : hidden) require(h >= 1, "MlpSpec: hidden widths must be positive");
  }
};

struct MlpParams {
  std::vector<Mat> W;
  std::vector<Vec> b;

  std::size_t count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < W.size(); ++l) n += W[l].size() + b[l].size();
    return n;
  }
};

/// Fan-in scaled uniform initialization, deterministic under the seed.
inline MlpParams init_mlp(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  auto d = spec.dims();
  MlpParams p;
  for (std::size_t l = 0; l + 1 < d.size(); ++l) {
    double bound = 1.0 / std::sqrt(static_cast<double>(d[l]));
    Mat W(d[l + 1], d[l]);
    for (int c = 0; c < W.cols(); ++c)
      for (int r = 0; r < W.rows(); ++r) W(r, c) = rng.uniform(-bound, bound);
    Vec b(d[l + 1]);
    for (int r = 0; r < b.size(); ++r) b[r] = rng.uniform(-bound, bound);
    p.W.push_back(std::move(W));
    p.b.push_back(std::move(b));
  }
  return p;
}

struct MlpCache {
  std::vector<Mat> Z;   // Z[0] = input, Z[l+1] = layer outputs, Z[L] = network output
  std::vector<Mat> D1;  // act'(S[l]) for hidden layers l in [0, L-2]
};

namespace detail {

inline Mat act_apply(Activation a, const Mat& s) {
  if (a == Activation::Tanh) return s.array().tanh().matrix();
  if (a == Activation::Identity) return s;
  return (1.0 + s.array().exp()).log().matrix();
}

// act'(s), computable from s and act(s).
inline Mat act_d1(Activation a, const Mat& s, const Mat& z) {
  if (a == Activation::Tanh) return (1.0 - z.array().square()).matrix();
  if (a == Activation::Identity) return Mat::Ones(s.rows(), s.cols());
  return (1.0 / (1.0 + (-s.array()).exp())).matrix();
}

// act''(s) from act(s) and act'(s).
inline Mat act_d2(Activation a, const Mat& z, const Mat& d1) {
  if (a == Activation::Tanh) return (-2.0 * z.array() * d1.array()).matrix();
  if (a == Activation::Identity) return Mat::Zero(z.rows(), z.cols());
  return (d1.array() * (1.0 - d1.array())).matrix();
}

}  // namespace detail

/// Batched forward pass; each column of X is one sample.
inline Mat mlp_forward(const MlpSpec& spec, const MlpParams& p, const Mat& X, MlpCache& cache) {
  require(X.rows() == spec.in, "mlp_forward: input dimension mismatch");
  const int L = spec.layers();
  cache.Z.assign(L + 1, Mat());
  cache.D1.assign(std::max(0, L - 1), Mat());
  cache.Z[0] = X;
  for (int l = 0; l < L; ++l) {
    Mat S = (p.W[l] * cache.Z[l]).colwise() + p.b[l];
    if (l < L - 1) {
      cache.Z[l + 1] = detail::act_apply(spec.act, S);
      cache.D1[l] = detail::act_d1(spec.act, S, cache.Z[l + 1]);
    } else {
      cache.Z[l + 1] = S;
    }
  }
  return cache.Z[L];
}

/// Per-column input gradients: column i of the result is
/// d(V_i^T y_i)/d(input_i), computed by one reverse sweep.
inline Mat mlp_input_grad(const MlpSpec& spec, const MlpParams& p, const MlpCache& cache,
                          const Mat& V) {
  const int L = spec.layers();
  Mat a = V;  // gradient wrt S[L-1]
  for (int l = L - 1; l >= 1; --l)
    a = cache.D1[l - 1].cwiseProduct(p.W[l].transpose() * a);
  return p.W[0].transpose() * a;
}

/// Forward-mode tangent: directional derivative of every output column along
/// the matching column of dX.
inline Mat mlp_jvp(const MlpSpec& spec, const MlpParams& p, const MlpCache& cache, const Mat& dX) {
  const int L = spec.layers();
  Mat dZ = dX;
  for (int l = 0; l < L; ++l) {
    Mat dS = p.W[l] * dZ;
    dZ = l < L - 1 ? cache.D1[l].cwiseProduct(dS) : dS;
  }
  return dZ;
}

struct MlpGrads {
  std::vector<Mat> W;
  std::vector<Vec> b;

  void init_zero(const MlpParams& p) {
    W.clear();
    b.clear();
    for (std::size_t l = 0; l < p.W.size(); ++l) {
      W.push_back(Mat::Zero(p.W[l].rows(), p.W[l].cols()));
      b.push_back(Vec::Zero(p.b[l].size()));
    }
  }

  bool all_finite() const {
    for (const auto& m : W)
      if (!m.allFinite()) return false;
    for (const auto& v : b)
      if (!v.allFinite()) return false;
    return true;
  }
};

/// Standard reverse accumulation of d(loss)/d(params) given the output
/// cotangent dY (summed over batch columns).
inline void mlp_backprop_params(const MlpSpec& spec, const MlpParams& p, const MlpCache& cache,
                                const Mat& dY, MlpGrads& g) {
  const int L = spec.layers();
  Mat a = dY;
  for (int l = L - 1; l >= 0; --l) {
    g.W[l] += a * cache.Z[l].transpose();
    g.b[l] += a.rowwise().sum();
    if (l > 0) a = cache.D1[l - 1].cwiseProduct(p.W[l].transpose() * a);
  }
}

/// Accumulates the parameter gradient of sum_i w_i^T g_i where
/// g_i = d(v_i^T y_i)/d(input_i): the double-backpropagation pathway of the
/// Sobolev term. Differentiates through both the forward pass and the reverse
/// sweep that produced g, via a forward tangent in direction w followed by a
/// reverse pass over the coupled primal/tangent chains.
inline void mlp_sobolev_backprop(const MlpSpec& spec, const MlpParams& p, const MlpCache& cache,
                                 const Mat& V, const Mat& Wt, MlpGrads& g) {
  const int L = spec.layers();
  // Tangent forward chain along Wt.
  std::vector<Mat> Zt(L + 1), St(L);
  Zt[0] = Wt;
  for (int l = 0; l < L; ++l) {
    St[l] = p.W[l] * Zt[l];
    Zt[l + 1] = l < L - 1 ? cache.D1[l].cwiseProduct(St[l]) : St[l];
  }

  // Reverse over the tangent chain, collecting the act'' coupling seeds on
  // the primal pre-activations.
  std::vector<Mat> sigma(L);
  Mat a_zt = V;  // adjoint of Zt[l+1], starts at the output
  for (int l = L - 1; l >= 0; --l) {
    Mat a_st;
    if (l < L - 1) {
      a_st = cache.D1[l].cwiseProduct(a_zt);
      Mat d2 = detail::act_d2(spec.act, cache.Z[l + 1], cache.D1[l]);
      sigma[l] = d2.cwiseProduct(St[l]).cwiseProduct(a_zt);
    } else {
      a_st = a_zt;
      sigma[l] = Mat();  // linear output layer: no coupling
    }
    g.W[l] += a_st * Zt[l].transpose();
    if (l > 0) a_zt = p.W[l].transpose() * a_st;
  }

  // Reverse over the primal chain seeded by the coupling terms.
  Mat a_s = Mat::Zero(p.b[L - 1].size(), V.cols());
  for (int l = L - 1; l >= 0; --l) {
    if (sigma[l].size() > 0) a_s += sigma[l];
    g.W[l] += a_s * cache.Z[l].transpose();
    g.b[l] += a_s.rowwise().sum();
    if (l > 0) a_s = cache.D1[l - 1].cwiseProduct(p.W[l].transpose() * a_s);
  }
}

/// Adaptive-moment gradient descent.
class Adam {
 public:
  Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(MlpParams& p, const MlpGrads& g) {
    if (m_.W.empty()) {
      m_.init_zero(p);
      v_.init_zero(p);
    }
    ++t_;
    double c1 = 1.0 - std::pow(beta1_, t_);
    double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t l = 0; l < p.W.size(); ++l) {
      m_.W[l] = beta1_ * m_.W[l] + (1.0 - beta1_) * g.W[l];
      v_.W[l] = beta2_ * v_.W[l] + (1.0 - beta2_) * g.W[l].cwiseProduct(g.W[l]);
      p.W[l] -= lr_ * (m_.W[l] / c1).cwiseQuotient(((v_.W[l] / c2).cwiseSqrt().array() + eps_).matrix());
      m_.b[l] = beta1_ * m_.b[l] + (1.0 - beta1_) * g.b[l];
      v_.b[l] = beta2_ * v_.b[l] + (1.0 - beta2_) * g.b[l].cwiseProduct(g.b[l]);
      p.b[l] -= lr_ * (m_.b[l] / c1).cwiseQuotient(((v_.b[l] / c2).cwiseSqrt().array() + eps_).matrix());
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  MlpGrads m_, v_;
};

// ---------------------------------------------------------------------------
// Conditional denoiser tau_theta(tau_k, k, xi, o_hist).
// Input layout: [flattened tau_k | sinusoidal k-embedding | xi | flattened
// o_hist], everything in normalized units. Flattening is time-major
// (row h, action j) -> h*n_a + j.
// ---------------------------------------------------------------------------

inline constexpr int kEmbedDim = 16;

inline Vec k_embedding(int k, int dim = kEmbedDim) {
  Vec e(dim);
  for (int i = 0; i < dim / 2; ++i) {
    double w = std::pow(10000.0, -2.0 * i / dim);
    e[2 * i] = std::sin(k * w);
    e[2 * i + 1] = std::cos(k * w);
  }
  return e;
}

struct AlphaWeight {
  // k-dependent Sobolev weight experiment: constant by default.
  enum class Mode { Constant, Increasing, Decreasing } mode = Mode::Constant;

  double operator()(double alpha, int k, int K) const {
    switch (mode) {
      case Mode::Increasing: return alpha * static_cast<double>(k) / K;
      case Mode::Decreasing: return alpha * static_cast<double>(K - k) / K;
      default: return alpha;
    }
  }
};

inline AlphaWeight::Mode alpha_mode_from_string(const std::string& s) {
  if (s == "const") return AlphaWeight::Mode::Constant;
  if (s == "increasing") return AlphaWeight::Mode::Increasing;
  if (s == "decreasing") return AlphaWeight::Mode::Decreasing;
  throw ContractViolation("unknown alpha_sob_schedule '" + s + "'");
}

class Denoiser {
 public:
  Denoiser() = default;

  Denoiser(const systems::SystemSpec& sys, int T_h, int T_o, int K,
           const buffer::NormStats& norm, Rng& rng, std::vector<int> hidden = {64, 64, 64},
           Activation act = Activation::Tanh)
      : sys_(sys), T_h_(T_h), T_o_(T_o), norm_(norm), sched_(ddpm::make_schedule(K)) {
    require(T_o >= 1 && T_o <= T_h, "Denoiser: need 1 <= T_o <= T_h");
    n_xi_ = static_cast<int>(norm.xi_center.size());
    arch_.in = input_dim();
    arch_.out = T_h_ * sys_.n_a;
    arch_.hidden = std::move(hidden);
    arch_.act = act;
    arch_.validate();
    params_ = init_mlp(arch_, rng);
  }

  const systems::SystemSpec& system() const { return sys_; }
  const buffer::NormStats& norm() const { return norm_; }
  const ddpm::NoiseSchedule& schedule() const { return sched_; }
  int horizon() const { return T_h_; }
  int history() const { return T_o_; }
  int action_dim() const { return sys_.n_a; }
  int output_dim() const { return arch_.out; }
  int input_dim() const {
    return T_h_ * sys_.n_a + kEmbedDim + n_xi_ + T_o_ * (sys_.n_x + sys_.n_u);
  }
  const MlpSpec& arch() const { return arch_; }
  MlpParams& params() { return params_; }
  const MlpParams& params() const { return params_; }

  int obs_offset() const { return T_h_ * sys_.n_a + kEmbedDim + n_xi_; }

  /// Input rows carrying x_hist (the state part of each o_hist row).
  std::vector<int> x_hist_input_rows() const {
    std::vector<int> rows;
    rows.reserve(T_o_ * sys_.n_x);
    for (int o = 0; o < T_o_; ++o)
      for (int i = 0; i < sys_.n_x; ++i)
        rows.push_back(obs_offset() + o * (sys_.n_x + sys_.n_u) + i);
    return rows;
  }

  Vec pack_input(const Mat& tau_k_n, int k, const Vec& xi_n, const Mat& o_hist_n) const {
    require(tau_k_n.rows() == T_h_ && tau_k_n.cols() == sys_.n_a, "pack_input: tau_k shape");
    require(o_hist_n.rows() == T_o_ && o_hist_n.cols() == sys_.n_x + sys_.n_u,
            "pack_input: o_hist shape");
    require(xi_n.size() == n_xi_, "pack_input: xi size");
    Vec in(input_dim());
    int at = 0;
    for (int h = 0; h < T_h_; ++h)
      for (int j = 0; j < sys_.n_a; ++j) in[at++] = tau_k_n(h, j);
    in.segment(at, kEmbedDim) = k_embedding(k);
    at += kEmbedDim;
    in.segment(at, n_xi_) = xi_n;
    at += n_xi_;
    for (int o = 0; o < T_o_; ++o)
      for (int j = 0; j < sys_.n_x + sys_.n_u; ++j) in[at++] = o_hist_n(o, j);
    return in;
  }

  Mat unflatten_output(const Vec& y) const {
    Mat m(T_h_, sys_.n_a);
    for (int h = 0; h < T_h_; ++h)
      for (int j = 0; j < sys_.n_a; ++j) m(h, j) = y[h * sys_.n_a + j];
    return m;
  }

  /// tau_0 prediction from a noised chunk; all arguments normalized,
  /// k in [1, K].
  Mat forward(const Mat& tau_k_n, int k, const Vec& xi_n, const Mat& o_hist_n) const {
    require(k >= 1 && k <= sched_.K, "forward: k out of range");
    MlpCache cache;
    Vec in = pack_input(tau_k_n, k, xi_n, o_hist_n);
    Mat y = mlp_forward(arch_, params_, in, cache);
    if (!y.allFinite()) throw NumericFailure("denoiser forward produced non-finite output");
    return unflatten_output(y.col(0));
  }

  Mat predict_tau0_normalized(const Mat& tau_k_n, int k, const Vec& xi_n,
                              const Mat& o_hist_n) const {
    return forward(tau_k_n, k, xi_n, o_hist_n);
  }

  /// Extended evaluation: the prediction plus the exact gradient of
  /// v^T tau0_hat with respect to x_hist (one reverse sweep, not finite
  /// differences). v lives in the flattened output space.
  std::pair<Mat, Vec> forward_with_input_grad(const Mat& tau_k_n, int k, const Vec& xi_n,
                                              const Mat& o_hist_n, const Vec& v) const {
    require(v.size() == arch_.out, "forward_with_input_grad: v dimension mismatch");
    MlpCache cache;
    Vec in = pack_input(tau_k_n, k, xi_n, o_hist_n);
    Mat y = mlp_forward(arch_, params_, in, cache);
    Mat G = mlp_input_grad(arch_, params_, cache, v);
    auto rows = x_hist_input_rows();
    Vec g(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) g[i] = G(rows[i], 0);
    if (!y.allFinite() || !g.allFinite())
      throw NumericFailure("forward_with_input_grad produced non-finite values");
    return {unflatten_output(y.col(0)), g};
  }

  /// Exact gradient of the per-step Sobolev+diffusion empirical loss over a
  /// batch of chunks, including the second-order pathway through the input
  /// gradient. Returns (mean loss, parameter gradient). Draw order per chunk:
  /// k, then eps, then the projection vectors.
  std::pair<double, MlpGrads> loss_and_param_grad(const std::vector<buffer::Chunk>& batch,
                                                  double alpha_sob, int n_proj, Rng& rng,
                                                  int K_train = 0,
                                                  AlphaWeight aw = {}) const {
    require(!batch.empty(), "loss_and_param_grad: empty batch");
    require(n_proj >= 1, "loss_and_param_grad: n_proj must be >= 1");
    if (K_train <= 0) K_train = sched_.K;
    require(K_train <= sched_.K, "loss_and_param_grad: K_train exceeds schedule");
    const int B = static_cast<int>(batch.size());
    const int n_x = sys_.n_x, n_a = sys_.n_a;

    Mat X(input_dim(), B);
    Mat T0(arch_.out, B);
    std::vector<Mat> Jn(B);
    std::vector<double> wk(B);
    for (int i = 0; i < B; ++i) {
      const auto& ch = batch[i];
      require(ch.j_target.size() > 0, "loss_and_param_grad: chunk missing J_target");
      Mat tau0_n = norm_.norm_actions(ch.tau0);
      int k = rng.uniform_int(1, K_train);
      Mat eps = rng.normal_mat(T_h_, n_a);
      Mat tk = ddpm::q_sample(tau0_n, k, eps, sched_);
      tk.topRows(T_o_) = tau0_n.topRows(T_o_);  // inpaint history rows post-noising
      X.col(i) = pack_input(tk, k, norm_.norm_xi(ch.xi_vec), norm_.norm_obs(ch.o_hist));
      for (int h = 0; h < T_h_; ++h)
        for (int j = 0; j < n_a; ++j) T0(h * n_a + j, i) = tau0_n(h, j);
      Jn[i] = norm_.norm_jacobian(ch.j_target, n_a, n_x);
      wk[i] = aw(alpha_sob, k, sched_.K);
    }

    MlpCache cache;
    Mat Y = mlp_forward(arch_, params_, X, cache);
    Mat R0 = Y - T0;
    double loss = R0.squaredNorm() / B;

    MlpGrads grads;
    grads.init_zero(params_);
    mlp_backprop_params(arch_, params_, cache, Mat(2.0 * R0 / B), grads);

    if (alpha_sob > 0.0) {
      auto rows = x_hist_input_rows();
      const int n_sel = static_cast<int>(rows.size());
      for (int j = 0; j < n_proj; ++j) {
        Mat V(arch_.out, B), TGT(n_sel, B);
        for (int i = 0; i < B; ++i) {
          Vec v = rng.unit_sphere(arch_.out);
          V.col(i) = v;
          TGT.col(i) = Jn[i].transpose() * v;
        }
        Mat G = mlp_input_grad(arch_, params_, cache, V);
        Mat Gsel(n_sel, B);
        for (int r = 0; r < n_sel; ++r) Gsel.row(r) = G.row(rows[r]);
        Mat R1 = Gsel - TGT;
        Mat Wt = Mat::Zero(input_dim(), B);
        for (int i = 0; i < B; ++i) {
          double c = wk[i] / (n_proj * B);
          loss += c * R1.col(i).squaredNorm();
          for (int r = 0; r < n_sel; ++r) Wt(rows[r], i) = 2.0 * c * R1(r, i);
        }
        mlp_sobolev_backprop(arch_, params_, cache, V, Wt, grads);
      }
    }

    if (!std::isfinite(loss) || !grads.all_finite())
      throw NumericFailure("loss_and_param_grad: non-finite loss or gradient (batch of " +
                           std::to_string(B) + " chunks)");
    return {loss, std::move(grads)};
  }

  void save(const std::string& path) const { save_json(path, "denoiser"); }

  static Denoiser load(const std::string& path) {
    nlohmann::json j = load_json(path, "denoiser");
    Denoiser d;
    d.restore(j);
    d.T_h_ = j.at("t_h").get<int>();
    d.T_o_ = j.at("t_o").get<int>();
    d.sched_ = ddpm::make_schedule(j.at("k").get<int>());
    return d;
  }

 protected:
  void save_json(const std::string& path, const std::string& kind) const {
    nlohmann::json j;
    j["version"] = 1;
    j["kind"] = kind;
    j["system"] = sys_;
    j["t_h"] = T_h_;
    j["t_o"] = T_o_;
    j["k"] = sched_.K;
    j["arch"] = {{"hidden", arch_.hidden}, {"activation", to_string(arch_.act)}};
    j["norm"] = {{"a_center", buffer::detail::vec_to_json(norm_.a_center)},
                 {"a_half", buffer::detail::vec_to_json(norm_.a_half)},
                 {"obs_center", buffer::detail::vec_to_json(norm_.obs_center)},
                 {"obs_half", buffer::detail::vec_to_json(norm_.obs_half)},
                 {"xi_center", buffer::detail::vec_to_json(norm_.xi_center)},
                 {"xi_half", buffer::detail::vec_to_json(norm_.xi_half)}};
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < params_.W.size(); ++l)
      layers.push_back({{"W", buffer::detail::mat_to_json(params_.W[l])},
                        {"b", buffer::detail::vec_to_json(params_.b[l])}});
    j["weights"] = layers;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NumericFailure("save: cannot open " + path);
    out << j.dump() << "\n";
  }

  static nlohmann::json load_json(const std::string& path, const std::string& kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NumericFailure("load: cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw NumericFailure("load: " + path + ": " + e.what());
    }
    if (j.at("kind").get<std::string>() != kind)
      throw NumericFailure("load: " + path + " is not a " + kind + " checkpoint");
    return j;
  }

  void restore(const nlohmann::json& j) {
    sys_ = j.at("system").get<systems::SystemSpec>();
    norm_.a_center = buffer::detail::vec_from_json(j.at("norm").at("a_center"));
    norm_.a_half = buffer::detail::vec_from_json(j.at("norm").at("a_half"));
    norm_.obs_center = buffer::detail::vec_from_json(j.at("norm").at("obs_center"));
    norm_.obs_half = buffer::detail::vec_from_json(j.at("norm").at("obs_half"));
    norm_.xi_center = buffer::detail::vec_from_json(j.at("norm").at("xi_center"));
    norm_.xi_half = buffer::detail::vec_from_json(j.at("norm").at("xi_half"));
    n_xi_ = static_cast<int>(norm_.xi_center.size());
    arch_.hidden = j.at("arch").at("hidden").get<std::vector<int>>();
    arch_.act = activation_from_string(j.at("arch").at("activation").get<std::string>());
    params_.W.clear();
    params_.b.clear();
    for (const auto& layer : j.at("weights")) {
      params_.W.push_back(buffer::detail::mat_from_json(layer.at("W")));
      params_.b.push_back(buffer::detail::vec_from_json(layer.at("b")));
    }
    arch_.out = static_cast<int>(params_.W.back().rows());
    arch_.in = static_cast<int>(params_.W.front().cols());
  }

  systems::SystemSpec sys_;
  int T_h_ = 0;
  int T_o_ = 1;
  int n_xi_ = 0;
  buffer::NormStats norm_;
  ddpm::NoiseSchedule sched_;
  MlpSpec arch_;
  MlpParams params_;
};

// ---------------------------------------------------------------------------
// Direct policy baseline: pi(x, xi) -> action row. For torque control the
// regression targets are (u_t, K_t); for state control the policy predicts
// the next state with Phi_t as the derivative target.
// ---------------------------------------------------------------------------

struct DirectSample {
  Vec x;
  Vec xi_vec;
  Vec a_target;   // n_a
  Mat k_target;   // n_a x n_x
};

class DirectPolicy {
 public:
  DirectPolicy() = default;

  DirectPolicy(const systems::SystemSpec& sys, const buffer::NormStats& norm, Rng& rng,
               std::vector<int> hidden = {64, 64, 64}, Activation act = Activation::Tanh)
      : sys_(sys), norm_(norm) {
    n_xi_ = static_cast<int>(norm.xi_center.size());
    arch_.in = sys_.n_x + n_xi_;
    arch_.out = sys_.n_a;
    arch_.hidden = std::move(hidden);
    arch_.act = act;
    arch_.validate();
    params_ = init_mlp(arch_, rng);
  }

  const systems::SystemSpec& system() const { return sys_; }
  const buffer::NormStats& norm() const { return norm_; }
  const MlpSpec& arch() const { return arch_; }
  MlpParams& params() { return params_; }
  const MlpParams& params() const { return params_; }

  Vec norm_state(const Vec& x) const {
    return (x - norm_.obs_center.head(sys_.n_x)).cwiseQuotient(norm_.obs_half.head(sys_.n_x));
  }

  Vec pack_input(const Vec& x, const Vec& xi_vec) const {
    Vec in(arch_.in);
    in << norm_state(x), norm_.norm_xi(xi_vec);
    return in;
  }

  /// Physical action prediction.
  Vec predict(const Vec& x, const Vec& xi_vec) const {
    MlpCache cache;
    Mat y = mlp_forward(arch_, params_, pack_input(x, xi_vec), cache);
    if (!y.allFinite()) throw NumericFailure("direct policy produced non-finite output");
    return norm_.denorm_action_row(y.col(0));
  }

  /// Eq.-(9)-style stochastic Sobolev regression loss and its exact gradient.
  std::pair<double, MlpGrads> loss_and_param_grad(const std::vector<DirectSample>& batch,
                                                  double alpha_sob, int n_proj, Rng& rng) const {
    require(!batch.empty(), "DirectPolicy::loss_and_param_grad: empty batch");
    const int B = static_cast<int>(batch.size());
    const int n_x = sys_.n_x, n_a = sys_.n_a;
    Mat X(arch_.in, B), T0(n_a, B);
    std::vector<Mat> Jn(B);
    for (int i = 0; i < B; ++i) {
      const auto& s = batch[i];
      X.col(i) = pack_input(s.x, s.xi_vec);
      T0.col(i) = norm_.norm_action_row(s.a_target);
      Jn[i] = norm_.norm_jacobian(s.k_target, n_a, n_x);
    }
    MlpCache cache;
    Mat Y = mlp_forward(arch_, params_, X, cache);
    Mat R0 = Y - T0;
    double loss = R0.squaredNorm() / B;
    MlpGrads grads;
    grads.init_zero(params_);
    mlp_backprop_params(arch_, params_, cache, Mat(2.0 * R0 / B), grads);
    if (alpha_sob > 0.0) {
      for (int j = 0; j < n_proj; ++j) {
        Mat V(n_a, B), TGT(n_x, B);
        for (int i = 0; i < B; ++i) {
          Vec v = rng.unit_sphere(n_a);
          V.col(i) = v;
          TGT.col(i) = Jn[i].transpose() * v;
        }
        Mat G = mlp_input_grad(arch_, params_, cache, V);
        Mat R1 = G.topRows(n_x) - TGT;  // x occupies the leading input rows
        Mat Wt = Mat::Zero(arch_.in, B);
        double c = alpha_sob / (n_proj * B);
        loss += c * R1.squaredNorm();
        Wt.topRows(n_x) = 2.0 * c * R1;
        mlp_sobolev_backprop(arch_, params_, cache, V, Wt, grads);
      }
    }
    if (!std::isfinite(loss) || !grads.all_finite())
      throw NumericFailure("DirectPolicy::loss_and_param_grad: non-finite loss or gradient");
    return {loss, std::move(grads)};
  }

  void save(const std::string& path) const { save_json(path, "direct"); }

  static DirectPolicy load(const std::string& path) {
    nlohmann::json j = load_json_direct(path);
    DirectPolicy d;
    d.sys_ = j.at("system").get<systems::SystemSpec>();
    auto& n = d.norm_;
    n.a_center = buffer::detail::vec_from_json(j.at("norm").at("a_center"));
    n.a_half = buffer::detail::vec_from_json(j.at("norm").at("a_half"));
    n.obs_center = buffer::detail::vec_from_json(j.at("norm").at("obs_center"));
    n.obs_half = buffer::detail::vec_from_json(j.at("norm").at("obs_half"));
    n.xi_center = buffer::detail::vec_from_json(j.at("norm").at("xi_center"));
    n.xi_half = buffer::detail::vec_from_json(j.at("norm").at("xi_half"));
    d.n_xi_ = static_cast<int>(n.xi_center.size());
    d.arch_.hidden = j.at("arch").at("hidden").get<std::vector<int>>();
    d.arch_.act = activation_from_string(j.at("arch").at("activation").get<std::string>());
    for (const auto& layer : j.at("weights")) {
      d.params_.W.push_back(buffer::detail::mat_from_json(layer.at("W")));
      d.params_.b.push_back(buffer::detail::vec_from_json(layer.at("b")));
    }
    d.arch_.out = static_cast<int>(d.params_.W.back().rows());
    d.arch_.in = static_cast<int>(d.params_.W.front().cols());
    return d;
  }

 private:
  void save_json(const std::string& path, const std::string& kind) const {
    nlohmann::json j;
    j["version"] = 1;
    j["kind"] = kind;
    j["system"] = sys_;
    j["arch"] = {{"hidden", arch_.hidden}, {"activation", to_string(arch_.act)}};
    j["norm"] = {{"a_center", buffer::detail::vec_to_json(norm_.a_center)},
                 {"a_half", buffer::detail::vec_to_json(norm_.a_half)},
                 {"obs_center", buffer::detail::vec_to_json(norm_.obs_center)},
                 {"obs_half", buffer::detail::vec_to_json(norm_.obs_half)},
                 {"xi_center", buffer::detail::vec_to_json(norm_.xi_center)},
                 {"xi_half", buffer::detail::vec_to_json(norm_.xi_half)}};
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < params_.W.size(); ++l)
      layers.push_back({{"W", buffer::detail::mat_to_json(params_.W[l])},
                        {"b", buffer::detail::vec_to_json(params_.b[l])}});
    j["weights"] = layers;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NumericFailure("save: cannot open " + path);
    out << j.dump() << "\n";
  }

  static nlohmann::json load_json_direct(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NumericFailure("load: cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw NumericFailure("load: " + path + ": " + e.what());
    }
    if (j.at("kind").get<std::string>() != "direct")
      throw NumericFailure("load: " + path + " is not a direct-policy checkpoint");
    return j;
  }

  systems::SystemSpec sys_;
  int n_xi_ = 0;
  buffer::NormStats norm_;
  MlpSpec arch_;
  MlpParams params_;
};

}  // namespace sobodiff::denoiser

#endif  // SOBODIFF_DENOISER_HPP
