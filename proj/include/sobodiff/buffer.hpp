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

#ifndef SOBODIFF_BUFFER_HPP
#define SOBODIFF_BUFFER_HPP

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sobodiff/common.hpp"
#include "sobodiff/sensitivity.hpp"
#include "sobodiff/systems.hpp"
#include "sobodiff/trajopt.hpp"

namespace sobodiff::buffer {

/// One solved instance: trajectory, gains, per-step dynamics Jacobians (so
/// Phi_t stays recomputable), cost and solver metadata.
struct TrajectoryRecord {
  systems::TaskParams xi;
  Mat X;                // (T+1) x n_x
  Mat U;                // T x n_u
  std::vector<Mat> K;   // T gains
  std::vector<Mat> A;   // T state Jacobians
  std::vector<Mat> B;   // T control Jacobians
  double cost = 0.0;
  int iters = 0;
  std::string source = "cold";  // cold | warmstart
};

inline TrajectoryRecord make_record(const systems::SystemSpec& spec,
                                    const systems::TaskParams& xi,
                                    const trajopt::SolveResult& res, const std::string& source) {
  TrajectoryRecord rec;
  rec.xi = xi;
  rec.X = res.X;
  rec.U = res.U;
  rec.K = res.gains;
  rec.cost = res.cost;
  rec.iters = res.iters;
  rec.source = source;
  rec.A.resize(spec.T);
  rec.B.resize(spec.T);
  for (int t = 0; t < spec.T; ++t)
    systems::jacobians(spec, res.X.row(t).transpose(), res.U.row(t).transpose(), rec.A[t],
                       rec.B[t]);
  return rec;
}

/// One training sample. Rows of tau0 are trajectory times t1 .. t1+T_h-1;
/// the first T_o rows are the history (inpainted at training and inference),
/// o_hist row for time t is concat(x_t, u_{t-1}) with u_{-1} = 0.
struct Chunk {
  Mat tau0;      // T_h x n_a
  Mat o_hist;    // T_o x (n_x + n_u)
  Mat x_hist;    // T_o x n_x
  Mat a_hist;    // T_o x n_a
  Vec xi_vec;
  Mat j_target;  // (T_h*n_a) x (T_o*n_x)
  int record_idx = 0;
  int t1 = 0;
};

/// Per-dimension affine maps to [-1, 1] plus consistent Jacobian rescaling.
struct NormStats {
  Vec a_center, a_half;      // n_a
  Vec obs_center, obs_half;  // n_x + n_u
  Vec xi_center, xi_half;

  static constexpr double kMinHalf = 1e-6;

  Vec norm_action_row(const Vec& a) const { return (a - a_center).cwiseQuotient(a_half); }
  Vec denorm_action_row(const Vec& an) const { return an.cwiseProduct(a_half) + a_center; }
  Vec norm_obs_row(const Vec& o) const { return (o - obs_center).cwiseQuotient(obs_half); }
  Vec norm_xi(const Vec& xi) const { return (xi - xi_center).cwiseQuotient(xi_half); }

  Mat norm_actions(const Mat& A) const {
    Mat out(A.rows(), A.cols());
    for (int r = 0; r < A.rows(); ++r)
      out.row(r) = norm_action_row(A.row(r).transpose()).transpose();
    return out;
  }
  Mat denorm_actions(const Mat& A) const {
    Mat out(A.rows(), A.cols());
    for (int r = 0; r < A.rows(); ++r)
      out.row(r) = denorm_action_row(A.row(r).transpose()).transpose();
    return out;
  }
  Mat norm_obs(const Mat& O) const {
    Mat out(O.rows(), O.cols());
    for (int r = 0; r < O.rows(); ++r) out.row(r) = norm_obs_row(O.row(r).transpose()).transpose();
    return out;
  }

  /// J_norm = S_a J S_x^{-1}: row r scales by 1/a_half[r % n_a], column c by
  /// obs_half[c % n_x] (state scales are the leading obs dimensions).
  Mat norm_jacobian(const Mat& J, int n_a, int n_x) const {
    Mat out = J;
    for (int r = 0; r < J.rows(); ++r)
      for (int c = 0; c < J.cols(); ++c)
        out(r, c) = J(r, c) * obs_half[c % n_x] / a_half[r % n_a];
    return out;
  }
};

namespace detail {

inline nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat mat_from_json(const nlohmann::json& j) {
  const auto rows = j.size();
  if (rows == 0) return Mat(0, 0);
  const auto cols = j[0].size();
  Mat m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  return m;
}

inline nlohmann::json vec_to_json(const Vec& v) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vec vec_from_json(const nlohmann::json& j) {
  Vec v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

inline nlohmann::json mats_to_json(const std::vector<Mat>& ms) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& m : ms) a.push_back(mat_to_json(m));
  return a;
}

inline std::vector<Mat> mats_from_json(const nlohmann::json& j) {
  std::vector<Mat> ms;
  ms.reserve(j.size());
  for (const auto& e : j) ms.push_back(mat_from_json(e));
  return ms;
}

inline nlohmann::json xi_to_json(const systems::TaskParams& xi) {
  nlohmann::json obs = nlohmann::json::array();
  for (const auto& ob : xi.obstacles)
    obs.push_back({ob.center.x(), ob.center.y(), ob.radius});
  return nlohmann::json{{"x_init", vec_to_json(xi.x_init)}, {"goal", vec_to_json(xi.goal)},
                        {"obstacles", obs},                 {"w_obstacle", xi.w_obstacle},
                        {"w_bound", xi.w_bound},            {"margin", xi.margin}};
}

inline systems::TaskParams xi_from_json(const nlohmann::json& j) {
  systems::TaskParams xi;
  xi.x_init = vec_from_json(j.at("x_init"));
  xi.goal = vec_from_json(j.at("goal"));
  for (const auto& ob : j.at("obstacles"))
    xi.obstacles.push_back({{ob[0].get<double>(), ob[1].get<double>()}, ob[2].get<double>()});
  xi.w_obstacle = j.at("w_obstacle").get<double>();
  xi.w_bound = j.at("w_bound").get<double>();
  xi.margin = j.at("margin").get<double>();
  return xi;
}

}  // namespace detail

/// Trajectory store with chunk sampling and NDJSON persistence
/// (keys per line: xi, X, U, K, A, B, cost, iters, source).
class Buffer {
 public:
  explicit Buffer(systems::SystemSpec spec) : spec_(std::move(spec)) {}

  const systems::SystemSpec& spec() const { return spec_; }

  void insert(TrajectoryRecord rec) { records_.push_back(std::move(rec)); }
  void reset() { records_.clear(); }
  std::size_t size() const { return records_.size(); }
  const TrajectoryRecord& record(std::size_t i) const { return records_.at(i); }

  /// Action row at trajectory time t: u_t or x_t.
  Vec action_row(const TrajectoryRecord& rec, int t) const {
    if (spec_.action_mode == systems::ActionMode::Control) return rec.U.row(t).transpose();
    return rec.X.row(t).transpose();
  }

  Vec obs_row(const TrajectoryRecord& rec, int t) const {
    Vec o(spec_.n_x + spec_.n_u);
    o.head(spec_.n_x) = rec.X.row(t).transpose();
    if (t > 0)
      o.tail(spec_.n_u) = rec.U.row(t - 1).transpose();
    else
      o.tail(spec_.n_u).setZero();
    return o;
  }

  /// Min/max scan over all stored actions, observations and task vectors,
  /// with an epsilon floor on degenerate widths.
  NormStats fit_norm() const {
    if (records_.empty()) throw NumericFailure("fit_norm: empty buffer");
    const int n_obs = spec_.n_x + spec_.n_u;
    Vec a_lo = Vec::Constant(spec_.n_a, std::numeric_limits<double>::infinity());
    Vec a_hi = -a_lo;
    Vec o_lo = Vec::Constant(n_obs, std::numeric_limits<double>::infinity());
    Vec o_hi = -o_lo;
    Vec xi0 = systems::xi_vector(records_.front().xi);
    Vec x_lo = Vec::Constant(xi0.size(), std::numeric_limits<double>::infinity());
    Vec x_hi = -x_lo;
    const int a_last = spec_.action_mode == systems::ActionMode::Control ? spec_.T - 1 : spec_.T;
    for (const auto& rec : records_) {
      for (int t = 0; t <= a_last; ++t) {
        Vec a = action_row(rec, t);
        a_lo = a_lo.cwiseMin(a);
        a_hi = a_hi.cwiseMax(a);
      }
      for (int t = 0; t < spec_.T; ++t) {
        Vec o = obs_row(rec, t);
        o_lo = o_lo.cwiseMin(o);
        o_hi = o_hi.cwiseMax(o);
      }
      Vec xv = systems::xi_vector(rec.xi);
      x_lo = x_lo.cwiseMin(xv);
      x_hi = x_hi.cwiseMax(xv);
    }
    NormStats ns;
    auto fit = [](const Vec& lo, const Vec& hi, Vec& center, Vec& half) {
      center = 0.5 * (lo + hi);
      half = (0.5 * (hi - lo)).cwiseMax(NormStats::kMinHalf);
    };
    fit(a_lo, a_hi, ns.a_center, ns.a_half);
    fit(o_lo, o_hi, ns.obs_center, ns.obs_half);
    fit(x_lo, x_hi, ns.xi_center, ns.xi_half);
    return ns;
  }

  int min_t1(int T_o) const { return T_o - 1; }
  int max_t1(int T_h) const { return spec_.T - T_h; }

  /// Number of chunk samples in one diffusion "epoch":
  /// ceil(|D| * (T - T_h) / T_h).
  int epoch_chunks(int T_h) const {
    require(T_h >= 1 && T_h <= spec_.T, "epoch_chunks: T_h out of range");
    double e = static_cast<double>(records_.size()) * (spec_.T - T_h) / T_h;
    return std::max(1, static_cast<int>(std::ceil(e)));
  }

  /// Number of state-action pairs in one direct-policy "epoch": |D| * T.
  int epoch_pairs() const { return static_cast<int>(records_.size()) * spec_.T; }

  Chunk make_chunk(int record_idx, int t1, int T_h, int T_o) const {
    require(T_h >= 1 && T_o >= 1 && T_o <= T_h, "make_chunk: bad window sizes");
    require(spec_.T >= T_h, "make_chunk: records shorter than T_h");
    require(t1 >= min_t1(T_o) && t1 <= max_t1(T_h), "make_chunk: t1 out of range");
    const auto& rec = records_.at(record_idx);
    Chunk ch;
    ch.record_idx = record_idx;
    ch.t1 = t1;
    ch.tau0.resize(T_h, spec_.n_a);
    for (int h = 0; h < T_h; ++h) ch.tau0.row(h) = action_row(rec, t1 + h).transpose();
    ch.a_hist = ch.tau0.topRows(T_o);
    ch.x_hist.resize(T_o, spec_.n_x);
    ch.o_hist.resize(T_o, spec_.n_x + spec_.n_u);
    for (int o = 0; o < T_o; ++o) {
      ch.x_hist.row(o) = rec.X.row(t1 + o);
      ch.o_hist.row(o) = obs_row(rec, t1 + o).transpose();
    }
    ch.xi_vec = systems::xi_vector(rec.xi);
    auto cl = sensitivity::assemble_closed_loop(rec.A, rec.B, rec.K, spec_.action_mode);
    ch.j_target = sensitivity::chunk_jacobian(cl, t1, T_h, T_o);
    return ch;
  }

  Chunk sample_chunk(Rng& rng, int T_h, int T_o) const {
    if (records_.empty()) throw NumericFailure("sample_chunk: empty buffer");
    require(spec_.T >= T_h, "sample_chunk: configured T_h exceeds record length");
    int idx = static_cast<int>(rng.uniform_index(records_.size()));
    int t1 = rng.uniform_int(min_t1(T_o), max_t1(T_h));
    return make_chunk(idx, t1, T_h, T_o);
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NumericFailure("save: cannot open " + path);
    for (const auto& rec : records_) {
      nlohmann::json j{{"xi", detail::xi_to_json(rec.xi)},
                       {"X", detail::mat_to_json(rec.X)},
                       {"U", detail::mat_to_json(rec.U)},
                       {"K", detail::mats_to_json(rec.K)},
                       {"A", detail::mats_to_json(rec.A)},
                       {"B", detail::mats_to_json(rec.B)},
                       {"cost", rec.cost},
                       {"iters", rec.iters},
                       {"source", rec.source}};
      out << j.dump() << "\n";
    }
    if (!out) throw NumericFailure("save: write failed for " + path);
  }

  /// Replaces the contents on success; a malformed file leaves the buffer
  /// untouched and reports the offending line.
  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NumericFailure("load: cannot open " + path);
    std::vector<TrajectoryRecord> parsed;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
        TrajectoryRecord rec;
        rec.xi = detail::xi_from_json(j.at("xi"));
        rec.X = detail::mat_from_json(j.at("X"));
        rec.U = detail::mat_from_json(j.at("U"));
        rec.K = detail::mats_from_json(j.at("K"));
        rec.A = detail::mats_from_json(j.at("A"));
        rec.B = detail::mats_from_json(j.at("B"));
        rec.cost = j.at("cost").get<double>();
        rec.iters = j.at("iters").get<int>();
        rec.source = j.at("source").get<std::string>();
        if (rec.X.rows() != spec_.T + 1 || rec.X.cols() != spec_.n_x ||
            rec.U.rows() != spec_.T || rec.U.cols() != spec_.n_u ||
            static_cast<int>(rec.K.size()) != spec_.T)
          throw NumericFailure("record shape does not match the system spec");
        parsed.push_back(std::move(rec));
      } catch (const std::exception& e) {
        throw NumericFailure("load: " + path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    records_ = std::move(parsed);
  }

 private:
  systems::SystemSpec spec_;
  std::vector<TrajectoryRecord> records_;
};

}  // namespace sobodiff::buffer

#endif  // SOBODIFF_BUFFER_HPP
