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

#ifndef SOBODIFF_COMMON_HPP
#define SOBODIFF_COMMON_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace sobodiff {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Thrown when a caller violates an operation's preconditions.
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

/// Thrown when a computation produces non-finite values or cannot proceed
/// numerically (singular systems, exhausted resampling budgets, ...).
class NumericFailure : public std::runtime_error {
 public:
  explicit NumericFailure(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline void check_finite(const Mat& m, const std::string& what) {
  if (!m.allFinite()) throw NumericFailure(what + " contains non-finite values");
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Seeded random stream. `derive` builds statistically independent child
/// streams from the parent seed and a tag, so parallel workers can draw
/// without sharing state and runs stay reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(detail::splitmix64(seed)) {}

  Rng derive(std::string_view tag, std::uint64_t a = 0, std::uint64_t b = 0) const {
    std::uint64_t h = detail::fnv1a(tag);
    h = detail::splitmix64(seed_ ^ h);
    h = detail::splitmix64(h ^ (a * 0x9e3779b97f4a7c15ULL + 1));
    h = detail::splitmix64(h ^ (b * 0xd1342543de82ef95ULL + 1));
    return Rng(h);
  }

  std::uint64_t seed() const { return seed_; }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(eng_);
  }

  /// Inclusive integer range.
  int uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(eng_);
  }

  std::size_t uniform_index(std::size_t n) {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(eng_);
  }

  double normal() {
    std::normal_distribution<double> d(0.0, 1.0);
    return d(eng_);
  }

  Vec normal_vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Mat normal_mat(int rows, int cols) {
    Mat m(rows, cols);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r) m(r, c) = normal();
    return m;
  }

  /// Uniform draw on the unit sphere in R^n.
  Vec unit_sphere(int n) {
    Vec v = normal_vec(n);
    double nrm = v.norm();
    while (nrm < 1e-12) {
      v = normal_vec(n);
      nrm = v.norm();
    }
    return v / nrm;
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

/// Full round-trip decimal formatting for doubles (CSV/plot output).
inline std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

inline int thread_count() {
  if (const char* env = std::getenv("SOBODIFF_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(i) for i in [0, n). Results must be written to preallocated,
/// index-owned slots; iteration order is then irrelevant and outputs are
/// deterministic regardless of the worker count.
template <class Fn>
inline void parallel_for(int n, Fn&& fn) {
  int workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(workers);
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errs[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace sobodiff

#endif  // SOBODIFF_COMMON_HPP
