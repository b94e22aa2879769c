#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace vapipe {

// minimize c.x  subject to  A x <= b, x >= 0.
// b entries may be negative; phase I constructs a feasible basis.
struct LpProblem {
  std::vector<double> objective;             // length n
  std::vector<std::vector<double>> rows;     // m rows, each length n
  std::vector<double> rhs;                   // length m
};

struct LpSolution {
  std::vector<double> x;
  double objective = 0.0;
  std::size_t pivots = 0;
};

namespace lp_detail {

constexpr double kEps = 1e-10;

class Tableau {
 public:
  Tableau(std::size_t m, std::size_t cols) : m_(m), cols_(cols), t_(m, std::vector<double>(cols + 1, 0.0)), basis_(m, 0) {}

  std::size_t m() const { return m_; }
  std::size_t cols() const { return cols_; }
  double& at(std::size_t r, std::size_t c) { return t_[r][c]; }
  double at(std::size_t r, std::size_t c) const { return t_[r][c]; }
  double& rhs(std::size_t r) { return t_[r][cols_]; }
  double rhs(std::size_t r) const { return t_[r][cols_]; }
  std::size_t basis(std::size_t r) const { return basis_[r]; }
  void set_basis(std::size_t r, std::size_t col) { basis_[r] = col; }

  void pivot(std::size_t row, std::size_t col, std::vector<double>& obj, double& obj_rhs) {
    const double p = t_[row][col];
    for (double& v : t_[row]) v /= p;
    for (std::size_t r = 0; r < m_; ++r) {
      if (r == row) continue;
      const double factor = t_[r][col];
      if (std::abs(factor) <= kEps) continue;
      for (std::size_t c = 0; c <= cols_; ++c) t_[r][c] -= factor * t_[row][c];
    }
    const double ofactor = obj[col];
    if (std::abs(ofactor) > 0.0) {
      for (std::size_t c = 0; c < cols_; ++c) obj[c] -= ofactor * t_[row][c];
      obj_rhs -= ofactor * t_[row][cols_];
    }
    basis_[row] = col;
  }

  // Bland's rule: entering column is the lowest index with a negative reduced
  // cost; the leaving row breaks ratio ties by lowest basic variable index.
  // Returns the pivot count; throws on an unbounded direction.
  std::size_t run_simplex(std::vector<double>& obj, double& obj_rhs, std::size_t usable_cols) {
    std::size_t pivots = 0;
    while (true) {
      std::size_t entering = usable_cols;
      for (std::size_t c = 0; c < usable_cols; ++c) {
        if (obj[c] < -kEps) {
          entering = c;
          break;
        }
      }
      if (entering == usable_cols) return pivots;

      std::size_t leaving = m_;
      double best_ratio = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < m_; ++r) {
        const double a = t_[r][entering];
        if (a <= kEps) continue;
        const double ratio = t_[r][cols_] / a;
        if (ratio < best_ratio - kEps ||
            (std::abs(ratio - best_ratio) <= kEps && (leaving == m_ || basis_[r] < basis_[leaving]))) {
          best_ratio = ratio;
          leaving = r;
        }
      }
      if (leaving == m_) throw std::runtime_error("LP is unbounded");
      pivot(leaving, entering, obj, obj_rhs);
      ++pivots;
    }
  }

 private:
  std::size_t m_;
  std::size_t cols_;
  std::vector<std::vector<double>> t_;
  std::vector<std::size_t> basis_;
};

}  // namespace lp_detail

// Exact two-phase primal simplex on a dense tableau. Sized for this
// project's calibration programs (tens of variables), not generality.
inline LpSolution solve_lp_simplex(const LpProblem& lp) {
  using lp_detail::kEps;
  const std::size_t n = lp.objective.size();
  const std::size_t m = lp.rows.size();
  if (lp.rhs.size() != m) throw std::invalid_argument("LP rhs length mismatch");
  for (const auto& row : lp.rows) {
    if (row.size() != n) throw std::invalid_argument("LP row length mismatch");
  }

  // Columns: [0,n) structural, [n,n+m) slack, [n+m,n+m+m) artificial.
  // Artificials are only created for rows whose slack basis is infeasible.
  lp_detail::Tableau tab(m, n + 2 * m);
  std::size_t artificial_count = 0;
  for (std::size_t r = 0; r < m; ++r) {
    const double sign = lp.rhs[r] < 0.0 ? -1.0 : 1.0;
    for (std::size_t c = 0; c < n; ++c) tab.at(r, c) = sign * lp.rows[r][c];
    tab.at(r, n + r) = sign;  // slack
    tab.rhs(r) = sign * lp.rhs[r];
    if (sign < 0.0) {
      tab.at(r, n + m + r) = 1.0;
      tab.set_basis(r, n + m + r);
      ++artificial_count;
    } else {
      tab.set_basis(r, n + r);
    }
  }

  LpSolution solution;

  if (artificial_count > 0) {
    // Phase I: minimize the sum of artificials, canonicalized against the
    // starting basis.
    std::vector<double> obj(n + 2 * m, 0.0);
    double obj_rhs = 0.0;
    for (std::size_t c = n + m; c < n + 2 * m; ++c) obj[c] = 1.0;
    for (std::size_t r = 0; r < m; ++r) {
      if (tab.basis(r) >= n + m) {
        for (std::size_t c = 0; c < n + 2 * m; ++c) obj[c] -= tab.at(r, c);
        obj_rhs -= tab.rhs(r);
      }
    }
    solution.pivots += tab.run_simplex(obj, obj_rhs, n + 2 * m);
    if (-obj_rhs > 1e-7) throw std::runtime_error("LP is infeasible");

    // Drive any degenerate artificial out of the basis.
    for (std::size_t r = 0; r < m; ++r) {
      if (tab.basis(r) < n + m) continue;
      std::size_t col = n + m;
      for (std::size_t c = 0; c < n + m; ++c) {
        if (std::abs(tab.at(r, c)) > kEps) {
          col = c;
          break;
        }
      }
      if (col < n + m) {
        tab.pivot(r, col, obj, obj_rhs);
        ++solution.pivots;
      } else {
        // Redundant row: zero it so it can never pivot again.
        for (std::size_t c = 0; c <= tab.cols(); ++c) tab.at(r, c) = 0.0;
      }
    }
  }

  // Phase II over structural + slack columns only.
  {
    std::vector<double> obj(n + 2 * m, 0.0);
    double obj_rhs = 0.0;
    for (std::size_t c = 0; c < n; ++c) obj[c] = lp.objective[c];
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t bc = tab.basis(r);
      if (bc < n && std::abs(lp.objective[bc]) > 0.0) {
        const double factor = lp.objective[bc];
        for (std::size_t c = 0; c < n + 2 * m; ++c) obj[c] -= factor * tab.at(r, c);
        obj_rhs -= factor * tab.rhs(r);
      }
    }
    solution.pivots += tab.run_simplex(obj, obj_rhs, n + m);
  }

  solution.x.assign(n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t bc = tab.basis(r);
    if (bc < n) solution.x[bc] = std::max(0.0, tab.rhs(r));
  }
  solution.objective = 0.0;
  for (std::size_t c = 0; c < n; ++c) solution.objective += lp.objective[c] * solution.x[c];
  return solution;
}

// Max constraint violation of a candidate point, for test assertions.
inline double lp_max_violation(const LpProblem& lp, const std::vector<double>& x) {
  double worst = 0.0;
  for (double v : x) worst = std::max(worst, -v);
  for (std::size_t r = 0; r < lp.rows.size(); ++r) {
    double lhs = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) lhs += lp.rows[r][c] * x[c];
    worst = std::max(worst, lhs - lp.rhs[r]);
  }
  return worst;
}

}  // namespace vapipe
