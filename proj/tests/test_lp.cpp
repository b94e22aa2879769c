#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "vapipe/lp.hpp"

using namespace vapipe;

TEST_CASE("simplex solves hand-checkable programs") {
  SECTION("classic two-variable maximization, negated") {
    // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), value 36.
    LpProblem lp;
    lp.objective = {-3, -5};
    lp.rows = {{1, 0}, {0, 2}, {3, 2}};
    lp.rhs = {4, 12, 18};
    const auto sol = solve_lp_simplex(lp);
    CHECK(sol.x[0] == Catch::Approx(2.0));
    CHECK(sol.x[1] == Catch::Approx(6.0));
    CHECK(sol.objective == Catch::Approx(-36.0));
    CHECK(lp_max_violation(lp, sol.x) < 1e-9);
  }

  SECTION("negative rhs forces phase I") {
    // min x + y s.t. x + y >= 2 (written -x - y <= -2): optimum value 2.
    LpProblem lp;
    lp.objective = {1, 1};
    lp.rows = {{-1, -1}};
    lp.rhs = {-2};
    const auto sol = solve_lp_simplex(lp);
    CHECK(sol.objective == Catch::Approx(2.0));
    CHECK(lp_max_violation(lp, sol.x) < 1e-9);
  }

  SECTION("mixed signs") {
    // min -x + y s.t. x <= 3, y >= 1, x + y <= 5 -> x=3, y=1, value -2.
    LpProblem lp;
    lp.objective = {-1, 1};
    lp.rows = {{1, 0}, {0, -1}, {1, 1}};
    lp.rhs = {3, -1, 5};
    const auto sol = solve_lp_simplex(lp);
    CHECK(sol.x[0] == Catch::Approx(3.0));
    CHECK(sol.x[1] == Catch::Approx(1.0));
    CHECK(sol.objective == Catch::Approx(-2.0));
  }

  SECTION("infeasible program throws") {
    // x <= 1 and x >= 2 cannot hold together.
    LpProblem lp;
    lp.objective = {1};
    lp.rows = {{1}, {-1}};
    lp.rhs = {1, -2};
    CHECK_THROWS_WITH(solve_lp_simplex(lp), Catch::Matchers::ContainsSubstring("infeasible"));
  }

  SECTION("unbounded program throws") {
    LpProblem lp;
    lp.objective = {-1};
    lp.rows = {{0}};
    lp.rhs = {1};
    CHECK_THROWS_WITH(solve_lp_simplex(lp), Catch::Matchers::ContainsSubstring("unbounded"));
  }

  SECTION("degenerate redundant constraints still terminate") {
    LpProblem lp;
    lp.objective = {1, 1};
    lp.rows = {{-1, -1}, {-2, -2}, {-1, -1}};
    lp.rhs = {-2, -4, -2};
    const auto sol = solve_lp_simplex(lp);
    CHECK(sol.objective == Catch::Approx(2.0));
    CHECK(lp_max_violation(lp, sol.x) < 1e-9);
  }
}

TEST_CASE("random programs: solution feasible and no sampled point beats it") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> coef(-2.0, 2.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng() % 4;
    const std::size_t m = 2 + rng() % 5;
    LpProblem lp;
    lp.objective.resize(n);
    for (double& v : lp.objective) v = coef(rng);
    // Rows built around known feasible points keep the program feasible.
    std::vector<double> anchor(n);
    for (double& v : anchor) v = unit(rng);
    for (std::size_t r = 0; r < m; ++r) {
      std::vector<double> row(n);
      double lhs = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        row[c] = coef(rng);
        lhs += row[c] * anchor[c];
      }
      lp.rows.push_back(row);
      lp.rhs.push_back(lhs + unit(rng));  // slack at the anchor
    }
    // Bound the box so the program cannot be unbounded.
    for (std::size_t c = 0; c < n; ++c) {
      std::vector<double> row(n, 0.0);
      row[c] = 1.0;
      lp.rows.push_back(row);
      lp.rhs.push_back(5.0);
    }

    const auto sol = solve_lp_simplex(lp);
    CHECK(lp_max_violation(lp, sol.x) < 1e-8);

    // Random feasible samples cannot do better than the reported optimum.
    for (int sample = 0; sample < 200; ++sample) {
      std::vector<double> x(n);
      for (double& v : x) v = unit(rng) * 5.0;
      if (lp_max_violation(lp, x) > 0.0) continue;
      double value = 0.0;
      for (std::size_t c = 0; c < n; ++c) value += lp.objective[c] * x[c];
      CHECK(value >= sol.objective - 1e-8);
    }
  }
}
