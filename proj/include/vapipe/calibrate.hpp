#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vapipe/core.hpp"
#include "vapipe/lp.hpp"

namespace vapipe {

// Per-confidence-stratum rank weights plus the distributions they were fit
// against. Invariant per stratum: alpha_1 >= ... >= alpha_5 >= 0, sum <= 1.
struct CalibrationParams {
  std::array<std::array<double, kMaxRanked>, 3> alpha{};  // indexed by Confidence
  PrevalenceVector prevalence;  // pi: training prevalence carrying residual mass
  PrevalenceVector target;      // r: distribution the aggregate is pulled toward
  double objective = 0.0;       // achieved L1 discrepancy at the fitted alpha
  bool stratified = false;

  const std::array<double, kMaxRanked>& alpha_for(Confidence c) const {
    return alpha[static_cast<std::size_t>(c)];
  }

  void validate() const {
    for (const auto& a : alpha) {
      double sum = 0.0;
      for (std::size_t j = 0; j < kMaxRanked; ++j) {
        if (a[j] < -1e-9) throw ValidationError("calibration weight is negative");
        if (j > 0 && a[j] > a[j - 1] + 1e-9) {
          throw ValidationError("calibration weights must be nonincreasing by rank");
        }
        sum += a[j];
      }
      if (sum > 1.0 + 1e-9) throw ValidationError("calibration weights must sum to at most 1");
    }
  }
};

// The L1-matching program in standard form. qbar_c(alpha) is affine:
// qbar_c = qbar_coef[c] . alpha_flat + qbar_base[c], with alpha_flat laid out
// stratum-major (5 weights per stratum).
struct CalibrationLP {
  std::size_t strata = 1;  // 1 when unstratified, else 3
  std::size_t cause_count = 0;
  std::vector<std::vector<double>> qbar_coef;
  std::vector<double> qbar_base;
  PrevalenceVector prevalence;
  PrevalenceVector target;
  LpProblem lp;  // variables: 5*strata alphas then cause_count auxiliaries

  std::size_t alpha_count() const { return kMaxRanked * strata; }
  std::size_t variable_count() const { return alpha_count() + cause_count; }
};

namespace detail {

inline std::size_t stratum_of(const RankedPrediction& ranked, bool stratified) {
  if (!stratified) return 0;
  return static_cast<std::size_t>(ranked.entries.front().confidence);
}

// Residual distribution over non-ranked causes: prevalence restricted and
// renormalized; uniform when no non-ranked prevalence mass remains.
inline std::vector<double> residual_weights(const std::vector<bool>& ranked_mask,
                                            const PrevalenceVector& prevalence) {
  const std::size_t c_count = prevalence.size();
  std::vector<double> w(c_count, 0.0);
  double mass = 0.0;
  std::size_t non_ranked = 0;
  for (std::size_t c = 0; c < c_count; ++c) {
    if (ranked_mask[c]) continue;
    ++non_ranked;
    mass += prevalence[c];
  }
  if (non_ranked == 0) return w;  // caller handles the fully ranked case
  for (std::size_t c = 0; c < c_count; ++c) {
    if (ranked_mask[c]) continue;
    w[c] = mass > 0.0 ? prevalence[c] / mass : 1.0 / static_cast<double>(non_ranked);
  }
  return w;
}

}  // namespace detail

// Assemble the calibration program for a set of ranked predictions:
//   minimize sum_c t_c
//   s.t.  +-(qbar_c(alpha) - r_c) <= t_c, per-stratum monotonicity,
//         per-stratum sum(alpha) <= 1, alpha >= 0, t >= 0.
// A case with every cause ranked has no residual support; its leftover mass
// is spread uniformly so qbar stays affine in alpha.
inline CalibrationLP build_lp(const PredictionSet& preds, const PrevalenceVector& prevalence,
                              const PrevalenceVector& target, bool stratify) {
  if (preds.by_id.empty()) throw ValidationError("cannot calibrate an empty prediction set");
  const std::size_t c_count = prevalence.size();
  if (target.size() != c_count) throw ValidationError("prevalence and target sizes differ");
  std::size_t positive = 0;
  for (std::size_t c = 0; c < c_count; ++c) {
    if (prevalence[c] > 0.0) ++positive;
  }
  if (positive < 2) throw ValidationError("calibration needs prevalence support on at least 2 causes");

  CalibrationLP cal;
  cal.strata = stratify ? 3 : 1;
  cal.cause_count = c_count;
  cal.prevalence = prevalence;
  cal.target = target;
  cal.qbar_coef.assign(c_count, std::vector<double>(cal.alpha_count(), 0.0));
  cal.qbar_base.assign(c_count, 0.0);

  const double inv_n = 1.0 / static_cast<double>(preds.by_id.size());
  for (const auto& [id, pred] : preds.by_id) {
    if (!pred.ranked) {
      throw ValidationError("record '" + id + "' has no ranked prediction; calibration needs the ranked form");
    }
    pred.ranked->validate(c_count);
    const auto& entries = pred.ranked->entries;
    const std::size_t k = entries.size();
    const std::size_t s = detail::stratum_of(*pred.ranked, stratify);
    const std::size_t base_col = s * kMaxRanked;

    std::vector<bool> ranked_mask(c_count, false);
    for (const auto& e : entries) ranked_mask[e.cause] = true;

    for (std::size_t j = 0; j < k; ++j) {
      cal.qbar_coef[entries[j].cause][base_col + j] += inv_n;
    }
    if (k == c_count) {
      // Fully ranked: residual (1 - sum alpha) spread uniformly over all causes.
      const double u = inv_n / static_cast<double>(c_count);
      for (std::size_t c = 0; c < c_count; ++c) {
        cal.qbar_base[c] += u;
        for (std::size_t j = 0; j < k; ++j) cal.qbar_coef[c][base_col + j] -= u;
      }
    } else {
      const auto w = detail::residual_weights(ranked_mask, prevalence);
      for (std::size_t c = 0; c < c_count; ++c) {
        if (ranked_mask[c]) continue;
        cal.qbar_base[c] += inv_n * w[c];
        for (std::size_t j = 0; j < k; ++j) cal.qbar_coef[c][base_col + j] -= inv_n * w[c];
      }
    }
  }

  const std::size_t n_alpha = cal.alpha_count();
  const std::size_t n_vars = cal.variable_count();
  cal.lp.objective.assign(n_vars, 0.0);
  for (std::size_t c = 0; c < c_count; ++c) cal.lp.objective[n_alpha + c] = 1.0;

  auto add_row = [&](std::vector<double> row, double rhs) {
    cal.lp.rows.push_back(std::move(row));
    cal.lp.rhs.push_back(rhs);
  };

  for (std::size_t c = 0; c < c_count; ++c) {
    std::vector<double> up(n_vars, 0.0), down(n_vars, 0.0);
    for (std::size_t a = 0; a < n_alpha; ++a) {
      up[a] = cal.qbar_coef[c][a];
      down[a] = -cal.qbar_coef[c][a];
    }
    up[n_alpha + c] = -1.0;
    down[n_alpha + c] = -1.0;
    add_row(std::move(up), target[c] - cal.qbar_base[c]);
    add_row(std::move(down), cal.qbar_base[c] - target[c]);
  }
  for (std::size_t s = 0; s < cal.strata; ++s) {
    for (std::size_t j = 0; j + 1 < kMaxRanked; ++j) {
      std::vector<double> row(n_vars, 0.0);
      row[s * kMaxRanked + j] = -1.0;
      row[s * kMaxRanked + j + 1] = 1.0;
      add_row(std::move(row), 0.0);
    }
    std::vector<double> row(n_vars, 0.0);
    for (std::size_t j = 0; j < kMaxRanked; ++j) row[s * kMaxRanked + j] = 1.0;
    add_row(std::move(row), 1.0);
  }
  return cal;
}

// The L1 objective at a given flat alpha vector, via the precomputed affine map.
inline double calibration_objective(const CalibrationLP& cal, const std::vector<double>& alpha_flat) {
  if (alpha_flat.size() != cal.alpha_count()) throw ValidationError("alpha length mismatch");
  double total = 0.0;
  for (std::size_t c = 0; c < cal.cause_count; ++c) {
    double q = cal.qbar_base[c];
    for (std::size_t a = 0; a < alpha_flat.size(); ++a) q += cal.qbar_coef[c][a] * alpha_flat[a];
    total += std::abs(q - cal.target[c]);
  }
  return total;
}

// Exact optimum via the two-phase simplex. alpha = 0 is always feasible, so
// this cannot fail on a well-formed program.
inline CalibrationParams solve_lp(const CalibrationLP& cal) {
  LpSolution sol = solve_lp_simplex(cal.lp);

  CalibrationParams params;
  params.prevalence = cal.prevalence;
  params.target = cal.target;
  params.stratified = cal.strata == 3;
  params.objective = 0.0;
  for (std::size_t c = 0; c < cal.cause_count; ++c) {
    params.objective += sol.x[cal.alpha_count() + c];
  }
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t source = cal.strata == 3 ? s : 0;
    for (std::size_t j = 0; j < kMaxRanked; ++j) {
      double v = sol.x[source * kMaxRanked + j];
      params.alpha[s][j] = v < 0.0 ? 0.0 : v;  // clear simplex round-off
    }
    // Snap round-off so the monotonicity invariant holds exactly.
    for (std::size_t j = 1; j < kMaxRanked; ++j) {
      params.alpha[s][j] = std::min(params.alpha[s][j], params.alpha[s][j - 1]);
    }
  }
  params.validate();
  return params;
}

// Calibrated per-case distribution. Ranked causes receive their rank weight;
// everything else shares the residual in proportion to training prevalence.
// The ranked form passes through untouched, so rank-derived metrics cannot move.
inline PredictionSet apply_calibration(const PredictionSet& preds, const CalibrationParams& params) {
  params.validate();
  const std::size_t c_count = params.prevalence.size();
  PredictionSet out;
  out.method = preds.method + "_cal";
  for (const auto& [id, pred] : preds.by_id) {
    if (!pred.ranked) {
      throw ValidationError("record '" + id + "' has no ranked prediction; calibration needs the ranked form");
    }
    pred.ranked->validate(c_count);
    const auto& entries = pred.ranked->entries;
    const std::size_t k = entries.size();
    const auto& alpha = params.alpha_for(entries.front().confidence);

    double alpha_sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) alpha_sum += alpha[j];
    double residual = 1.0 - alpha_sum;
    if (residual < 0.0) residual = 0.0;

    std::vector<double> q(c_count, 0.0);
    if (k == c_count) {
      // Every cause ranked: renormalize the weights over the list.
      if (alpha_sum > 0.0) {
        for (std::size_t j = 0; j < k; ++j) q[entries[j].cause] = alpha[j] / alpha_sum;
      } else {
        for (std::size_t j = 0; j < k; ++j) q[entries[j].cause] = 1.0 / static_cast<double>(k);
      }
    } else {
      std::vector<bool> ranked_mask(c_count, false);
      for (const auto& e : entries) ranked_mask[e.cause] = true;
      const auto w = detail::residual_weights(ranked_mask, params.prevalence);
      for (std::size_t c = 0; c < c_count; ++c) q[c] = residual * w[c];
      for (std::size_t j = 0; j < k; ++j) q[entries[j].cause] = alpha[j];
    }

    Prediction calibrated;
    calibrated.probs = ProbVector::from_ingested(std::move(q));
    calibrated.ranked = pred.ranked;
    out.by_id.emplace(id, std::move(calibrated));
  }
  return out;
}

// Fit against the training cohort: prevalence and (by default) the target are
// the empirical training distribution; `target_override` substitutes r.
inline CalibrationParams fit_calibrator(const PredictionSet& train_preds,
                                        const std::vector<VaRecord>& train_records,
                                        const CauseCodebook& codebook, bool stratify,
                                        const std::optional<PrevalenceVector>& target_override = std::nullopt) {
  const PrevalenceVector prevalence = empirical_prevalence(train_records, codebook);
  const PrevalenceVector target = target_override.value_or(prevalence);
  PredictionSet train_only;
  train_only.method = train_preds.method;
  for (const auto& r : train_records) {
    auto it = train_preds.by_id.find(r.id);
    if (it == train_preds.by_id.end()) {
      throw ValidationError("no prediction for training record '" + r.id + "'");
    }
    train_only.by_id.emplace(r.id, it->second);
  }
  CalibrationLP lp = build_lp(train_only, prevalence, target, stratify);
  return solve_lp(lp);
}

// --- serialization --------------------------------------------------------

inline nlohmann::json calibration_to_json(const CalibrationParams& params) {
  nlohmann::json j;
  const char* names[3] = {"high", "medium", "low"};
  for (std::size_t s = 0; s < 3; ++s) {
    j["alpha"][names[s]] = params.alpha[s];
  }
  j["prevalence"] = params.prevalence.values();
  j["target"] = params.target.values();
  j["objective"] = params.objective;
  j["stratified"] = params.stratified;
  return j;
}

inline CalibrationParams calibration_from_json(const nlohmann::json& j) {
  CalibrationParams params;
  const char* names[3] = {"high", "medium", "low"};
  for (std::size_t s = 0; s < 3; ++s) {
    auto arr = j.at("alpha").at(names[s]).get<std::vector<double>>();
    if (arr.size() != kMaxRanked) throw ValidationError("alpha vector must have 5 entries");
    for (std::size_t i = 0; i < kMaxRanked; ++i) params.alpha[s][i] = arr[i];
  }
  params.prevalence = ProbVector::from_ingested(j.at("prevalence").get<std::vector<double>>());
  params.target = ProbVector::from_ingested(j.at("target").get<std::vector<double>>());
  params.objective = j.at("objective").get<double>();
  params.stratified = j.value("stratified", false);
  params.validate();
  return params;
}

}  // namespace vapipe
