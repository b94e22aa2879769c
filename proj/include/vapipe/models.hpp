#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vapipe/core.hpp"
#include "vapipe/io.hpp"

namespace vapipe {

struct LogRegConfig {
  double lambda = 0.1;
  std::size_t max_iterations = 2000;
  double gradient_tol = 1e-6;  // infinity norm of the full gradient
  std::uint64_t seed = 42;
};

struct TrainMeta {
  std::size_t iterations = 0;
  double final_gradient_norm = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> loss_trace;  // loss after each accepted step
};

// Multinomial logistic model. weights is C x (d+1); the last column is the
// bias and is excluded from the L2 penalty.
struct LogRegModel {
  Eigen::MatrixXd weights;
  double lambda = 0.0;
  TrainMeta train_meta;

  std::size_t classes() const { return static_cast<std::size_t>(weights.rows()); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(weights.cols()) - 1; }
};

namespace detail {

inline Eigen::MatrixXd augment_bias(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setOnes();
  return out;
}

// Row-wise softmax with max-shift for stability.
inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& scores) {
  Eigen::MatrixXd shifted = scores.colwise() - scores.rowwise().maxCoeff();
  Eigen::MatrixXd ex = shifted.array().exp().matrix();
  Eigen::VectorXd sums = ex.rowwise().sum();
  return ex.array().colwise() / sums.array();
}

}  // namespace detail

// Mean cross-entropy plus (lambda/2) * ||W||^2 over the non-bias columns.
// `xa` must already carry the bias column.
inline double logreg_loss(const Eigen::MatrixXd& weights, const Eigen::MatrixXd& xa,
                          const std::vector<std::size_t>& y, double lambda) {
  const Eigen::MatrixXd scores = xa * weights.transpose();
  Eigen::VectorXd max_scores = scores.rowwise().maxCoeff();
  Eigen::VectorXd lse =
      ((scores.colwise() - max_scores).array().exp().rowwise().sum().log()).matrix() + max_scores;
  double nll = 0.0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    nll += lse(i) - scores(i, static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)]));
  }
  nll /= static_cast<double>(scores.rows());
  const auto body = weights.leftCols(weights.cols() - 1);
  return nll + 0.5 * lambda * body.squaredNorm();
}

inline Eigen::MatrixXd logreg_gradient(const Eigen::MatrixXd& weights, const Eigen::MatrixXd& xa,
                                       const std::vector<std::size_t>& y, double lambda) {
  const Eigen::MatrixXd p = detail::softmax_rows(xa * weights.transpose());
  Eigen::MatrixXd delta = p;  // p - onehot(y)
  for (Eigen::Index i = 0; i < delta.rows(); ++i) {
    delta(i, static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)])) -= 1.0;
  }
  Eigen::MatrixXd grad = (delta.transpose() * xa) / static_cast<double>(xa.rows());
  grad.leftCols(grad.cols() - 1) += lambda * weights.leftCols(weights.cols() - 1);
  return grad;
}

// Full-batch gradient descent from zero initialization with Armijo
// backtracking. Stops when the gradient infinity norm drops below
// config.gradient_tol or after config.max_iterations accepted steps.
inline LogRegModel fit_logreg(const Eigen::MatrixXd& x, const std::vector<std::size_t>& y,
                              std::size_t class_count, const LogRegConfig& config = {}) {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  if (n != y.size()) throw ValidationError("feature rows and label count differ");
  if (class_count < 2) throw ValidationError("need at least 2 classes");
  if (n < class_count) {
    throw ValidationError("need at least as many samples (" + std::to_string(n) + ") as classes (" +
                          std::to_string(class_count) + ")");
  }
  if (!x.allFinite()) throw ValidationError("features contain non-finite values");
  for (std::size_t label : y) {
    if (label >= class_count) throw ValidationError("label index out of range");
  }
  if (config.lambda < 0.0) throw ValidationError("lambda must be >= 0");

  const Eigen::MatrixXd xa = detail::augment_bias(x);
  LogRegModel model;
  model.lambda = config.lambda;
  model.train_meta.seed = config.seed;
  model.weights = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(class_count), xa.cols());

  double loss = logreg_loss(model.weights, xa, y, config.lambda);
  model.train_meta.loss_trace.push_back(loss);
  double step = 1.0;
  constexpr double kArmijo = 1e-4;

  std::size_t iter = 0;
  for (; iter < config.max_iterations; ++iter) {
    const Eigen::MatrixXd grad = logreg_gradient(model.weights, xa, y, config.lambda);
    const double grad_inf = grad.cwiseAbs().maxCoeff();
    model.train_meta.final_gradient_norm = grad_inf;
    if (grad_inf < config.gradient_tol) break;

    const double grad_sq = grad.squaredNorm();
    double t = std::min(step * 2.0, 1e6);
    bool accepted = false;
    for (int backtrack = 0; backtrack < 80; ++backtrack) {
      const Eigen::MatrixXd candidate = model.weights - t * grad;
      const double candidate_loss = logreg_loss(candidate, xa, y, config.lambda);
      if (candidate_loss <= loss - kArmijo * t * grad_sq) {
        model.weights = candidate;
        loss = candidate_loss;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;  // step underflow: gradient is numerically flat
    step = t;
    model.train_meta.loss_trace.push_back(loss);
  }
  model.train_meta.iterations = iter;
  {
    const Eigen::MatrixXd grad = logreg_gradient(model.weights, xa, y, config.lambda);
    model.train_meta.final_gradient_norm = grad.cwiseAbs().maxCoeff();
  }
  return model;
}

inline ProbVector softmax_probs(const LogRegModel& model, const Eigen::VectorXd& features) {
  if (static_cast<std::size_t>(features.size()) != model.feature_dim()) {
    throw ValidationError("feature dimension " + std::to_string(features.size()) +
                          " does not match model dimension " + std::to_string(model.feature_dim()));
  }
  Eigen::VectorXd xa(features.size() + 1);
  xa.head(features.size()) = features;
  xa(features.size()) = 1.0;
  Eigen::VectorXd scores = model.weights * xa;
  const double shift = scores.maxCoeff();
  Eigen::VectorXd ex = (scores.array() - shift).exp();
  ex /= ex.sum();
  return ProbVector::from_ingested(std::vector<double>(ex.data(), ex.data() + ex.size()));
}

inline PredictionSet predict_logreg(const LogRegModel& model, const Eigen::MatrixXd& x,
                                    const std::vector<std::string>& ids,
                                    const std::string& method = "embed_logreg") {
  if (static_cast<std::size_t>(x.rows()) != ids.size()) {
    throw ValidationError("feature rows and id count differ");
  }
  PredictionSet set;
  set.method = method;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Prediction pred;
    pred.probs = softmax_probs(model, x.row(static_cast<Eigen::Index>(i)).transpose());
    set.by_id.emplace(ids[i], std::move(pred));
  }
  return set;
}

// Design matrix + aligned labels for a cohort, pulled from the embedding table.
inline std::pair<Eigen::MatrixXd, std::vector<std::string>> embedding_matrix(
    const std::vector<VaRecord>& records, const EmbeddingTable& table) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(table.dim));
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto it = table.by_id.find(records[i].id);
    if (it == table.by_id.end()) {
      throw ValidationError("no embedding for record '" + records[i].id + "'");
    }
    for (std::size_t j = 0; j < table.dim; ++j) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = it->second[j];
    }
    ids.push_back(records[i].id);
  }
  return {std::move(x), std::move(ids)};
}

inline std::vector<std::size_t> label_vector(const std::vector<VaRecord>& records) {
  std::vector<std::size_t> y;
  y.reserve(records.size());
  for (const auto& r : records) {
    if (!r.true_cause) throw ValidationError("record '" + r.id + "' has no gold cause");
    y.push_back(*r.true_cause);
  }
  return y;
}

// Every case receives the same prevalence vector: the floor any model must beat.
inline PredictionSet prior_baseline(const PrevalenceVector& prevalence,
                                    const std::vector<std::string>& ids,
                                    const std::string& method = "prior") {
  PredictionSet set;
  set.method = method;
  for (const auto& id : ids) {
    Prediction pred;
    pred.probs = prevalence;
    set.by_id.emplace(id, std::move(pred));
  }
  return set;
}

// --- ensembles ------------------------------------------------------------

struct EnsembleWeights {
  std::vector<std::string> methods;
  std::vector<double> weights;

  void validate() const {
    if (methods.size() != weights.size()) throw ValidationError("method/weight count mismatch");
    double sum = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw ValidationError("ensemble weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > kProbSumTol) throw ValidationError("ensemble weights must sum to 1");
  }
};

namespace detail {

// Dense per-record probability rows for each method, aligned to `records`.
inline std::vector<std::vector<const ProbVector*>> prob_rows(
    const std::vector<const PredictionSet*>& sets, const std::vector<VaRecord>& records) {
  std::vector<std::vector<const ProbVector*>> rows(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    rows[i].reserve(sets.size());
    for (const auto* set : sets) {
      auto it = set->by_id.find(records[i].id);
      if (it == set->by_id.end()) {
        throw ValidationError("method '" + set->method + "' missing prediction for '" + records[i].id + "'");
      }
      if (!it->second.probs) {
        throw ValidationError("method '" + set->method + "' has no probability form for '" +
                              records[i].id + "'; vectorize ranked output first");
      }
      rows[i].push_back(&*it->second.probs);
    }
  }
  return rows;
}

// All lattice points with `parts` nonnegative weights summing to 1 at the
// given spacing, in lexicographic order.
inline void enumerate_simplex(std::size_t parts, std::size_t ticks,
                              std::vector<std::size_t>& current,
                              const std::function<void(const std::vector<std::size_t>&)>& visit) {
  if (current.size() + 1 == parts) {
    current.push_back(ticks);
    visit(current);
    current.pop_back();
    return;
  }
  for (std::size_t t = 0; t <= ticks; ++t) {
    current.push_back(t);
    enumerate_simplex(parts, ticks - t, current, visit);
    current.pop_back();
  }
}

}  // namespace detail

// Exhaustive search over the simplex lattice. Highest OOF Top-1 wins; ties
// break to higher OOF CSMF, then to the lexicographically smallest weights.
inline EnsembleWeights fit_weighted_ensemble(const std::vector<const PredictionSet*>& oof_sets,
                                             const std::vector<VaRecord>& records,
                                             double grid_step = 0.05) {
  if (oof_sets.empty()) throw ValidationError("ensemble needs at least one method");
  if (records.empty()) throw ValidationError("ensemble needs a labeled cohort");
  const double ticks_f = 1.0 / grid_step;
  const std::size_t ticks = static_cast<std::size_t>(std::llround(ticks_f));
  if (ticks == 0 || std::abs(ticks_f - static_cast<double>(ticks)) > 1e-9) {
    throw ValidationError("grid step must divide 1 exactly");
  }

  const std::size_t m = oof_sets.size();
  const auto rows = detail::prob_rows(oof_sets, records);
  const std::size_t c_count = rows.front().front()->size();
  const auto y = label_vector(records);

  std::vector<double> true_prev(c_count, 0.0);
  for (std::size_t label : y) true_prev[label] += 1.0;
  double min_prev = 1.0;
  for (double& v : true_prev) {
    v /= static_cast<double>(records.size());
    min_prev = std::min(min_prev, v);
  }

  EnsembleWeights best;
  double best_top1 = -1.0, best_csmf = -1.0;
  std::vector<double> combined(c_count), mean_combined(c_count);
  std::vector<std::size_t> scratch;

  const std::function<void(const std::vector<std::size_t>&)> evaluate =
      [&](const std::vector<std::size_t>& lattice) {
        std::vector<double> w(m);
        for (std::size_t j = 0; j < m; ++j) w[j] = static_cast<double>(lattice[j]) * grid_step;

        std::size_t hits = 0;
        std::fill(mean_combined.begin(), mean_combined.end(), 0.0);
        for (std::size_t i = 0; i < records.size(); ++i) {
          std::fill(combined.begin(), combined.end(), 0.0);
          for (std::size_t j = 0; j < m; ++j) {
            const auto& p = rows[i][j]->values();
            for (std::size_t c = 0; c < c_count; ++c) combined[c] += w[j] * p[c];
          }
          std::size_t arg = 0;
          for (std::size_t c = 1; c < c_count; ++c) {
            if (combined[c] > combined[arg]) arg = c;
          }
          if (arg == y[i]) ++hits;
          for (std::size_t c = 0; c < c_count; ++c) mean_combined[c] += combined[c];
        }
        const double top1 = static_cast<double>(hits) / static_cast<double>(records.size());
        double l1 = 0.0;
        for (std::size_t c = 0; c < c_count; ++c) {
          l1 += std::abs(mean_combined[c] / static_cast<double>(records.size()) - true_prev[c]);
        }
        const double csmf = 1.0 - l1 / (2.0 * (1.0 - min_prev));

        // Lexicographic enumeration order means later candidates are larger;
        // strict improvement is required to displace the incumbent.
        if (top1 > best_top1 + 1e-12 ||
            (std::abs(top1 - best_top1) <= 1e-12 && csmf > best_csmf + 1e-12)) {
          best_top1 = top1;
          best_csmf = csmf;
          best.weights = w;
        }
      };
  detail::enumerate_simplex(m, ticks, scratch, evaluate);

  for (const auto* set : oof_sets) best.methods.push_back(set->method);
  best.validate();
  return best;
}

inline PredictionSet apply_weighted_ensemble(const EnsembleWeights& weights,
                                             const std::vector<const PredictionSet*>& sets,
                                             const std::string& method = "weighted_ensemble") {
  weights.validate();
  if (sets.size() != weights.methods.size()) throw ValidationError("weight/method count mismatch");
  for (std::size_t j = 0; j < sets.size(); ++j) {
    if (sets[j]->method != weights.methods[j]) {
      throw ValidationError("method order mismatch: expected '" + weights.methods[j] + "', got '" +
                            sets[j]->method + "'");
    }
  }
  const auto& ids = sets.front()->by_id;
  PredictionSet out;
  out.method = method;
  for (const auto& [id, first_pred] : ids) {
    if (!first_pred.probs) throw ValidationError("ensemble inputs need the probability form");
    std::vector<double> combined(first_pred.probs->size(), 0.0);
    for (std::size_t j = 0; j < sets.size(); ++j) {
      auto it = sets[j]->by_id.find(id);
      if (it == sets[j]->by_id.end()) {
        throw ValidationError("method '" + sets[j]->method + "' missing prediction for '" + id + "'");
      }
      if (!it->second.probs || it->second.probs->size() != combined.size()) {
        throw ValidationError("method '" + sets[j]->method + "' prediction shape mismatch for '" + id + "'");
      }
      const auto& p = it->second.probs->values();
      for (std::size_t c = 0; c < combined.size(); ++c) combined[c] += weights.weights[j] * p[c];
    }
    Prediction pred;
    pred.probs = ProbVector::from_ingested(std::move(combined));
    out.by_id.emplace(id, std::move(pred));
  }
  for (const auto* set : sets) {
    if (set->by_id.size() != out.by_id.size()) {
      throw ValidationError("method '" + set->method + "' covers a different id set");
    }
  }
  return out;
}

// --- stacking meta-learner --------------------------------------------------

// Logistic meta-learner over concatenated per-method probabilities. The
// method order is part of the model; predict-time inputs must match it.
struct StackerModel {
  LogRegModel model;
  std::vector<std::string> method_order;
  std::size_t cause_count = 0;
};

namespace detail {

inline Eigen::MatrixXd stacked_features(const std::vector<const PredictionSet*>& sets,
                                        const std::vector<std::string>& ids, std::size_t c_count) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(ids.size()),
                    static_cast<Eigen::Index>(sets.size() * c_count));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = 0; j < sets.size(); ++j) {
      auto it = sets[j]->by_id.find(ids[i]);
      if (it == sets[j]->by_id.end()) {
        throw ValidationError("method '" + sets[j]->method + "' missing prediction for '" + ids[i] + "'");
      }
      if (!it->second.probs || it->second.probs->size() != c_count) {
        throw ValidationError("method '" + sets[j]->method + "' prediction shape mismatch for '" +
                              ids[i] + "'");
      }
      for (std::size_t c = 0; c < c_count; ++c) {
        x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j * c_count + c)) =
            (*it->second.probs)[c];
      }
    }
  }
  return x;
}

}  // namespace detail

inline StackerModel fit_stacker(const std::vector<const PredictionSet*>& oof_sets,
                                const std::vector<VaRecord>& records, std::size_t cause_count,
                                const LogRegConfig& config = {}) {
  if (oof_sets.empty()) throw ValidationError("stacker needs at least one base method");
  StackerModel stacker;
  stacker.cause_count = cause_count;
  for (const auto* set : oof_sets) stacker.method_order.push_back(set->method);
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.id);
  const Eigen::MatrixXd x = detail::stacked_features(oof_sets, ids, cause_count);
  stacker.model = fit_logreg(x, label_vector(records), cause_count, config);
  return stacker;
}

inline PredictionSet predict_stacker(const StackerModel& stacker,
                                     const std::vector<const PredictionSet*>& sets,
                                     const std::string& method = "stacker") {
  if (sets.size() != stacker.method_order.size()) {
    throw ValidationError("stacker was fit on " + std::to_string(stacker.method_order.size()) +
                          " methods, got " + std::to_string(sets.size()));
  }
  for (std::size_t j = 0; j < sets.size(); ++j) {
    if (sets[j]->method != stacker.method_order[j]) {
      throw ValidationError("stacker method order mismatch: expected '" + stacker.method_order[j] +
                            "' at position " + std::to_string(j) + ", got '" + sets[j]->method + "'");
    }
  }
  std::vector<std::string> ids;
  for (const auto& [id, _] : sets.front()->by_id) ids.push_back(id);
  const Eigen::MatrixXd x = detail::stacked_features(sets, ids, stacker.cause_count);
  return predict_logreg(stacker.model, x, ids, method);
}

// --- serialization ----------------------------------------------------------

inline nlohmann::json logreg_to_json(const LogRegModel& model) {
  nlohmann::json j;
  j["classes"] = model.classes();
  j["feature_dim"] = model.feature_dim();
  j["lambda"] = model.lambda;
  std::vector<double> flat(model.weights.size());
  for (Eigen::Index r = 0; r < model.weights.rows(); ++r) {
    for (Eigen::Index c = 0; c < model.weights.cols(); ++c) {
      flat[static_cast<std::size_t>(r * model.weights.cols() + c)] = model.weights(r, c);
    }
  }
  j["weights"] = flat;  // row-major, bias last per row
  j["train_meta"] = {{"iterations", model.train_meta.iterations},
                     {"final_gradient_norm", model.train_meta.final_gradient_norm},
                     {"seed", model.train_meta.seed}};
  return j;
}

inline LogRegModel logreg_from_json(const nlohmann::json& j) {
  LogRegModel model;
  const auto classes = j.at("classes").get<std::size_t>();
  const auto dim = j.at("feature_dim").get<std::size_t>();
  const auto flat = j.at("weights").get<std::vector<double>>();
  if (flat.size() != classes * (dim + 1)) throw ValidationError("model weight shape mismatch");
  model.weights.resize(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim + 1));
  for (std::size_t r = 0; r < classes; ++r) {
    for (std::size_t c = 0; c <= dim; ++c) {
      model.weights(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = flat[r * (dim + 1) + c];
    }
  }
  if (!model.weights.allFinite()) throw ValidationError("model weights must be finite");
  model.lambda = j.at("lambda").get<double>();
  if (j.contains("train_meta")) {
    model.train_meta.iterations = j["train_meta"].value("iterations", std::size_t{0});
    model.train_meta.final_gradient_norm = j["train_meta"].value("final_gradient_norm", 0.0);
    model.train_meta.seed = j["train_meta"].value("seed", std::uint64_t{0});
  }
  return model;
}

inline nlohmann::json stacker_to_json(const StackerModel& stacker) {
  nlohmann::json j = logreg_to_json(stacker.model);
  j["method_order"] = stacker.method_order;
  j["cause_count"] = stacker.cause_count;
  return j;
}

inline StackerModel stacker_from_json(const nlohmann::json& j) {
  StackerModel stacker;
  stacker.model = logreg_from_json(j);
  stacker.method_order = j.at("method_order").get<std::vector<std::string>>();
  stacker.cause_count = j.at("cause_count").get<std::size_t>();
  return stacker;
}

inline nlohmann::json ensemble_to_json(const EnsembleWeights& weights) {
  return {{"methods", weights.methods}, {"weights", weights.weights}};
}

inline EnsembleWeights ensemble_from_json(const nlohmann::json& j) {
  EnsembleWeights w;
  w.methods = j.at("methods").get<std::vector<std::string>>();
  w.weights = j.at("weights").get<std::vector<double>>();
  w.validate();
  return w;
}

}  // namespace vapipe
