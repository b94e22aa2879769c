#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vapipe/calibrate.hpp"
#include "vapipe/core.hpp"
#include "vapipe/io.hpp"
#include "vapipe/metrics.hpp"
#include "vapipe/models.hpp"
#include "vapipe/synth.hpp"

namespace vapipe {

struct InnerSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
};

struct Fold {
  std::string test_site;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::vector<InnerSplit> inner;
};

struct FoldPlan {
  std::vector<Fold> folds;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
stratified_kfold_indices(const std::vector<std::size_t>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("k must be >= 2");
  if (k > labels.size()) {
    throw ValidationError("k=" + std::to_string(k) + " exceeds sample count " +
                          std::to_string(labels.size()));
  }
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  std::vector<std::vector<std::size_t>> fold_members(k);
  std::mt19937_64 rng(seed);
  std::size_t offset = 0;  // rolling start keeps overall fold sizes balanced
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i = 0; i < members.size(); ++i) {
      fold_members[(offset + i) % k].push_back(members[i]);
    }
    offset = (offset + members.size()) % k;
  }

  std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> splits(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(fold_members[f].begin(), fold_members[f].end());
    splits[f].second = fold_members[f];
    for (std::size_t g = 0; g < k; ++g) {
      if (g == f) continue;
      splits[f].first.insert(splits[f].first.end(), fold_members[g].begin(), fold_members[g].end());
    }
    std::sort(splits[f].first.begin(), splits[f].first.end());
  }
  return splits;
}

}  // namespace detail

// Per-class counts across folds differ by at most one; deterministic given seed.
inline std::vector<InnerSplit> stratified_kfold(const std::vector<std::string>& ids,
                                                const std::vector<std::size_t>& labels, std::size_t k,
                                                std::uint64_t seed) {
  if (ids.size() != labels.size()) throw ValidationError("id and label counts differ");
  auto index_splits = detail::stratified_kfold_indices(labels, k, seed);
  std::vector<InnerSplit> splits;
  splits.reserve(index_splits.size());
  for (auto& [train_idx, val_idx] : index_splits) {
    InnerSplit split;
    for (std::size_t i : train_idx) split.train_ids.push_back(ids[i]);
    for (std::size_t i : val_idx) split.validation_ids.push_back(ids[i]);
    splits.push_back(std::move(split));
  }
  return splits;
}

// One fold per site, each with stratified inner splits of its training ids.
// inner_k is clamped down when a fold's training set is smaller than it.
inline FoldPlan loso_split(const std::vector<VaRecord>& records, std::uint64_t seed,
                           std::size_t inner_k = 5) {
  std::map<std::string, std::vector<const VaRecord*>> by_site;
  for (const auto& r : records) by_site[r.site].push_back(&r);
  if (by_site.size() < 2) {
    throw ValidationError("leave-one-site-out needs at least 2 distinct sites, got " +
                          std::to_string(by_site.size()));
  }
  FoldPlan plan;
  plan.seed = seed;
  std::size_t fold_index = 0;
  for (const auto& [site, _] : by_site) {
    Fold fold;
    fold.test_site = site;
    std::vector<std::size_t> train_labels;
    for (const auto& r : records) {
      if (r.site == site) {
        fold.test_ids.push_back(r.id);
      } else {
        fold.train_ids.push_back(r.id);
        if (!r.true_cause) throw ValidationError("record '" + r.id + "' has no gold cause");
        train_labels.push_back(*r.true_cause);
      }
    }
    const std::size_t k = std::min(inner_k, fold.train_ids.size());
    if (k < 2) throw ValidationError("fold '" + site + "' has too few training records to split");
    fold.inner = stratified_kfold(fold.train_ids, train_labels, k,
                                  detail::mix_seed(seed, fold_index));
    plan.folds.push_back(std::move(fold));
    ++fold_index;
  }
  return plan;
}

// Conventional stratified random split: fold f is "held out" as if it were a
// site named fold-f. Same downstream machinery as LOSO.
inline FoldPlan random_split(const std::vector<VaRecord>& records, std::size_t folds,
                             std::uint64_t seed, std::size_t inner_k = 5) {
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  for (const auto& r : records) {
    ids.push_back(r.id);
    if (!r.true_cause) throw ValidationError("record '" + r.id + "' has no gold cause");
    labels.push_back(*r.true_cause);
  }
  auto outer = stratified_kfold(ids, labels, folds, seed);
  std::map<std::string, std::size_t> label_of;
  for (std::size_t i = 0; i < ids.size(); ++i) label_of[ids[i]] = labels[i];

  FoldPlan plan;
  plan.seed = seed;
  for (std::size_t f = 0; f < outer.size(); ++f) {
    Fold fold;
    fold.test_site = "fold-" + std::to_string(f);
    fold.train_ids = outer[f].train_ids;
    fold.test_ids = outer[f].validation_ids;
    std::vector<std::size_t> train_labels;
    for (const auto& id : fold.train_ids) train_labels.push_back(label_of[id]);
    const std::size_t k = std::min(inner_k, fold.train_ids.size());
    if (k < 2) throw ValidationError("fold " + std::to_string(f) + " has too few training records");
    fold.inner = stratified_kfold(fold.train_ids, train_labels, k, detail::mix_seed(seed, 1000 + f));
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

// Hard stop on train/test contamination. Every consumer of a fold calls this
// before touching data.
inline void assert_no_leakage(const Fold& fold) {
  std::set<std::string> train(fold.train_ids.begin(), fold.train_ids.end());
  for (const auto& id : fold.test_ids) {
    if (train.count(id)) {
      throw std::runtime_error("leakage detected: test id '" + id + "' appears in fold '" +
                               fold.test_site + "' training ids");
    }
  }
  std::set<std::string> validation_union;
  for (const auto& split : fold.inner) {
    std::set<std::string> inner_train(split.train_ids.begin(), split.train_ids.end());
    for (const auto& id : split.validation_ids) {
      if (inner_train.count(id)) {
        throw std::runtime_error("leakage detected: id '" + id + "' in both sides of an inner split");
      }
      if (!train.count(id)) {
        throw std::runtime_error("leakage detected: inner validation id '" + id +
                                 "' is not a training id of fold '" + fold.test_site + "'");
      }
      validation_union.insert(id);
    }
    for (const auto& id : split.train_ids) {
      if (!train.count(id)) {
        throw std::runtime_error("leakage detected: inner train id '" + id +
                                 "' is not a training id of fold '" + fold.test_site + "'");
      }
    }
  }
  if (!fold.inner.empty() && validation_union.size() != train.size()) {
    throw std::runtime_error("inner validation sets do not partition fold '" + fold.test_site +
                             "' training ids");
  }
}

// --- experiment configuration ----------------------------------------------

struct MethodSpec {
  enum class Kind { prior, embed_logreg, external };
  std::string name;
  Kind kind = Kind::external;
  std::string path;        // external prediction JSONL
  bool calibrate = false;  // fit + score a "<name>_cal" variant
};

struct ExperimentOptions {
  std::vector<MethodSpec> methods;
  std::vector<double> lambda_grid = {0.01, 0.1, 1.0, 10.0};
  double grid_step = 0.05;
  bool stratified_calibration = true;
  bool ensembles = true;
  std::string split = "loso";  // or "random"
  std::size_t random_folds = 5;
  std::size_t inner_k = 5;
  std::uint64_t seed = 42;
  std::vector<std::size_t> length_boundaries = {250, 500, 1000};
};

struct ExperimentInputs {
  std::vector<VaRecord> records;
  std::optional<EmbeddingTable> embeddings;
  std::map<std::string, PredictionSet> external;  // keyed by method name
};

struct ExperimentResult {
  std::vector<EvalReport> per_site;
  std::vector<PooledReport> pooled;
};

namespace detail {

inline std::map<std::string, const VaRecord*> record_index(const std::vector<VaRecord>& records) {
  std::map<std::string, const VaRecord*> index;
  for (const auto& r : records) {
    if (!index.emplace(r.id, &r).second) throw ValidationError("duplicate record id '" + r.id + "'");
  }
  return index;
}

inline std::vector<VaRecord> select_records(const std::map<std::string, const VaRecord*>& index,
                                            const std::vector<std::string>& ids) {
  std::vector<VaRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw ValidationError("unknown record id '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

inline PredictionSet restrict_set(const PredictionSet& set, const std::vector<std::string>& ids) {
  PredictionSet out;
  out.method = set.method;
  for (const auto& id : ids) {
    auto it = set.by_id.find(id);
    if (it == set.by_id.end()) {
      throw ValidationError("method '" + set.method + "' has no prediction for record '" + id + "'");
    }
    out.by_id.emplace(id, it->second);
  }
  return out;
}

// Guarantee the dense probability form (one-hot from rank 1 when absent) so
// ensembles and stacking have a uniform feature space.
inline PredictionSet with_probs(const PredictionSet& set, std::size_t cause_count) {
  PredictionSet out;
  out.method = set.method;
  for (const auto& [id, pred] : set.by_id) {
    Prediction next = pred;
    if (!next.probs) next.probs = to_prob_vector(pred, cause_count);
    out.by_id.emplace(id, std::move(next));
  }
  return out;
}

// Inner-CV Top-1 over the lambda grid; ties keep the earlier grid entry.
inline double select_lambda(const Eigen::MatrixXd& x, const std::vector<std::size_t>& y,
                            std::size_t cause_count, const std::vector<double>& grid,
                            std::size_t k, std::uint64_t seed) {
  if (grid.empty()) throw ValidationError("lambda grid is empty");
  if (grid.size() == 1) return grid.front();
  auto splits = stratified_kfold_indices(y, std::min(k, y.size()), seed);
  double best_lambda = grid.front();
  double best_top1 = -1.0;
  for (double lambda : grid) {
    std::size_t hits = 0, total = 0;
    for (const auto& [train_idx, val_idx] : splits) {
      Eigen::MatrixXd xt(static_cast<Eigen::Index>(train_idx.size()), x.cols());
      std::vector<std::size_t> yt;
      yt.reserve(train_idx.size());
      for (std::size_t i = 0; i < train_idx.size(); ++i) {
        xt.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(train_idx[i]));
        yt.push_back(y[train_idx[i]]);
      }
      LogRegConfig config;
      config.lambda = lambda;
      LogRegModel model;
      try {
        model = fit_logreg(xt, yt, cause_count, config);
      } catch (const ValidationError&) {
        continue;  // inner split smaller than the class count
      }
      for (std::size_t i : val_idx) {
        const ProbVector probs = softmax_probs(model, x.row(static_cast<Eigen::Index>(i)).transpose());
        if (probs.argmax() == y[i]) ++hits;
        ++total;
      }
    }
    const double top1 = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
    if (top1 > best_top1 + 1e-12) {
      best_top1 = top1;
      best_lambda = lambda;
    }
  }
  return best_lambda;
}

}  // namespace detail

// One fold's per-method outputs: out-of-fold predictions over the training
// ids plus test-site predictions from models refit on the full fold.
struct FoldMethodOutput {
  PredictionSet oof;
  PredictionSet test;
};

// Run the experiment against an explicit fold plan. run_experiment builds the
// plan; tests inject corrupted plans here to prove the leakage guard trips.
inline ExperimentResult run_experiment_with_plan(const ExperimentOptions& options,
                                                 const ExperimentInputs& inputs,
                                                 const CauseCodebook& codebook, const FoldPlan& plan) {
  if (options.methods.empty()) throw ValidationError("experiment needs at least one method");
  {
    std::set<std::string> names;
    for (const auto& m : options.methods) {
      if (!names.insert(m.name).second) throw ValidationError("duplicate method name '" + m.name + "'");
    }
  }
  const auto index = detail::record_index(inputs.records);
  const std::size_t c_count = codebook.size();

  std::map<std::string, std::vector<EvalReport>> by_method;
  auto score = [&](const PredictionSet& preds, const std::vector<VaRecord>& test_records,
                   const std::string& site) {
    EvalReport report = build_report(preds, test_records, codebook, site, options.length_boundaries);
    by_method[report.method].push_back(report);
  };

  for (const auto& fold : plan.folds) {
    assert_no_leakage(fold);
    const std::vector<VaRecord> train_records = detail::select_records(index, fold.train_ids);
    const std::vector<VaRecord> test_records = detail::select_records(index, fold.test_ids);
    const PrevalenceVector train_prevalence = empirical_prevalence(train_records, codebook);

    std::vector<FoldMethodOutput> outputs;
    std::vector<const PredictionSet*> oof_sets, test_sets;

    for (const auto& method : options.methods) {
      FoldMethodOutput out;
      switch (method.kind) {
        case MethodSpec::Kind::prior: {
          // OOF discipline still applies: each inner validation block gets the
          // prevalence of its inner training block.
          out.oof.method = method.name;
          for (const auto& split : fold.inner) {
            const auto inner_train = detail::select_records(index, split.train_ids);
            const PrevalenceVector prev = empirical_prevalence(inner_train, codebook);
            for (const auto& id : split.validation_ids) {
              Prediction pred;
              pred.probs = prev;
              out.oof.by_id.emplace(id, std::move(pred));
            }
          }
          out.test = prior_baseline(train_prevalence, fold.test_ids, method.name);
          break;
        }
        case MethodSpec::Kind::embed_logreg: {
          if (!inputs.embeddings) {
            throw ValidationError("method '" + method.name + "' needs an embedding table");
          }
          const auto [x_train, train_ids] = embedding_matrix(train_records, *inputs.embeddings);
          const auto y_train = label_vector(train_records);
          const double lambda =
              detail::select_lambda(x_train, y_train, c_count, options.lambda_grid,
                                    options.inner_k, plan.seed ^ 0x6c616d62);
          LogRegConfig config;
          config.lambda = lambda;
          config.seed = plan.seed;

          // Out-of-fold predictions at the selected lambda.
          out.oof.method = method.name;
          std::map<std::string, std::size_t> row_of;
          for (std::size_t i = 0; i < train_ids.size(); ++i) row_of[train_ids[i]] = i;
          for (const auto& split : fold.inner) {
            Eigen::MatrixXd xi(static_cast<Eigen::Index>(split.train_ids.size()), x_train.cols());
            std::vector<std::size_t> yi;
            for (std::size_t i = 0; i < split.train_ids.size(); ++i) {
              const std::size_t row = row_of.at(split.train_ids[i]);
              xi.row(static_cast<Eigen::Index>(i)) = x_train.row(static_cast<Eigen::Index>(row));
              yi.push_back(y_train[row]);
            }
            const LogRegModel inner_model = fit_logreg(xi, yi, c_count, config);
            for (const auto& id : split.validation_ids) {
              const std::size_t row = row_of.at(id);
              Prediction pred;
              pred.probs =
                  softmax_probs(inner_model, x_train.row(static_cast<Eigen::Index>(row)).transpose());
              out.oof.by_id.emplace(id, std::move(pred));
            }
          }

          // Refit on the full in-fold data before touching the held-out site.
          const LogRegModel model = fit_logreg(x_train, y_train, c_count, config);
          const auto [x_test, test_ids] = embedding_matrix(test_records, *inputs.embeddings);
          out.test = predict_logreg(model, x_test, test_ids, method.name);
          break;
        }
        case MethodSpec::Kind::external: {
          auto it = inputs.external.find(method.name);
          if (it == inputs.external.end()) {
            throw ValidationError("no external prediction set loaded for method '" + method.name + "'");
          }
          out.oof = detail::restrict_set(it->second, fold.train_ids);
          out.oof.method = method.name;
          out.test = detail::restrict_set(it->second, fold.test_ids);
          out.test.method = method.name;
          break;
        }
      }
      outputs.push_back(std::move(out));
    }

    // Score raw methods and optional calibrated variants.
    for (std::size_t m = 0; m < options.methods.size(); ++m) {
      score(outputs[m].test, test_records, fold.test_site);
      if (options.methods[m].calibrate) {
        const CalibrationParams params = fit_calibrator(outputs[m].oof, train_records, codebook,
                                                        options.stratified_calibration);
        score(apply_calibration(outputs[m].test, params), test_records, fold.test_site);
      }
    }

    if (options.ensembles && options.methods.size() >= 2) {
      std::vector<PredictionSet> oof_probs, test_probs;
      for (const auto& out : outputs) {
        oof_probs.push_back(detail::with_probs(out.oof, c_count));
        test_probs.push_back(detail::with_probs(out.test, c_count));
      }
      oof_sets.clear();
      test_sets.clear();
      for (std::size_t m = 0; m < outputs.size(); ++m) {
        oof_sets.push_back(&oof_probs[m]);
        test_sets.push_back(&test_probs[m]);
      }
      const EnsembleWeights weights = fit_weighted_ensemble(oof_sets, train_records, options.grid_step);
      score(apply_weighted_ensemble(weights, test_sets), test_records, fold.test_site);

      const auto y_train = label_vector(train_records);
      LogRegConfig stack_config;
      stack_config.seed = plan.seed;
      {
        std::vector<std::string> train_ids;
        for (const auto& r : train_records) train_ids.push_back(r.id);
        const Eigen::MatrixXd x_stack = detail::stacked_features(oof_sets, train_ids, c_count);
        stack_config.lambda = detail::select_lambda(x_stack, y_train, c_count, options.lambda_grid,
                                                    options.inner_k, plan.seed ^ 0x737461636b);
      }
      const StackerModel stacker = fit_stacker(oof_sets, train_records, c_count, stack_config);
      score(predict_stacker(stacker, test_sets), test_records, fold.test_site);
    }
  }

  ExperimentResult result;
  for (const auto& method : options.methods) {
    auto append = [&](const std::string& name) {
      auto it = by_method.find(name);
      if (it == by_method.end()) return;
      for (const auto& r : it->second) result.per_site.push_back(r);
      result.pooled.push_back(pool_reports(it->second));
    };
    append(method.name);
    if (method.calibrate) append(method.name + "_cal");
  }
  for (const auto& name : {std::string("weighted_ensemble"), std::string("stacker")}) {
    auto it = by_method.find(name);
    if (it != by_method.end()) {
      for (const auto& r : it->second) result.per_site.push_back(r);
      result.pooled.push_back(pool_reports(it->second));
    }
  }
  return result;
}

inline ExperimentResult run_experiment(const ExperimentOptions& options, const ExperimentInputs& inputs,
                                       const CauseCodebook& codebook) {
  FoldPlan plan;
  if (options.split == "loso") {
    plan = loso_split(inputs.records, options.seed, options.inner_k);
  } else if (options.split == "random") {
    plan = random_split(inputs.records, options.random_folds, options.seed, options.inner_k);
  } else {
    throw ValidationError("unknown split mode '" + options.split + "' (expected loso or random)");
  }
  return run_experiment_with_plan(options, inputs, codebook, plan);
}

}  // namespace vapipe
