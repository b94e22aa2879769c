// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Each criterion is self-contained and deterministic.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vapipe/calibrate.hpp"
#include "vapipe/codebooks.hpp"
#include "vapipe/harness.hpp"
#include "vapipe/io.hpp"
#include "vapipe/llm.hpp"
#include "vapipe/metrics.hpp"
#include "vapipe/models.hpp"
#include "vapipe/synth.hpp"
#include "test_helpers.hpp"

using namespace vapipe;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

#define EXPECT(cond)                                                                         \
  do {                                                                                       \
    if (!(cond)) throw std::runtime_error(std::string("expectation failed: ") + #cond +     \
                                          " (line " + std::to_string(__LINE__) + ")");      \
  } while (0)

PredictionSet one_hot_predictions(const std::vector<VaRecord>& records, std::size_t c_count,
                                  const std::function<std::size_t(const VaRecord&)>& pick,
                                  const std::string& method) {
  PredictionSet set;
  set.method = method;
  for (const auto& r : records) {
    Prediction pred;
    pred.probs = one_hot(c_count, pick(r));
    set.by_id.emplace(r.id, std::move(pred));
  }
  return set;
}

// --- criterion bodies -------------------------------------------------------

void csmf_metric_identities() {
  // Perfect aggregate -> exactly 1.
  std::vector<VaRecord> records;
  PredictionSet perfect;
  perfect.method = "m";
  for (int i = 0; i < 10; ++i) {
    const std::size_t truth = i < 5 ? 0 : (i < 8 ? 1 : 2);
    records.push_back(testing::make_record("r" + std::to_string(i), "s", truth));
    Prediction pred;
    pred.probs = one_hot(3, truth);
    perfect.by_id.emplace(records.back().id, std::move(pred));
  }
  EXPECT(csmf_accuracy(perfect, records, 3) == 1.0);

  // All mass on the unique rarest cause -> 0 within 1e-12.
  PredictionSet rarest;
  rarest.method = "m";
  for (const auto& r : records) {
    Prediction pred;
    pred.probs = one_hot(3, 2);
    rarest.by_id.emplace(r.id, std::move(pred));
  }
  EXPECT(std::abs(csmf_accuracy(rarest, records, 3)) <= 1e-12);

  // Hand-computed Eq.-style case: truth (0.5,0.3,0.2), mean (0.4,0.4,0.2).
  PredictionSet fixed;
  fixed.method = "m";
  for (const auto& r : records) {
    Prediction pred;
    pred.probs = ProbVector(std::vector<double>{0.4, 0.4, 0.2});
    fixed.by_id.emplace(r.id, std::move(pred));
  }
  EXPECT(std::abs(csmf_accuracy(fixed, records, 3) - 0.875) <= 1e-12);
}

void calibration_lp_optimality() {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.05, 1.0);
    const std::size_t c_count = 3 + rng() % 3;  // 3..5
    const std::size_t n = 5 + rng() % 46;       // 5..50

    std::vector<double> raw(c_count);
    for (double& v : raw) v = unit(rng);
    const auto prevalence = normalize(raw).values();
    for (double& v : raw) v = unit(rng);
    const auto target = normalize(raw).values();

    PredictionSet preds;
    preds.method = "llm";
    std::vector<testing::OracleCase> cases;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = 1 + rng() % std::min<std::size_t>(kMaxRanked, c_count - 1);
      std::vector<std::size_t> order(c_count);
      for (std::size_t c = 0; c < c_count; ++c) order[c] = c;
      std::shuffle(order.begin(), order.end(), rng);
      testing::OracleCase oc;
      RankedPrediction ranked;
      for (std::size_t j = 0; j < k; ++j) {
        oc.ranked.push_back(order[j]);
        ranked.entries.push_back({order[j], Confidence::medium});
      }
      cases.push_back(oc);
      Prediction pred;
      pred.ranked = ranked;
      preds.by_id.emplace("case-" + std::to_string(i), std::move(pred));
    }

    const auto cal = build_lp(preds, ProbVector::from_ingested(prevalence),
                              ProbVector::from_ingested(target), false);
    const auto params = solve_lp(cal);
    const double grid = testing::oracle_grid_minimum(cases, prevalence, target, 100);
    EXPECT(params.objective <= grid + 1e-6);
    // The reported objective is really attained at the returned alpha.
    const std::vector<double> alpha(params.alpha[1].begin(), params.alpha[1].end());
    EXPECT(std::abs(testing::oracle_objective(cases, {alpha}, prevalence, target) -
                    params.objective) <= 1e-9);
  }
}

void calibration_rank_preservation() {
  std::mt19937_64 rng(555);
  for (int cohort = 0; cohort < 5; ++cohort) {
    const std::size_t c_count = 6 + cohort;
    const auto book = testing::small_codebook(c_count);
    std::vector<VaRecord> records;
    PredictionSet preds;
    preds.method = "llm";
    for (int i = 0; i < 80; ++i) {
      records.push_back(testing::make_record("r" + std::to_string(i), "s", rng() % c_count));
      std::vector<std::size_t> order(c_count);
      for (std::size_t c = 0; c < c_count; ++c) order[c] = c;
      std::shuffle(order.begin(), order.end(), rng);
      RankedPrediction ranked;
      const std::size_t k = 1 + rng() % kMaxRanked;
      for (std::size_t j = 0; j < k; ++j) {
        ranked.entries.push_back({order[j], static_cast<Confidence>(rng() % 3)});
      }
      Prediction pred;
      pred.ranked = ranked;
      preds.by_id.emplace(records.back().id, std::move(pred));
    }
    const auto params = fit_calibrator(preds, records, book, true);
    const auto calibrated = apply_calibration(preds, params);
    // Bit-identical, not merely close.
    EXPECT(top_k_accuracy(calibrated, records, 1) == top_k_accuracy(preds, records, 1));
    EXPECT(top_k_accuracy(calibrated, records, 5) == top_k_accuracy(preds, records, 5));
  }
}

void calibration_improves_train_csmf() {
  // Random synthetic cohorts: calibrated never loses to the one-hot default.
  std::mt19937_64 rng(808);
  for (int cohort = 0; cohort < 6; ++cohort) {
    const std::size_t c_count = 4 + cohort % 3;
    const auto book = testing::small_codebook(c_count);
    std::vector<VaRecord> records;
    PredictionSet preds;
    preds.method = "llm";
    for (int i = 0; i < 60; ++i) {
      const std::size_t truth = rng() % c_count;
      records.push_back(testing::make_record("r" + std::to_string(i), "s", truth));
      RankedPrediction ranked;
      const std::size_t top = (rng() % 10) < 4 ? truth : rng() % c_count;
      ranked.entries.push_back({top, Confidence::medium});
      const std::size_t second = (top + 1 + rng() % (c_count - 1)) % c_count;
      ranked.entries.push_back({second, Confidence::medium});
      Prediction pred;
      pred.ranked = ranked;
      preds.by_id.emplace(records.back().id, std::move(pred));
    }
    const auto params = fit_calibrator(preds, records, book, false);
    const auto calibrated = apply_calibration(preds, params);

    CalibrationParams one_hot_default = params;
    for (auto& a : one_hot_default.alpha) a = {1, 0, 0, 0, 0};
    const auto baseline = apply_calibration(preds, one_hot_default);
    EXPECT(csmf_accuracy(calibrated, records, c_count) >=
           csmf_accuracy(baseline, records, c_count) - 1e-9);
  }

  // Engineered systematic rank-1 bias: every case ranks the rare cause first.
  const auto book = testing::small_codebook(3);
  std::vector<VaRecord> records;
  PredictionSet biased;
  biased.method = "llm";
  for (int i = 0; i < 50; ++i) {
    const std::size_t truth = i < 25 ? 0 : (i < 40 ? 1 : 2);
    records.push_back(testing::make_record("r" + std::to_string(i), "s", truth));
    RankedPrediction ranked;
    ranked.entries.push_back({2, Confidence::medium});
    ranked.entries.push_back({0, Confidence::medium});
    Prediction pred;
    pred.ranked = ranked;
    biased.by_id.emplace(records.back().id, std::move(pred));
  }
  const auto params = fit_calibrator(biased, records, book, false);
  const auto calibrated = apply_calibration(biased, params);
  CalibrationParams one_hot_default = params;
  for (auto& a : one_hot_default.alpha) a = {1, 0, 0, 0, 0};
  const auto baseline = apply_calibration(biased, one_hot_default);
  const double gain =
      csmf_accuracy(calibrated, records, 3) - csmf_accuracy(baseline, records, 3);
  EXPECT(gain >= 0.02);
}

void logistic_regression_criteria() {
  // Analytic vs central finite differences at seed 42.
  std::mt19937_64 rng(42);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t n = 15, d = 4, c_count = 3;
  Eigen::MatrixXd x(n, d);
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) = gauss(rng);
    y[i] = i % c_count;
  }
  Eigen::MatrixXd w(c_count, d + 1);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = gauss(rng);
  }
  const Eigen::MatrixXd xa = detail::augment_bias(x);
  const Eigen::MatrixXd analytic = logreg_gradient(w, xa, y, 0.1);
  Eigen::MatrixXd numeric = Eigen::MatrixXd::Zero(w.rows(), w.cols());
  const double h = 1e-5;
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      Eigen::MatrixXd up = w, down = w;
      up(r, c) += h;
      down(r, c) -= h;
      numeric(r, c) = (logreg_loss(up, xa, y, 0.1) - logreg_loss(down, xa, y, 0.1)) / (2 * h);
    }
  }
  EXPECT((analytic - numeric).norm() / numeric.norm() < 1e-5);

  // Separable data: train Top-1 = 1. Loss trace nonincreasing.
  std::mt19937_64 rng2(7);
  Eigen::MatrixXd xs(80, 2);
  std::vector<std::size_t> ys(80);
  for (std::size_t i = 0; i < 80; ++i) {
    const std::size_t label = i % 2;
    ys[i] = label;
    xs(i, 0) = gauss(rng2) + (label ? 4.0 : -4.0);
    xs(i, 1) = gauss(rng2);
  }
  LogRegConfig config;
  config.lambda = 0.01;
  const auto model = fit_logreg(xs, ys, 2, config);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < 80; ++i) {
    if (softmax_probs(model, xs.row(i).transpose()).argmax() == ys[i]) ++hits;
  }
  EXPECT(hits == 80);
  for (std::size_t i = 1; i < model.train_meta.loss_trace.size(); ++i) {
    EXPECT(model.train_meta.loss_trace[i] <= model.train_meta.loss_trace[i - 1] + 1e-12);
  }

  // lambda -> infinity: balanced-class probabilities go uniform within 1e-3.
  LogRegConfig heavy;
  heavy.lambda = 1e6;
  const auto flat = fit_logreg(xs, ys, 2, heavy);
  for (std::size_t i = 0; i < 80; i += 9) {
    const auto p = softmax_probs(flat, xs.row(i).transpose());
    EXPECT(std::abs(p[0] - 0.5) < 1e-3);
  }
}

void harness_integrity() {
  // Partition properties for 2..10 sites.
  for (std::size_t sites = 2; sites <= 10; ++sites) {
    std::mt19937_64 rng(sites);
    std::vector<VaRecord> records;
    for (std::size_t s = 0; s < sites; ++s) {
      for (int i = 0; i < 15; ++i) {
        records.push_back(testing::make_record("s" + std::to_string(s) + "-" + std::to_string(i),
                                               "site" + std::to_string(s), rng() % 3));
      }
    }
    const auto plan = loso_split(records, 77);
    EXPECT(plan.folds.size() == sites);
    std::set<std::string> test_union;
    for (const auto& fold : plan.folds) {
      assert_no_leakage(fold);
      std::set<std::string> train(fold.train_ids.begin(), fold.train_ids.end());
      for (const auto& id : fold.test_ids) {
        EXPECT(!train.count(id));
        EXPECT(test_union.insert(id).second);
      }
    }
    EXPECT(test_union.size() == records.size());
  }

  // Deliberate leakage aborts.
  {
    std::mt19937_64 rng(123);
    std::vector<VaRecord> records;
    for (std::size_t s = 0; s < 3; ++s) {
      for (int i = 0; i < 10; ++i) {
        records.push_back(testing::make_record("x" + std::to_string(s) + "-" + std::to_string(i),
                                               "site" + std::to_string(s), rng() % 3));
      }
    }
    auto plan = loso_split(records, 5);
    plan.folds[0].train_ids.push_back(plan.folds[0].test_ids.front());
    ExperimentOptions options;
    options.methods = {{"prior", MethodSpec::Kind::prior, "", false}};
    options.ensembles = false;
    options.inner_k = 3;
    ExperimentInputs inputs;
    inputs.records = records;
    bool aborted = false;
    try {
      run_experiment_with_plan(options, inputs, testing::small_codebook(3), plan);
    } catch (const std::exception& e) {
      aborted = std::string(e.what()).find("leakage") != std::string::npos;
    }
    EXPECT(aborted);
  }

  // Oracle predictor at p = 0.9: pooled Top-1 inside [0.86, 0.94] on a 6-site,
  // >= 2000-case cohort.
  {
    const std::size_t c_count = 5;
    const auto book = testing::small_codebook(c_count);
    const PrevalenceVector shared(std::vector<double>{0.3, 0.25, 0.2, 0.15, 0.1});
    SynthConfig synth;
    for (int s = 0; s < 6; ++s) {
      synth.sites.push_back({"site" + std::to_string(s), 400, shared});
    }
    synth.symptom_count = 4;
    synth.embedding_dim = 5;
    synth.seed = 2024;
    auto [records, table] = generate_cohort(synth, book);
    EXPECT(records.size() >= 2000);

    std::mt19937_64 rng(31415);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    PredictionSet oracle;
    oracle.method = "oracle";
    for (const auto& r : records) {
      const std::size_t truth = *r.true_cause;
      std::size_t top = truth;
      if (unit(rng) >= 0.9) top = (truth + 1 + rng() % (c_count - 1)) % c_count;
      RankedPrediction ranked;
      ranked.entries.push_back({top, Confidence::high});
      ranked.entries.push_back({(top + 1) % c_count, Confidence::low});
      Prediction pred;
      pred.ranked = ranked;
      oracle.by_id.emplace(r.id, std::move(pred));
    }

    ExperimentOptions options;
    options.methods = {{"prior", MethodSpec::Kind::prior, "", false},
                       {"oracle", MethodSpec::Kind::external, "", false}};
    options.ensembles = false;
    options.seed = 99;
    ExperimentInputs inputs;
    inputs.records = records;
    inputs.external.emplace("oracle", oracle);
    const auto result = run_experiment(options, inputs, book);

    double pooled_oracle_top1 = -1.0;
    for (const auto& pooled : result.pooled) {
      if (pooled.method == "oracle") pooled_oracle_top1 = pooled.top1.mean;
    }
    EXPECT(pooled_oracle_top1 >= 0.86);
    EXPECT(pooled_oracle_top1 <= 0.94);

    // Pooled mean/sd equal recomputation from the per-site reports.
    for (const auto& pooled : result.pooled) {
      std::vector<double> values;
      for (const auto& r : result.per_site) {
        if (r.method == pooled.method) values.push_back(r.top1);
      }
      double mean = 0.0;
      for (double v : values) mean += v;
      mean /= static_cast<double>(values.size());
      EXPECT(std::abs(pooled.top1.mean - mean) < 1e-12);
    }
  }
}

void ensemble_sanity() {
  const std::size_t c_count = 4;
  const auto book = testing::small_codebook(c_count);
  std::mt19937_64 rng(2718);
  std::vector<VaRecord> records;
  for (std::size_t s = 0; s < 3; ++s) {
    for (int i = 0; i < 120; ++i) {
      records.push_back(testing::make_record("s" + std::to_string(s) + "-" + std::to_string(i),
                                             "site" + std::to_string(s), rng() % c_count));
    }
  }
  auto perfect = one_hot_predictions(records, c_count,
                                     [](const VaRecord& r) { return *r.true_cause; }, "perfect");
  std::mt19937_64 noise(999);
  auto random = one_hot_predictions(records, c_count,
                                    [&](const VaRecord&) { return noise() % c_count; }, "random");

  // Grid search puts >= 0.95 weight on the perfect method.
  const auto weights = fit_weighted_ensemble({&perfect, &random}, records, 0.05);
  EXPECT(weights.weights[0] >= 0.95);

  // Stacker OOF Top-1 >= 0.98x the best single base on a fixed-seed cohort.
  const auto plan = loso_split(records, 4242);
  double best_base_top1 = 0.0, stacker_top1 = 0.0;
  std::size_t scored = 0;
  for (const auto& fold : plan.folds) {
    assert_no_leakage(fold);
    std::vector<VaRecord> train, test;
    for (const auto& r : records) {
      ((r.site == fold.test_site) ? test : train).push_back(r);
    }
    std::vector<const PredictionSet*> bases = {&perfect, &random};
    const auto stacker = fit_stacker(bases, train, c_count);
    const auto out = predict_stacker(stacker, bases);
    stacker_top1 += top_k_accuracy(out, test, 1) * test.size();
    best_base_top1 += std::max(top_k_accuracy(perfect, test, 1), top_k_accuracy(random, test, 1)) *
                      test.size();
    scored += test.size();
  }
  stacker_top1 /= static_cast<double>(scored);
  best_base_top1 /= static_cast<double>(scored);
  EXPECT(stacker_top1 >= 0.98 * best_base_top1);
}

void prompt_parse_round_trip() {
  // Every age module instantiates with the full label set and no leftovers.
  const std::size_t expected[] = {34, 21, 6};
  for (const auto g : {AgeGroup::adult, AgeGroup::child, AgeGroup::neonate}) {
    const auto book = builtin_codebook(g);
    EXPECT(book.size() == expected[static_cast<int>(g)]);
    VaRecord record;
    record.id = "case";
    record.site = "Bohol";
    record.age_group = g;
    record.age_value = g == AgeGroup::neonate ? 3 : 40;
    record.sex = Sex::female;
    record.symptoms["fever"] = TriState::yes;
    record.narrative = "Short course of illness.";
    const auto prompt = build_prompt(record, book, default_prompt_template(g));
    EXPECT(!has_unresolved_placeholders(prompt.system_text));
    EXPECT(!has_unresolved_placeholders(prompt.user_text));
    for (const auto& label : book.labels()) {
      EXPECT(prompt.system_text.find(label) != std::string::npos);
    }
  }

  // Structured parser inverts the serializer on 100 randomized predictions.
  const auto book = builtin_codebook(AgeGroup::adult);
  std::mt19937_64 rng(606);
  for (int trial = 0; trial < 100; ++trial) {
    RankedPrediction ranked;
    std::vector<std::size_t> causes(book.size());
    for (std::size_t c = 0; c < causes.size(); ++c) causes[c] = c;
    std::shuffle(causes.begin(), causes.end(), rng);
    const std::size_t k = 1 + rng() % kMaxRanked;
    for (std::size_t j = 0; j < k; ++j) {
      ranked.entries.push_back({causes[j], static_cast<Confidence>(rng() % 3)});
    }
    EXPECT(parse_response(serialize_response(ranked, book), book) == ranked);
  }

  // Replay of five recorded responses through the cache: zero failures and
  // zero network traffic.
  const auto cache = testing::fresh_dir("acc_cache");
  const auto tpl = default_prompt_template(AgeGroup::adult);
  std::vector<VaRecord> records;
  const char* labels[] = {"Stroke", "TB", "Pneumonia", "Malaria", "Falls"};
  for (int i = 0; i < 5; ++i) {
    VaRecord r;
    r.id = "replay-" + std::to_string(i);
    r.site = "Dar";
    r.age_group = AgeGroup::adult;
    r.age_value = 30 + i;
    r.sex = Sex::male;
    r.symptoms["q" + std::to_string(i)] = TriState::yes;
    r.narrative = "Recorded case " + std::to_string(i);
    records.push_back(r);

    const auto prompt = build_prompt(r, book, tpl);
    RankedPrediction ranked;
    ranked.entries.push_back({book.resolve(labels[i]).value(), Confidence::high});
    const std::string response = serialize_response(ranked, book, "recorded");
    detail::cache_store(cache.string(), detail::cache_key("gpt-5", prompt), "gpt-5", prompt,
                        response);
  }
  LlmClientConfig config;
  config.cache_dir = cache.string();
  config.api_key_env = "VAPIPE_ACCEPTANCE_UNSET_KEY";
  unsetenv(config.api_key_env.c_str());
  const auto result = predict_batch(records, book, tpl, config);
  EXPECT(result.failures.empty());
  EXPECT(result.predictions.by_id.size() == 5);
  EXPECT(result.requests == 0);
  for (int i = 0; i < 5; ++i) {
    const auto& pred = result.predictions.by_id.at("replay-" + std::to_string(i));
    EXPECT(book.label(pred.ranked->entries[0].cause) == labels[i]);
  }
}

void replication_hook() {
  const auto dir = testing::fresh_dir("acc_cli");
  const auto book = builtin_codebook(AgeGroup::adult);

  // 60-case miniature cohort in the flat tabular format, three sites.
  std::mt19937_64 rng(12);
  std::vector<VaRecord> records;
  const std::size_t c_count = book.size();
  for (std::size_t s = 0; s < 3; ++s) {
    for (int i = 0; i < 20; ++i) {
      // Cause 5 never occurs at site 0, so the per-cause table has a "--" cell.
      const std::size_t truth = s == 0 ? rng() % 5 : (i < 3 ? 5 : rng() % 6);
      auto r = testing::make_record("p" + std::to_string(s) + "-" + std::to_string(i),
                                    "site" + std::to_string(s), truth);
      r.narrative = std::string(40 + 90 * (i % 5), 'n');
      r.symptoms["fever"] = (i % 2) ? TriState::yes : TriState::no;
      r.symptoms["cough"] = (i % 3) ? TriState::yes : TriState::missing;
      records.push_back(r);
    }
  }
  const auto records_path = (dir / "records.csv").string();
  write_records(records_path, records, book);

  // Cached-LLM stand-in: ranked predictions; external posterior file: dense probs.
  PredictionSet llm;
  llm.method = "llm";
  PredictionSet lcva;
  lcva.method = "lcva";
  for (const auto& r : records) {
    const std::size_t truth = *r.true_cause;
    RankedPrediction ranked;
    const std::size_t top = (rng() % 10) < 7 ? truth : rng() % c_count;
    ranked.entries.push_back({top, Confidence::high});
    ranked.entries.push_back({(top + 3) % c_count, Confidence::medium});
    ranked.entries.push_back({(top + 7) % c_count, Confidence::low});
    Prediction ranked_pred;
    ranked_pred.ranked = ranked;
    llm.by_id.emplace(r.id, std::move(ranked_pred));

    std::vector<double> posterior(c_count, 0.0);
    for (double& v : posterior) v = 0.2 + static_cast<double>(rng() % 100) / 100.0;
    posterior[truth] += 3.0;
    Prediction prob_pred;
    prob_pred.probs = normalize(posterior);
    lcva.by_id.emplace(r.id, std::move(prob_pred));
  }
  const auto llm_path = (dir / "llm.jsonl").string();
  const auto lcva_path = (dir / "lcva.jsonl").string();
  write_predictions(llm_path, llm, book);
  write_predictions(lcva_path, lcva, book);

  const json config = {
      {"age_group", "adult"},
      {"records", records_path},
      {"out_dir", (dir / "out").string()},
      {"seed", 7},
      {"inner_k", 3},
      {"grid_step", 0.25},
      {"methods",
       json::array({json{{"name", "prior"}, {"kind", "prior"}},
                    json{{"name", "llm"}, {"kind", "external"}, {"path", llm_path}, {"calibrate", true}},
                    json{{"name", "lcva"}, {"kind", "external"}, {"path", lcva_path}}})}};
  const auto config_path = (dir / "config.json").string();
  {
    std::ofstream out(config_path, std::ios::binary);
    out << config.dump(2) << '\n';
  }

  const std::string command = std::string(VAPIPE_CLI_PATH) + " evaluate --config " + config_path +
                              " > " + (dir / "stdout.txt").string() + " 2> " +
                              (dir / "stderr.txt").string();
  const int raw = std::system(command.c_str());
  const int exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  if (exit_code != 0) {
    std::ifstream err(dir / "stderr.txt");
    std::ostringstream message;
    message << err.rdbuf();
    throw std::runtime_error("evaluate exited " + std::to_string(exit_code) + ": " + message.str());
  }

  // Format: per-site tables exist with the expected layout markers.
  std::ifstream tables_in(dir / "out" / "tables.txt");
  std::ostringstream tables_buf;
  tables_buf << tables_in.rdbuf();
  const std::string tables = tables_buf.str();
  EXPECT(tables.find("CSMF accuracy by site") != std::string::npos);
  EXPECT(tables.find("Top-1 accuracy by site") != std::string::npos);
  EXPECT(tables.find("Mean (sd)") != std::string::npos);
  EXPECT(tables.find("Cause-specific Top-1 accuracy by site") != std::string::npos);
  EXPECT(tables.find("site0") != std::string::npos);
  EXPECT(tables.find("--") != std::string::npos);  // empty cause cells render as --

  // Internal consistency: pooled mean equals the mean of per-site values.
  std::ifstream reports_in(dir / "out" / "reports.json");
  const json payload = json::parse(reports_in);
  std::map<std::string, std::vector<double>> csmf_by_method;
  for (const auto& report : payload.at("per_site")) {
    csmf_by_method[report.at("method").get<std::string>()].push_back(report.at("csmf").get<double>());
  }
  EXPECT(!payload.at("pooled").empty());
  for (const auto& pooled : payload.at("pooled")) {
    const auto& values = csmf_by_method.at(pooled.at("method").get<std::string>());
    EXPECT(values.size() == 3);
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    EXPECT(std::abs(pooled.at("csmf").at("mean").get<double>() - mean) < 1e-12);
  }
  // Calibrated LLM is present and its rank-derived accuracy matches the raw run.
  std::map<std::string, std::map<std::string, double>> top1;
  for (const auto& report : payload.at("per_site")) {
    top1[report.at("method").get<std::string>()][report.at("site").get<std::string>()] =
        report.at("top1").get<double>();
  }
  EXPECT(top1.count("llm_cal") == 1);
  for (const auto& [site, value] : top1.at("llm")) {
    EXPECT(top1.at("llm_cal").at(site) == value);
  }
}

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<void()> body;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"csmf-metric-identities", 1.0, csmf_metric_identities},
      {"calibration-lp-optimality", 30.0, calibration_lp_optimality},
      {"calibration-rank-preservation", 1.0, calibration_rank_preservation},
      {"calibration-improves-train-csmf", 5.0, calibration_improves_train_csmf},
      {"logistic-regression", 10.0, logistic_regression_criteria},
      {"harness-integrity", 60.0, harness_integrity},
      {"ensemble-sanity", 60.0, ensemble_sanity},
      {"prompt-parse-round-trip", 5.0, prompt_parse_round_trip},
      {"replication-hook", 60.0, replication_hook},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    const auto start = std::chrono::steady_clock::now();
    std::string error;
    try {
      criterion.body();
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (error.empty() && elapsed > criterion.budget_seconds) {
      error = "exceeded budget of " + std::to_string(criterion.budget_seconds) + " s";
    }
    if (error.empty()) {
      std::printf("[PASS] %-36s (%.2f s)\n", criterion.name.c_str(), elapsed);
    } else {
      std::printf("[FAIL] %-36s (%.2f s): %s\n", criterion.name.c_str(), elapsed, error.c_str());
      ++failures;
    }
  }
  if (failures) std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
