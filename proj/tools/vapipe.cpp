// vapipe: verbal-autopsy pipeline driver.
//
// Subcommands mirror the pipeline stages: synth, predict-llm, train-embed,
// predict-embed, calibrate, ensemble, evaluate, report. Every command reads
// one JSON config (flag overrides win) and writes its outputs plus a run
// manifest into the configured output directory.
//
// Exit codes: 0 success, 1 validation/usage error, 2 runtime error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vapipe/calibrate.hpp"
#include "vapipe/codebooks.hpp"
#include "vapipe/core.hpp"
#include "vapipe/harness.hpp"
#include "vapipe/io.hpp"
#include "vapipe/llm.hpp"
#include "vapipe/manifest.hpp"
#include "vapipe/metrics.hpp"
#include "vapipe/models.hpp"
#include "vapipe/synth.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct CliOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  int verbosity = 0;
};

void log_line(const CliOptions& cli, const std::string& message) {
  if (cli.verbosity > 0) std::cerr << "[vapipe] " << message << "\n";
}

json load_config(const CliOptions& cli) {
  json config = json::object();
  if (!cli.config_path.empty()) {
    std::ifstream in(cli.config_path, std::ios::binary);
    if (!in) throw vapipe::ValidationError("cannot open config '" + cli.config_path + "'");
    config = json::parse(in);
    if (!config.is_object()) throw vapipe::ValidationError("config root must be a JSON object");
  }
  for (const auto& kv : cli.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw vapipe::ValidationError("--set expects key=value, got '" + kv + "'");
    }
    std::string pointer = "/" + kv.substr(0, eq);
    for (auto& c : pointer) {
      if (c == '.') c = '/';
    }
    const std::string raw = kv.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // plain string
    config[json::json_pointer(pointer)] = value;
  }
  if (cli.seed) config["seed"] = *cli.seed;
  if (cli.out_dir) config["out_dir"] = *cli.out_dir;
  return config;
}

void reject_unknown_keys(const json& config, const std::vector<std::string>& known) {
  for (const auto& [key, _] : config.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw vapipe::ValidationError("unknown config key '" + key + "'");
    }
  }
}

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "age_group",      "labels",        "codebook",       "out_dir",
      "seed",           "synth",         "records",        "embeddings",
      "predictions",    "llm",           "train",          "model",
      "methods",        "lambda_grid",   "grid_step",      "stratified_calibration",
      "ensembles",      "split",         "random_folds",   "inner_k",
      "length_boundaries", "reports",    "calibration",    "target"};
  return keys;
}

vapipe::CauseCodebook codebook_from_config(const json& config) {
  const auto age_group = vapipe::age_group_from_string(config.value("age_group", "adult"));
  if (config.contains("labels")) {
    return vapipe::CauseCodebook(age_group, config["labels"].get<std::vector<std::string>>());
  }
  if (config.contains("codebook")) {
    const std::string path = config["codebook"].get<std::string>();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw vapipe::ValidationError("cannot open codebook '" + path + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return vapipe::CauseCodebook(age_group, vapipe::parse_codebook_lines(buffer.str()));
  }
  return vapipe::builtin_codebook(age_group);
}

std::string out_dir_of(const json& config) {
  std::string dir = config.value("out_dir", "out");
  fs::create_directories(dir);
  return dir;
}

std::string path_in(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::string require_path(const json& config, const std::string& key) {
  if (!config.contains(key)) throw vapipe::ValidationError("config is missing '" + key + "'");
  return config[key].get<std::string>();
}

std::uint64_t seed_of(const json& config) { return config.value("seed", std::uint64_t{42}); }

void emit_summary(const json& summary) { std::cout << summary.dump() << std::endl; }

// --- subcommands -----------------------------------------------------------

int cmd_synth(const CliOptions& cli) {
  json config = load_config(cli);
  reject_unknown_keys(config, known_config_keys());
  const auto codebook = codebook_from_config(config);
  if (!config.contains("synth")) throw vapipe::ValidationError("config is missing 'synth'");
  vapipe::SynthConfig synth = vapipe::synth_config_from_json(config["synth"]);
  synth.seed = config["synth"].contains("seed") ? synth.seed : seed_of(config);

  const std::string dir = out_dir_of(config);
  auto [records, embeddings] = vapipe::generate_cohort(synth, codebook);
  const std::string records_path = path_in(dir, "records.csv");
  const std::string embeddings_path = path_in(dir, "embeddings.csv");
  const std::string codebook_path = path_in(dir, "codebook.txt");
  vapipe::write_records(records_path, records, codebook);
  vapipe::write_embeddings_csv(embeddings_path, embeddings);
  {
    std::ofstream out(codebook_path, std::ios::binary);
    for (const auto& label : codebook.labels()) out << label << '\n';
  }
  vapipe::write_run_manifest(dir, "synth", synth.seed, {}, config);
  emit_summary({{"status", "ok"},
                {"records", records_path},
                {"embeddings", embeddings_path},
                {"codebook", codebook_path},
                {"cases", records.size()}});
  return 0;
}

int cmd_predict_llm(const CliOptions& cli) {
  json config = load_config(cli);
  reject_unknown_keys(config, known_config_keys());
  const auto codebook = codebook_from_config(config);
  const std::string records_path = require_path(config, "records");
  const auto records = vapipe::load_records(records_path, codebook);
  vapipe::LlmClientConfig client =
      config.contains("llm") ? vapipe::llm_config_from_json(config["llm"]) : vapipe::LlmClientConfig{};
  const auto tpl = vapipe::default_prompt_template(codebook.age_group());

  const std::string dir = out_dir_of(config);
  vapipe::BatchResult result = vapipe::predict_batch(records, codebook, tpl, client);
  const std::string predictions_path =
      config.value("predictions", path_in(dir, "llm_predictions.jsonl"));
  if (!result.predictions.by_id.empty()) {
    vapipe::write_predictions(predictions_path, result.predictions, codebook);
  }
  const std::string failures_path = path_in(dir, "llm_failures.jsonl");
  vapipe::write_failure_manifest(failures_path, result.failures);
  vapipe::write_run_manifest(dir, "predict-llm", seed_of(config), {records_path}, config);
  emit_summary({{"status", result.failures.empty() ? "ok" : "partial"},
                {"predictions", predictions_path},
                {"failures", failures_path},
                {"cache_hits", result.cache_hits},
                {"requests", result.requests},
                {"failed_cases", result.failures.size()}});
  return 0;
}

int cmd_train_embed(const CliOptions& cli) {
  json config = load_config(cli);
  reject_unknown_keys(config, known_config_keys());
  const auto codebook = codebook_from_config(config);
  const std::string records_path = require_path(config, "records");
  const std::string embeddings_path = require_path(config, "embeddings");
  const auto records = vapipe::load_records(records_path, codebook);
  const auto embeddings = vapipe::load_embeddings(embeddings_path);
  const auto [x, ids] = vapipe::embedding_matrix(records, embeddings);
  const auto y = vapipe::label_vector(records);

  vapipe::LogRegConfig lr;
  lr.seed = seed_of(config);
  if (config.contains("train") && config["train"].contains("lambda")) {
    lr.lambda = config["train"]["lambda"].get<double>();
  } else {
    const auto grid = config.value("lambda_grid", std::vector<double>{0.01, 0.1, 1.0, 10.0});
    lr.lambda = vapipe::detail::select_lambda(x, y, codebook.size(), grid,
                                              config.value("inner_k", std::size_t{5}), lr.seed);
  }
  const vapipe::LogRegModel model = vapipe::fit_logreg(x, y, codebook.size(), lr);

  const std::string dir = out_dir_of(config);
  const std::string model_path = path_in(dir, "logreg_model.json");
  {
    std::ofstream out(model_path, std::ios::binary);
    out << vapipe::logreg_to_json(model).dump(2) << '\n';
  }
  vapipe::write_run_manifest(dir, "train-embed", lr.seed, {records_path, embeddings_path}, config);
  emit_summary({{"status", "ok"},
                {"model", model_path},
                {"lambda", model.lambda},
                {"iterations", model.train_meta.iterations},
                {"final_gradient_norm", model.train_meta.final_gradient_norm}});
  return 0;
}

int cmd_predict_embed(const CliOptions& cli) {
  json config = load_config(cli);
  reject_unknown_keys(config, known_config_keys());
  const auto codebook = codebook_from_config(config);
  const std::string records_path = require_path(config, "records");
  const std::string embeddings_path = require_path(config, "embeddings");
  const std::string model_path = require_path(config, "model");
  const auto records = vapipe::load_records(records_path, codebook);
  const auto embeddings = vapipe::load_embeddings(embeddings_path);
  std::ifstream model_in(model_path, std::ios::binary);
  if (!model_in) throw vapipe::ValidationError("cannot open model '" + model_path + "'");
  const vapipe::LogRegModel model = vapipe::logreg_from_json(json::parse(model_in));

  const auto [x, ids] = vapipe::embedding_matrix(records, embeddings);
  const auto predictions = vapipe::predict_logreg(model, x, ids);
  const std::string dir = out_dir_of(config);
  const std::string predictions_path = path_in(dir, "embed_predictions.jsonl");
  vapipe::write_predictions(predictions_path, predictions, codebook);
  vapipe::write_run_manifest(dir, "predict-embed", seed_of(config),
                             {records_path, embeddings_path, model_path}, config);
  emit_summary({{"status", "ok"}, {"predictions", predictions_path}, {"cases", ids.size()}});
  return 0;
}

int cmd_calibrate(const CliOptions& cli) {
  json config = load_config(cli);
  reject_unknown_keys(config, known_config_keys());
  const auto codebook = codebook_from_config(config);
  const std::string records_path = require_path(config, "records");
  const std::string predictions_path = require_path(config, "predictions");
  const auto records = vapipe::load_records(records_path, codebook);
  const auto predictions = vapipe::load_predictions(predictions_path, codebook);

  std::optional<vapipe::PrevalenceVector> target;
  if (config.contains("target")) {
    target = vapipe::ProbVector::from_ingested(config["target"].get<std::vector<double>>());
  }
  const bool stratify = config.value("stratified_calibration", true);
  const vapipe::CalibrationParams params =
      vapipe::fit_calibrator(predictions, records, codebook, stratify, target);

  const std::string dir = out_dir_of(config);
  const std::string params_path = path_in(dir, "calibration.json");
  {
    std::ofstream out(params_path, std::ios::binary);
    out << vapipe::calibration_to_json(params).dump(2) << '\n';
  }
  const auto calibrated = vapipe::apply_calibration(predictions, params);
  const std::string calibrated_path = path_in(dir, "calibrated_predictions.jsonl");
  vapipe::write_predictions(calibrated_path, calibrated, codebook);
  vapipe::write_run_manifest(dir, "calibrate", seed_of(config), {records_path, predictions_path},
                             config);
  emit_summary({{"status", "ok"},
                {"params", params_path},
                {"calibrated", calibrated_path},
                {"objective", params.objective}});
  return 0;
}

int cmd_ensemble(const CliOptions& cli) {
  json config = load_config(cli);
  reject_unknown_keys(config, known_config_keys());
  const auto codebook = codebook_from_config(config);
  const std::string records_path = require_path(config, "records");
  const auto records = vapipe::load_records(records_path, codebook);
  if (!config.contains("methods") || !config["methods"].is_array() || config["methods"].empty()) {
    throw vapipe::ValidationError("ensemble needs a nonempty 'methods' array of prediction files");
  }
  std::vector<vapipe::PredictionSet> sets;
  std::vector<std::string> input_paths = {records_path};
  for (const auto& m : config["methods"]) {
    const std::string path = m.at("path").get<std::string>();
    input_paths.push_back(path);
    vapipe::PredictionSet set = vapipe::load_predictions(path, codebook);
    if (m.contains("name")) set.method = m["name"].get<std::string>();
    sets.push_back(vapipe::detail::with_probs(set, codebook.size()));
  }
  std::vector<const vapipe::PredictionSet*> set_ptrs;
  for (const auto& s : sets) set_ptrs.push_back(&s);

  const double grid_step = config.value("grid_step", 0.05);
  const vapipe::EnsembleWeights weights =
      vapipe::fit_weighted_ensemble(set_ptrs, records, grid_step);
  const auto combined = vapipe::apply_weighted_ensemble(weights, set_ptrs);

  const std::string dir = out_dir_of(config);
  const std::string weights_path = path_in(dir, "ensemble_weights.json");
  {
    std::ofstream out(weights_path, std::ios::binary);
    out << vapipe::ensemble_to_json(weights).dump(2) << '\n';
  }
  const std::string combined_path = path_in(dir, "ensemble_predictions.jsonl");
  vapipe::write_predictions(combined_path, combined, codebook);
  vapipe::write_run_manifest(dir, "ensemble", seed_of(config), input_paths, config);
  emit_summary({{"status", "ok"},
                {"weights", weights_path},
                {"predictions", combined_path},
                {"selected", weights.weights}});
  return 0;
}

vapipe::ExperimentOptions experiment_options_from_config(const json& config) {
  vapipe::ExperimentOptions options;
  if (!config.contains("methods")) throw vapipe::ValidationError("config is missing 'methods'");
  for (const auto& m : config["methods"]) {
    vapipe::MethodSpec spec;
    spec.name = m.at("name").get<std::string>();
    const std::string kind = m.value("kind", "external");
    if (kind == "prior") spec.kind = vapipe::MethodSpec::Kind::prior;
    else if (kind == "embed_logreg") spec.kind = vapipe::MethodSpec::Kind::embed_logreg;
    else if (kind == "external") spec.kind = vapipe::MethodSpec::Kind::external;
    else throw vapipe::ValidationError("unknown method kind '" + kind + "'");
    spec.path = m.value("path", "");
    spec.calibrate = m.value("calibrate", false);
    options.methods.push_back(std::move(spec));
  }
  options.lambda_grid = config.value("lambda_grid", options.lambda_grid);
  options.grid_step = config.value("grid_step", options.grid_step);
  options.stratified_calibration = config.value("stratified_calibration", true);
  options.ensembles = config.value("ensembles", true);
  options.split = config.value("split", "loso");
  options.random_folds = config.value("random_folds", std::size_t{5});
  options.inner_k = config.value("inner_k", std::size_t{5});
  options.seed = seed_of(config);
  options.length_boundaries = config.value("length_boundaries", options.length_boundaries);
  return options;
}

void write_experiment_outputs(const std::string& dir, const vapipe::ExperimentResult& result,
                              const vapipe::CauseCodebook& codebook) {
  json reports = json::array();
  for (const auto& r : result.per_site) reports.push_back(vapipe::report_to_json(r, codebook));
  json pooled = json::array();
  for (const auto& p : result.pooled) {
    json entry = {{"method", p.method},
                  {"sites", p.sites},
                  {"top1", {{"mean", p.top1.mean}, {"sd", p.top1.sd}}},
                  {"csmf", {{"mean", p.csmf.mean}, {"sd", p.csmf.sd}}}};
    if (p.top5) entry["top5"] = {{"mean", p.top5->mean}, {"sd", p.top5->sd}};
    pooled.push_back(entry);
  }
  {
    std::ofstream out(path_in(dir, "reports.json"), std::ios::binary);
    out << json{{"per_site", reports}, {"pooled", pooled}}.dump(2) << '\n';
  }

  std::ostringstream tables;
  tables << "CSMF accuracy by site\n"
         << vapipe::render_metric_table(result.per_site, "csmf") << "\n"
         << "Top-1 accuracy by site\n"
         << vapipe::render_metric_table(result.per_site, "top1") << "\n";
  bool any_top5 = false;
  for (const auto& r : result.per_site) any_top5 |= r.top5.has_value();
  if (any_top5) {
    tables << "Top-5 accuracy by site\n"
           << vapipe::render_metric_table(result.per_site, "top5") << "\n";
  }
  std::map<std::string, std::vector<vapipe::EvalReport>> by_method;
  for (const auto& r : result.per_site) by_method[r.method].push_back(r);
  for (const auto& [method, rs] : by_method) {
    tables << "Cause-specific Top-1 accuracy by site (" << method << ")\n"
           << vapipe::render_per_cause_table(rs, codebook) << "\n";
  }
  {
    std::ofstream out(path_in(dir, "tables.txt"), std::ios::binary);
    out << tables.str();
  }
}

int cmd_evaluate(const CliOptions& cli) {
  json config = load_config(cli);
  reject_unknown_keys(config, known_config_keys());
  const auto codebook = codebook_from_config(config);
  const std::string records_path = require_path(config, "records");
  vapipe::ExperimentInputs inputs;
  inputs.records = vapipe::load_records(records_path, codebook);
  std::vector<std::string> input_paths = {records_path};

  vapipe::ExperimentOptions options = experiment_options_from_config(config);
  for (const auto& m : options.methods) {
    if (m.kind == vapipe::MethodSpec::Kind::embed_logreg && !inputs.embeddings) {
      const std::string embeddings_path = require_path(config, "embeddings");
      inputs.embeddings = vapipe::load_embeddings(embeddings_path);
      input_paths.push_back(embeddings_path);
    }
    if (m.kind == vapipe::MethodSpec::Kind::external) {
      if (m.path.empty()) {
        throw vapipe::ValidationError("external method '" + m.name + "' needs a 'path'");
      }
      vapipe::PredictionSet set = vapipe::load_predictions(m.path, codebook);
      set.method = m.name;
      inputs.external.emplace(m.name, std::move(set));
      input_paths.push_back(m.path);
    }
  }

  const vapipe::ExperimentResult result = vapipe::run_experiment(options, inputs, codebook);
  const std::string dir = out_dir_of(config);
  write_experiment_outputs(dir, result, codebook);
  vapipe::write_run_manifest(dir, "evaluate", options.seed, input_paths, config);
  log_line(cli, "evaluated " + std::to_string(result.per_site.size()) + " method-site pairs");
  emit_summary({{"status", "ok"},
                {"reports", path_in(dir, "reports.json")},
                {"tables", path_in(dir, "tables.txt")},
                {"method_site_reports", result.per_site.size()}});
  return 0;
}

int cmd_report(const CliOptions& cli) {
  json config = load_config(cli);
  reject_unknown_keys(config, known_config_keys());
  const auto codebook = codebook_from_config(config);
  const std::string reports_path = require_path(config, "reports");
  std::ifstream in(reports_path, std::ios::binary);
  if (!in) throw vapipe::ValidationError("cannot open reports '" + reports_path + "'");
  const json payload = json::parse(in);
  vapipe::ExperimentResult result;
  for (const auto& r : payload.at("per_site")) {
    result.per_site.push_back(vapipe::report_from_json(r, codebook));
  }
  const std::string dir = out_dir_of(config);
  write_experiment_outputs(dir, result, codebook);
  std::ifstream tables(path_in(dir, "tables.txt"), std::ios::binary);
  std::cout << tables.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"verbal-autopsy pipeline"};
  app.require_subcommand(1);

  CliOptions cli;
  app.add_option("--config", cli.config_path, "JSON config file");
  app.add_option("--set", cli.overrides, "override a config key (dot.path=value, repeatable)");
  app.add_option("--seed", cli.seed, "PRNG seed (default 42)");
  app.add_option("--out", cli.out_dir, "output directory");
  app.add_flag("-v,--verbose", cli.verbosity, "log progress to stderr");

  int (*handler)(const CliOptions&) = nullptr;
  auto bind = [&](const char* name, const char* desc, int (*fn)(const CliOptions&)) {
    auto* sub = app.add_subcommand(name, desc);
    sub->fallthrough();  // global flags may follow the subcommand
    sub->callback([&handler, fn]() { handler = fn; });
  };
  bind("synth", "generate a synthetic multi-site cohort", cmd_synth);
  bind("predict-llm", "rank causes with a chat-completion endpoint", cmd_predict_llm);
  bind("train-embed", "fit the embedding logistic classifier", cmd_train_embed);
  bind("predict-embed", "score a cohort with a fitted embedding model", cmd_predict_embed);
  bind("calibrate", "fit rank-weight calibration on labeled predictions", cmd_calibrate);
  bind("ensemble", "fit and apply a weighted ensemble over prediction files", cmd_ensemble);
  bind("evaluate", "run the full leave-one-site-out evaluation", cmd_evaluate);
  bind("report", "render report JSON as aligned text tables", cmd_report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp") {
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    return handler(cli);
  } catch (const vapipe::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
