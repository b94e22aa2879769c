#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vapipe/core.hpp"

namespace vapipe {

struct CauseStat {
  double top1 = 0.0;
  std::size_t n = 0;
};

struct LengthBucket {
  std::string label;
  double top1 = 0.0;
  std::size_t n = 0;
};

// One method scored on one cohort (a single site, or pooled when site is absent).
struct EvalReport {
  std::string method;
  std::optional<std::string> site;
  std::size_t n = 0;
  double top1 = 0.0;
  std::optional<double> top5;
  double csmf = 0.0;
  // True when any case lacked dense probabilities, so CSMF used the rank-1
  // one-hot vectorization.
  bool csmf_one_hot = false;
  std::map<std::size_t, CauseStat> per_cause_top1;
  std::vector<LengthBucket> length_buckets;
};

namespace detail {

inline const Prediction& prediction_for(const PredictionSet& preds, const VaRecord& record) {
  auto it = preds.by_id.find(record.id);
  if (it == preds.by_id.end()) {
    throw ValidationError("method '" + preds.method + "' has no prediction for record '" +
                          record.id + "'");
  }
  return it->second;
}

inline std::size_t require_true_cause(const VaRecord& record) {
  if (!record.true_cause) {
    throw ValidationError("record '" + record.id + "' has no gold cause; scoring needs labels");
  }
  return *record.true_cause;
}

inline bool hit_within_k(const Prediction& pred, std::size_t truth, std::size_t k) {
  const auto order = rank_order(pred);
  const std::size_t limit = std::min(k, order.size());
  for (std::size_t j = 0; j < limit; ++j) {
    if (order[j] == truth) return true;
  }
  return false;
}

}  // namespace detail

// Fraction of cases whose true cause appears among the k highest-ranked.
inline double top_k_accuracy(const PredictionSet& preds, const std::vector<VaRecord>& records,
                             std::size_t k) {
  if (records.empty()) throw ValidationError("cannot score an empty cohort");
  if (k == 0) throw ValidationError("k must be >= 1");
  std::size_t hits = 0;
  for (const auto& r : records) {
    const std::size_t truth = detail::require_true_cause(r);
    if (detail::hit_within_k(detail::prediction_for(preds, r), truth, k)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

// CSMF accuracy: 1 - sum_c |pihat_c - pi_c| / (2 (1 - min_c pi_c)), with
// pihat the mean predicted probability. Ranked-only cases contribute their
// rank-1 one-hot vector.
inline double csmf_accuracy(const PredictionSet& preds, const std::vector<VaRecord>& records,
                            std::size_t cause_count, bool* used_one_hot = nullptr) {
  if (records.empty()) throw ValidationError("cannot score an empty cohort");
  if (cause_count == 0) throw ValidationError("cause count must be positive");
  std::vector<double> true_counts(cause_count, 0.0);
  std::vector<double> predicted_mass(cause_count, 0.0);
  bool one_hot_any = false;
  for (const auto& r : records) {
    true_counts[detail::require_true_cause(r)] += 1.0;
    const Prediction& pred = detail::prediction_for(preds, r);
    if (!pred.probs) one_hot_any = true;
    const ProbVector p = to_prob_vector(pred, cause_count);
    for (std::size_t c = 0; c < cause_count; ++c) predicted_mass[c] += p[c];
  }
  const double n = static_cast<double>(records.size());
  double min_prev = 1.0;
  double l1 = 0.0;
  for (std::size_t c = 0; c < cause_count; ++c) {
    const double truth = true_counts[c] / n;
    min_prev = std::min(min_prev, truth);
    l1 += std::abs(predicted_mass[c] / n - truth);
  }
  if (1.0 - min_prev <= 0.0) {
    throw ValidationError("CSMF accuracy undefined: every cause has prevalence 1 (single-cause codebook)");
  }
  if (used_one_hot) *used_one_hot = one_hot_any;
  return 1.0 - l1 / (2.0 * (1.0 - min_prev));
}

// Top-1 accuracy restricted to records of each true cause. Causes with no
// cases are absent from the map (rendered "--" downstream).
inline std::map<std::size_t, CauseStat> per_cause_report(const PredictionSet& preds,
                                                         const std::vector<VaRecord>& records) {
  std::map<std::size_t, CauseStat> out;
  std::map<std::size_t, std::size_t> hits;
  for (const auto& r : records) {
    const std::size_t truth = detail::require_true_cause(r);
    out[truth].n += 1;
    if (detail::hit_within_k(detail::prediction_for(preds, r), truth, 1)) hits[truth] += 1;
  }
  for (auto& [cause, stat] : out) {
    stat.top1 = static_cast<double>(hits[cause]) / static_cast<double>(stat.n);
  }
  return out;
}

// Top-1 accuracy by narrative length (characters). Records without a
// narrative form their own "absent" bucket. Empty buckets are omitted.
inline std::vector<LengthBucket> narrative_length_report(const PredictionSet& preds,
                                                         const std::vector<VaRecord>& records,
                                                         const std::vector<std::size_t>& boundaries) {
  if (boundaries.empty()) throw ValidationError("length report needs at least one boundary");
  for (std::size_t i = 1; i < boundaries.size(); ++i) {
    if (boundaries[i] <= boundaries[i - 1]) {
      throw ValidationError("length boundaries must be strictly increasing");
    }
  }
  const std::size_t bucket_count = boundaries.size() + 1;
  std::vector<std::size_t> n(bucket_count + 1, 0);  // last slot: narrative absent
  std::vector<std::size_t> hits(bucket_count + 1, 0);
  for (const auto& r : records) {
    const std::size_t truth = detail::require_true_cause(r);
    std::size_t slot;
    if (!r.narrative) {
      slot = bucket_count;
    } else {
      const std::size_t len = r.narrative->size();
      slot = 0;
      while (slot < boundaries.size() && len > boundaries[slot]) ++slot;
    }
    n[slot] += 1;
    if (detail::hit_within_k(detail::prediction_for(preds, r), truth, 1)) hits[slot] += 1;
  }
  std::vector<LengthBucket> out;
  for (std::size_t b = 0; b < bucket_count + 1; ++b) {
    if (n[b] == 0) continue;
    LengthBucket bucket;
    if (b == bucket_count) {
      bucket.label = "absent";
    } else if (b == 0) {
      bucket.label = "<=" + std::to_string(boundaries[0]);
    } else if (b == boundaries.size()) {
      bucket.label = ">" + std::to_string(boundaries.back());
    } else {
      bucket.label = std::to_string(boundaries[b - 1] + 1) + "-" + std::to_string(boundaries[b]);
    }
    bucket.n = n[b];
    bucket.top1 = static_cast<double>(hits[b]) / static_cast<double>(n[b]);
    out.push_back(std::move(bucket));
  }
  return out;
}

inline const std::vector<std::size_t>& default_length_boundaries() {
  static const std::vector<std::size_t> boundaries = {250, 500, 1000};
  return boundaries;
}

// Assemble the full per-(method, cohort) report.
inline EvalReport build_report(const PredictionSet& preds, const std::vector<VaRecord>& records,
                               const CauseCodebook& codebook,
                               const std::optional<std::string>& site = std::nullopt,
                               const std::vector<std::size_t>& boundaries = default_length_boundaries()) {
  EvalReport report;
  report.method = preds.method;
  report.site = site;
  report.n = records.size();
  report.top1 = top_k_accuracy(preds, records, 1);
  // Top-5 is not meaningful when the label space is barely larger than 5.
  if (codebook.age_group() != AgeGroup::neonate) {
    report.top5 = top_k_accuracy(preds, records, 5);
  }
  report.csmf = csmf_accuracy(preds, records, codebook.size(), &report.csmf_one_hot);
  report.per_cause_top1 = per_cause_report(preds, records);
  report.length_buckets = narrative_length_report(preds, records, boundaries);
  return report;
}

// --- pooled mean (sd) across sites ---------------------------------------

struct PooledStat {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single site
};

struct PooledReport {
  std::string method;
  std::size_t sites = 0;
  PooledStat top1;
  std::optional<PooledStat> top5;
  PooledStat csmf;
};

inline PooledStat pool_values(const std::vector<double>& values) {
  PooledStat stat;
  if (values.empty()) throw ValidationError("cannot pool zero values");
  double sum = 0.0;
  for (double v : values) sum += v;
  stat.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - stat.mean) * (v - stat.mean);
    stat.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return stat;
}

inline PooledReport pool_reports(const std::vector<EvalReport>& site_reports) {
  if (site_reports.empty()) throw ValidationError("cannot pool zero reports");
  PooledReport pooled;
  pooled.method = site_reports.front().method;
  pooled.sites = site_reports.size();
  std::vector<double> top1, top5, csmf;
  bool all_top5 = true;
  for (const auto& r : site_reports) {
    if (r.method != pooled.method) {
      throw ValidationError("pooling mixed methods '" + pooled.method + "' and '" + r.method + "'");
    }
    top1.push_back(r.top1);
    csmf.push_back(r.csmf);
    if (r.top5) top5.push_back(*r.top5);
    else all_top5 = false;
  }
  pooled.top1 = pool_values(top1);
  pooled.csmf = pool_values(csmf);
  if (all_top5) pooled.top5 = pool_values(top5);
  return pooled;
}

// --- serialization --------------------------------------------------------

inline nlohmann::json report_to_json(const EvalReport& report, const CauseCodebook& codebook) {
  nlohmann::json j;
  j["method"] = report.method;
  if (report.site) j["site"] = *report.site;
  j["n"] = report.n;
  j["top1"] = report.top1;
  if (report.top5) j["top5"] = *report.top5;
  j["csmf"] = report.csmf;
  j["csmf_one_hot"] = report.csmf_one_hot;
  nlohmann::json per_cause = nlohmann::json::object();
  for (const auto& [cause, stat] : report.per_cause_top1) {
    per_cause[codebook.label(cause)] = {{"top1", stat.top1}, {"n", stat.n}};
  }
  j["per_cause_top1"] = per_cause;
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& b : report.length_buckets) {
    buckets.push_back({{"bucket", b.label}, {"top1", b.top1}, {"n", b.n}});
  }
  j["length_buckets"] = buckets;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j, const CauseCodebook& codebook) {
  EvalReport report;
  report.method = j.at("method").get<std::string>();
  if (j.contains("site")) report.site = j["site"].get<std::string>();
  report.n = j.at("n").get<std::size_t>();
  report.top1 = j.at("top1").get<double>();
  if (j.contains("top5")) report.top5 = j["top5"].get<double>();
  report.csmf = j.at("csmf").get<double>();
  report.csmf_one_hot = j.value("csmf_one_hot", false);
  for (const auto& [label, stat] : j.at("per_cause_top1").items()) {
    const std::size_t cause = codebook.resolve_or_throw(label, "report per-cause table");
    report.per_cause_top1[cause] = {stat.at("top1").get<double>(), stat.at("n").get<std::size_t>()};
  }
  for (const auto& b : j.at("length_buckets")) {
    report.length_buckets.push_back(
        {b.at("bucket").get<std::string>(), b.at("top1").get<double>(), b.at("n").get<std::size_t>()});
  }
  return report;
}

// --- aligned-column text tables -------------------------------------------

namespace detail {

inline std::string format_fraction(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3) << v;
  return out.str();
}

inline std::string render_aligned(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths;
  for (const auto& row : rows) {
    if (widths.size() < row.size()) widths.resize(row.size(), 0);
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
  }
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << "  ";
      out << std::left << std::setw(static_cast<int>(widths[i])) << row[i];
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace detail

// Site-by-method table of one scalar metric, with a final "Mean (sd)" row.
inline std::string render_metric_table(const std::vector<EvalReport>& reports,
                                       const std::string& metric) {
  auto pick = [&](const EvalReport& r) -> std::optional<double> {
    if (metric == "csmf") return r.csmf;
    if (metric == "top1") return r.top1;
    if (metric == "top5") return r.top5;
    throw ValidationError("unknown metric '" + metric + "'");
  };
  std::vector<std::string> methods, sites;
  std::map<std::pair<std::string, std::string>, std::optional<double>> cells;
  std::map<std::string, std::vector<double>> by_method;
  for (const auto& r : reports) {
    if (!r.site) continue;
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    if (std::find(sites.begin(), sites.end(), *r.site) == sites.end()) sites.push_back(*r.site);
    auto value = pick(r);
    cells[{r.method, *r.site}] = value;
    if (value) by_method[r.method].push_back(*value);
  }
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header = {"Site"};
  header.insert(header.end(), methods.begin(), methods.end());
  rows.push_back(header);
  for (const auto& site : sites) {
    std::vector<std::string> row = {site};
    for (const auto& method : methods) {
      auto it = cells.find({method, site});
      row.push_back(it != cells.end() && it->second ? detail::format_fraction(*it->second) : "--");
    }
    rows.push_back(row);
  }
  std::vector<std::string> mean_row = {"Mean (sd)"};
  for (const auto& method : methods) {
    auto it = by_method.find(method);
    if (it == by_method.end() || it->second.empty()) {
      mean_row.push_back("--");
      continue;
    }
    PooledStat stat = pool_values(it->second);
    mean_row.push_back(detail::format_fraction(stat.mean) + " (" + detail::format_fraction(stat.sd) + ")");
  }
  rows.push_back(mean_row);
  return detail::render_aligned(rows);
}

// Cause-by-site table of per-cause Top-1 for one method; "--" marks no cases.
inline std::string render_per_cause_table(const std::vector<EvalReport>& reports,
                                          const CauseCodebook& codebook) {
  std::vector<std::string> sites;
  std::map<std::string, const EvalReport*> by_site;
  for (const auto& r : reports) {
    if (!r.site) continue;
    if (by_site.emplace(*r.site, &r).second) sites.push_back(*r.site);
  }
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header = {"Cause of Death"};
  header.insert(header.end(), sites.begin(), sites.end());
  rows.push_back(header);
  for (std::size_t cause = 0; cause < codebook.size(); ++cause) {
    bool any = false;
    std::vector<std::string> row = {codebook.label(cause)};
    for (const auto& site : sites) {
      const auto& per_cause = by_site[site]->per_cause_top1;
      auto it = per_cause.find(cause);
      if (it == per_cause.end()) {
        row.push_back("--");
      } else {
        row.push_back(detail::format_fraction(it->second.top1));
        any = true;
      }
    }
    if (any) rows.push_back(row);
  }
  return detail::render_aligned(rows);
}

// Accuracy-by-narrative-length table. The scope line states what was pooled,
// since bucket accuracies depend on which sites and methods went in.
inline std::string render_length_table(const EvalReport& report) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"Narrative length", "Top-1", "n"});
  for (const auto& b : report.length_buckets) {
    rows.push_back({b.label, detail::format_fraction(b.top1), std::to_string(b.n)});
  }
  std::string scope = "scope: method=" + report.method + ", " +
                      (report.site ? "site=" + *report.site : "all sites pooled");
  return scope + "\n" + detail::render_aligned(rows);
}

}  // namespace vapipe
