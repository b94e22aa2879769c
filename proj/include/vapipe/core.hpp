#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace vapipe {

// Malformed input or a broken precondition the caller can fix.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class AgeGroup { adult, child, neonate };
enum class Sex { male, female, unknown };
enum class TriState { yes, no, missing };
enum class Confidence { high, medium, low };

// Probability vectors must sum to 1 within this after construction.
inline constexpr double kProbSumTol = 1e-9;
// Ingested vectors may be off by up to this before the single renormalization.
inline constexpr double kIngestSumTol = 1e-6;
// Ranked predictions carry at most this many causes.
inline constexpr std::size_t kMaxRanked = 5;

inline std::string to_string(AgeGroup g) {
  switch (g) {
    case AgeGroup::adult: return "adult";
    case AgeGroup::child: return "child";
    case AgeGroup::neonate: return "neonate";
  }
  throw std::logic_error("unreachable age group");
}

inline AgeGroup age_group_from_string(std::string_view s) {
  if (s == "adult") return AgeGroup::adult;
  if (s == "child") return AgeGroup::child;
  if (s == "neonate") return AgeGroup::neonate;
  throw ValidationError("unknown age group: '" + std::string(s) + "'");
}

// Label-set sizes the canonical per-age-group codebooks must have.
inline constexpr std::size_t canonical_cause_count(AgeGroup g) {
  switch (g) {
    case AgeGroup::adult: return 34;
    case AgeGroup::child: return 21;
    case AgeGroup::neonate: return 6;
  }
  return 0;
}

inline std::string to_string(Sex s) {
  switch (s) {
    case Sex::male: return "male";
    case Sex::female: return "female";
    case Sex::unknown: return "unknown";
  }
  throw std::logic_error("unreachable sex");
}

inline Sex sex_from_string(std::string_view s) {
  if (s == "male") return Sex::male;
  if (s == "female") return Sex::female;
  if (s == "unknown" || s.empty()) return Sex::unknown;
  throw ValidationError("unknown sex: '" + std::string(s) + "'");
}

inline std::string to_string(Confidence c) {
  switch (c) {
    case Confidence::high: return "high";
    case Confidence::medium: return "medium";
    case Confidence::low: return "low";
  }
  throw std::logic_error("unreachable confidence");
}

inline Confidence confidence_from_string(std::string_view s) {
  if (s == "high") return Confidence::high;
  if (s == "medium") return Confidence::medium;
  if (s == "low") return Confidence::low;
  throw ValidationError("unknown confidence: '" + std::string(s) + "'");
}

namespace detail {

// Lowercase, trim, and collapse internal whitespace runs to single spaces.
inline std::string fold_label(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (char ch : raw) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!out.empty()) pending_space = true;
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

// Keep only alphanumerics, lowercased. Last resort of label resolution.
inline std::string strip_punct(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (char ch : raw) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

}  // namespace detail

// Ordered cause-label set for one age group plus an alias table.
// Cause identity everywhere in the pipeline is the index into this list.
class CauseCodebook {
 public:
  CauseCodebook(AgeGroup age_group, std::vector<std::string> labels,
                const std::vector<std::pair<std::string, std::string>>& aliases = {})
      : age_group_(age_group), labels_(std::move(labels)) {
    if (labels_.empty()) throw ValidationError("codebook needs at least one label");
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      const std::string folded = detail::fold_label(labels_[i]);
      if (folded.empty()) throw ValidationError("blank cause label at position " + std::to_string(i));
      if (!canonical_.emplace(folded, i).second) {
        throw ValidationError("duplicate cause label (case-insensitive): '" + labels_[i] + "'");
      }
      stripped_.emplace(detail::strip_punct(labels_[i]), i);
    }
    for (const auto& [alias, canonical] : aliases) add_alias(alias, canonical);
  }

  AgeGroup age_group() const { return age_group_; }
  std::size_t size() const { return labels_.size(); }
  const std::string& label(std::size_t i) const { return labels_.at(i); }
  const std::vector<std::string>& labels() const { return labels_; }

  void add_alias(std::string_view alias, std::string_view canonical_label) {
    auto it = canonical_.find(detail::fold_label(canonical_label));
    if (it == canonical_.end()) {
      throw ValidationError("alias '" + std::string(alias) + "' targets unknown label '" +
                            std::string(canonical_label) + "'");
    }
    aliases_[detail::fold_label(alias)] = it->second;
  }

  // Resolution pipeline: fold -> exact label -> alias -> punctuation-stripped.
  std::optional<std::size_t> resolve(std::string_view raw) const {
    const std::string folded = detail::fold_label(raw);
    if (folded.empty()) return std::nullopt;
    if (auto it = canonical_.find(folded); it != canonical_.end()) return it->second;
    if (auto it = aliases_.find(folded); it != aliases_.end()) return it->second;
    if (auto it = stripped_.find(detail::strip_punct(raw)); it != stripped_.end()) return it->second;
    return std::nullopt;
  }

  std::size_t resolve_or_throw(std::string_view raw, std::string_view context) const {
    auto idx = resolve(raw);
    if (!idx) {
      throw ValidationError("unresolvable cause label '" + std::string(raw) + "' (" +
                            std::string(context) + ")");
    }
    return *idx;
  }

 private:
  AgeGroup age_group_;
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::size_t> canonical_;
  std::unordered_map<std::string, std::size_t> aliases_;
  std::unordered_map<std::string, std::size_t> stripped_;
};

// One death record. `age_value` is years, except days for neonates.
struct VaRecord {
  std::string id;
  std::string site;
  AgeGroup age_group = AgeGroup::adult;
  double age_value = 0.0;
  Sex sex = Sex::unknown;
  std::map<std::string, TriState> symptoms;
  std::optional<std::string> narrative;
  std::optional<std::size_t> true_cause;
};

// Dense per-cause probability distribution: nonnegative, sums to 1.
class ProbVector {
 public:
  ProbVector() = default;

  // Trusted constructor: validates against kProbSumTol, never rescales.
  explicit ProbVector(std::vector<double> probs) : p_(std::move(probs)) {
    double sum = 0.0;
    for (double v : p_) {
      if (!std::isfinite(v) || v < 0.0) throw ValidationError("probability entries must be finite and >= 0");
      sum += v;
    }
    if (p_.empty() || std::abs(sum - 1.0) > kProbSumTol) {
      throw ValidationError("probabilities must sum to 1 within 1e-9 (got " + std::to_string(sum) + ")");
    }
  }

  // Ingestion path: reject if the sum is off by more than kIngestSumTol,
  // otherwise renormalize exactly once.
  static ProbVector from_ingested(std::vector<double> probs) {
    double sum = 0.0;
    for (double v : probs) {
      if (!std::isfinite(v) || v < 0.0) throw ValidationError("probability entries must be finite and >= 0");
      sum += v;
    }
    // The boundary itself (off by exactly 1e-6) is acceptable; the slack
    // keeps rounding noise from tipping it over.
    if (probs.empty() || std::abs(sum - 1.0) > kIngestSumTol + 1e-12) {
      throw ValidationError("probabilities sum to " + std::to_string(sum) +
                            "; off by more than 1e-6, refusing to renormalize");
    }
    for (double& v : probs) v /= sum;
    ProbVector out;
    out.p_ = std::move(probs);
    return out;
  }

  std::size_t size() const { return p_.size(); }
  double operator[](std::size_t i) const { return p_[i]; }
  const std::vector<double>& values() const { return p_; }

  // Lowest index wins ties, everywhere.
  std::size_t argmax() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < p_.size(); ++i) {
      if (p_[i] > p_[best]) best = i;
    }
    return best;
  }

 private:
  std::vector<double> p_;
};

// Same representation and invariants; named for what it holds.
using PrevalenceVector = ProbVector;

struct RankedEntry {
  std::size_t cause = 0;
  Confidence confidence = Confidence::medium;

  friend bool operator==(const RankedEntry& a, const RankedEntry& b) {
    return a.cause == b.cause && a.confidence == b.confidence;
  }
};

// Up to five ranked causes; rank order is significant.
struct RankedPrediction {
  std::vector<RankedEntry> entries;

  void validate(std::size_t cause_count) const {
    if (entries.empty() || entries.size() > kMaxRanked) {
      throw ValidationError("ranked prediction must carry 1.." + std::to_string(kMaxRanked) +
                            " entries, got " + std::to_string(entries.size()));
    }
    std::vector<bool> seen(cause_count, false);
    for (const auto& e : entries) {
      if (e.cause >= cause_count) {
        throw ValidationError("ranked cause index " + std::to_string(e.cause) + " out of range");
      }
      if (seen[e.cause]) throw ValidationError("duplicate cause in ranked prediction");
      seen[e.cause] = true;
    }
  }

  friend bool operator==(const RankedPrediction& a, const RankedPrediction& b) {
    return a.entries == b.entries;
  }
};

// Per-case prediction: at least one of the two representations.
struct Prediction {
  std::optional<ProbVector> probs;
  std::optional<RankedPrediction> ranked;

  bool valid() const { return probs.has_value() || ranked.has_value(); }
};

// All predictions one method produced for a cohort, keyed by record id.
struct PredictionSet {
  std::string method;
  std::map<std::string, Prediction> by_id;
};

// Cause indices in rank order for scoring: the explicit ranked list when
// present, else probabilities descending with lowest index breaking ties.
inline std::vector<std::size_t> rank_order(const Prediction& pred) {
  if (pred.ranked) {
    std::vector<std::size_t> order;
    order.reserve(pred.ranked->entries.size());
    for (const auto& e : pred.ranked->entries) order.push_back(e.cause);
    return order;
  }
  if (!pred.probs) throw ValidationError("prediction carries neither probs nor ranked form");
  std::vector<std::size_t> order(pred.probs->size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto& p = pred.probs->values();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (p[a] != p[b]) return p[a] > p[b];
    return a < b;
  });
  return order;
}

inline ProbVector one_hot(std::size_t cause_count, std::size_t cause) {
  if (cause >= cause_count) throw ValidationError("one_hot cause index out of range");
  std::vector<double> p(cause_count, 0.0);
  p[cause] = 1.0;
  return ProbVector(std::move(p));
}

// Dense probabilities for a prediction; ranked-only predictions become the
// rank-1 one-hot vector (reported downstream as "one-hot CSMF").
inline ProbVector to_prob_vector(const Prediction& pred, std::size_t cause_count) {
  if (pred.probs) {
    if (pred.probs->size() != cause_count) {
      throw ValidationError("probability vector length does not match codebook size");
    }
    return *pred.probs;
  }
  if (!pred.ranked || pred.ranked->entries.empty()) {
    throw ValidationError("prediction carries neither probs nor ranked form");
  }
  return one_hot(cause_count, pred.ranked->entries.front().cause);
}

// Scale a nonnegative vector to sum exactly to 1.
inline ProbVector normalize(const std::vector<double>& raw) {
  if (raw.empty()) throw ValidationError("cannot normalize an empty vector");
  double sum = 0.0;
  for (double v : raw) {
    if (!std::isfinite(v)) throw ValidationError("cannot normalize non-finite values");
    if (v < 0.0) throw ValidationError("cannot normalize a vector with negative entries");
    sum += v;
  }
  if (sum <= 0.0) throw ValidationError("cannot normalize an all-zero vector");
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] / sum;
  ProbVector pv;
  // Bypass the tolerance check: out sums to 1 up to rounding by construction,
  // but renormalize residual error anyway so the invariant holds exactly.
  return ProbVector::from_ingested(std::move(out));
}

// Fraction of records with each true cause. Every record must be labeled.
inline PrevalenceVector empirical_prevalence(const std::vector<VaRecord>& records,
                                             const CauseCodebook& codebook) {
  if (records.empty()) throw ValidationError("cannot compute prevalence of an empty cohort");
  std::vector<double> counts(codebook.size(), 0.0);
  for (const auto& r : records) {
    if (!r.true_cause) {
      throw ValidationError("record '" + r.id + "' has no gold cause; prevalence needs a fully labeled cohort");
    }
    if (*r.true_cause >= codebook.size()) {
      throw ValidationError("record '" + r.id + "' has out-of-range cause index");
    }
    counts[*r.true_cause] += 1.0;
  }
  return normalize(counts);
}

}  // namespace vapipe
