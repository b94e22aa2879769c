#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vapipe/core.hpp"
#include "vapipe/io.hpp"

namespace vapipe {

struct SiteSpec {
  std::string name;
  std::size_t cases = 0;
  PrevalenceVector prevalence;
};

// Multi-site generator with controllable marginal shift (per-site prevalence)
// and conditional shift (per-site flips of the symptom profile).
struct SynthConfig {
  std::vector<SiteSpec> sites;
  std::size_t symptom_count = 12;
  // rates[cause][symptom]; empty means "draw deterministically from the seed".
  std::vector<std::vector<double>> base_symptom_profile;
  double site_flip_rate = 0.0;
  std::size_t embedding_dim = 8;
  double class_separation = 2.0;
  std::uint64_t seed = 42;
};

namespace detail {

// splitmix64: decorrelates per-site and per-purpose streams from one seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::size_t draw_categorical(const std::vector<double>& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  double acc = 0.0;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    acc += probs[c];
    if (u < acc) return c;
  }
  return probs.size() - 1;
}

}  // namespace detail

inline void validate_synth_config(const SynthConfig& config, const CauseCodebook& codebook) {
  if (config.sites.empty()) throw ValidationError("synthetic config needs at least one site");
  std::set<std::string> names;
  for (const auto& site : config.sites) {
    if (site.name.empty()) throw ValidationError("site name must be nonempty");
    if (!names.insert(site.name).second) throw ValidationError("duplicate site name '" + site.name + "'");
    if (site.cases == 0) throw ValidationError("site '" + site.name + "' needs at least one case");
    if (site.prevalence.size() != codebook.size()) {
      throw ValidationError("site '" + site.name + "' prevalence length does not match codebook");
    }
  }
  if (config.site_flip_rate < 0.0 || config.site_flip_rate > 1.0) {
    throw ValidationError("site flip rate must lie in [0,1]");
  }
  if (config.embedding_dim == 0) throw ValidationError("embedding dim must be positive");
  if (config.class_separation < 0.0) throw ValidationError("class separation must be >= 0");
  if (!config.base_symptom_profile.empty()) {
    if (config.base_symptom_profile.size() != codebook.size()) {
      throw ValidationError("symptom profile must have one row per cause");
    }
    for (const auto& row : config.base_symptom_profile) {
      if (row.size() != config.symptom_count) {
        throw ValidationError("symptom profile rows must match symptom_count");
      }
      for (double rate : row) {
        if (rate < 0.0 || rate > 1.0) throw ValidationError("symptom rates must lie in [0,1]");
      }
    }
  }
}

// Deterministic given the seed: per-site streams are split from it, so adding
// a site never perturbs the draws of another.
inline std::pair<std::vector<VaRecord>, EmbeddingTable> generate_cohort(
    const SynthConfig& config, const CauseCodebook& codebook) {
  validate_synth_config(config, codebook);
  const std::size_t c_count = codebook.size();

  std::vector<std::vector<double>> profile = config.base_symptom_profile;
  if (profile.empty()) {
    std::mt19937_64 rng(detail::mix_seed(config.seed, 0x70726f66));
    std::uniform_real_distribution<double> unit(0.05, 0.95);
    profile.assign(c_count, std::vector<double>(config.symptom_count, 0.0));
    for (auto& row : profile) {
      for (double& rate : row) rate = unit(rng);
    }
  }

  // Class-conditional embedding means, shared by all sites. Axis-aligned
  // when the dimension allows, random directions otherwise.
  std::vector<std::vector<double>> means(c_count, std::vector<double>(config.embedding_dim, 0.0));
  if (config.embedding_dim >= c_count) {
    for (std::size_t c = 0; c < c_count; ++c) means[c][c] = config.class_separation;
  } else {
    std::mt19937_64 rng(detail::mix_seed(config.seed, 0x6d65616e));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& mean : means) {
      double norm_sq = 0.0;
      for (double& v : mean) {
        v = gauss(rng);
        norm_sq += v * v;
      }
      const double scale = config.class_separation / std::sqrt(std::max(norm_sq, 1e-12));
      for (double& v : mean) v *= scale;
    }
  }

  std::vector<VaRecord> records;
  EmbeddingTable table;
  table.dim = config.embedding_dim;

  for (std::size_t si = 0; si < config.sites.size(); ++si) {
    const auto& site = config.sites[si];
    std::mt19937_64 rng(detail::mix_seed(config.seed, 0x73697465 + si));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Per-site conditional shift: each (cause, symptom) rate flips with the
    // configured probability.
    std::vector<std::vector<double>> site_profile = profile;
    for (auto& row : site_profile) {
      for (double& rate : row) {
        if (unit(rng) < config.site_flip_rate) rate = 1.0 - rate;
      }
    }

    for (std::size_t i = 0; i < site.cases; ++i) {
      VaRecord rec;
      rec.id = site.name + "-" + std::to_string(i);
      rec.site = site.name;
      rec.age_group = codebook.age_group();
      switch (codebook.age_group()) {
        case AgeGroup::adult: rec.age_value = 20.0 + std::floor(unit(rng) * 60.0); break;
        case AgeGroup::child: rec.age_value = 1.0 + std::floor(unit(rng) * 11.0); break;
        case AgeGroup::neonate: rec.age_value = std::floor(unit(rng) * 28.0); break;
      }
      rec.sex = unit(rng) < 0.5 ? Sex::male : Sex::female;
      const std::size_t cause = detail::draw_categorical(site.prevalence.values(), rng);
      rec.true_cause = cause;

      std::size_t positives = 0;
      std::string narrative = "Household interview for a " + to_string(codebook.age_group()) +
                              " death in " + site.name + ".";
      for (std::size_t s = 0; s < config.symptom_count; ++s) {
        const std::string question = "q" + std::to_string(s);
        const bool present = unit(rng) < site_profile[cause][s];
        rec.symptoms[question] = present ? TriState::yes : TriState::no;
        if (present) {
          ++positives;
          narrative += " The respondent reported " + question + " in the final illness.";
        }
      }
      if (positives == 0) narrative += " No specific symptoms were reported.";
      rec.narrative = narrative;

      std::vector<float> embedding(config.embedding_dim);
      for (std::size_t d = 0; d < config.embedding_dim; ++d) {
        embedding[d] = static_cast<float>(means[cause][d] + gauss(rng));
      }
      table.by_id.emplace(rec.id, std::move(embedding));
      records.push_back(std::move(rec));
    }
  }
  return {std::move(records), std::move(table)};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig config;
  for (const auto& site : j.at("sites")) {
    SiteSpec spec;
    spec.name = site.at("name").get<std::string>();
    spec.cases = site.at("n").get<std::size_t>();
    spec.prevalence = ProbVector::from_ingested(site.at("prevalence").get<std::vector<double>>());
    config.sites.push_back(std::move(spec));
  }
  config.symptom_count = j.value("symptom_count", config.symptom_count);
  if (j.contains("base_symptom_profile")) {
    config.base_symptom_profile = j["base_symptom_profile"].get<std::vector<std::vector<double>>>();
  }
  config.site_flip_rate = j.value("site_flip_rate", config.site_flip_rate);
  config.embedding_dim = j.value("embedding_dim", config.embedding_dim);
  config.class_separation = j.value("class_separation", config.class_separation);
  config.seed = j.value("seed", config.seed);
  return config;
}

inline nlohmann::json synth_config_to_json(const SynthConfig& config) {
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& site : config.sites) {
    sites.push_back({{"name", site.name}, {"n", site.cases}, {"prevalence", site.prevalence.values()}});
  }
  nlohmann::json j = {{"sites", sites},
                      {"symptom_count", config.symptom_count},
                      {"site_flip_rate", config.site_flip_rate},
                      {"embedding_dim", config.embedding_dim},
                      {"class_separation", config.class_separation},
                      {"seed", config.seed}};
  if (!config.base_symptom_profile.empty()) j["base_symptom_profile"] = config.base_symptom_profile;
  return j;
}

}  // namespace vapipe
