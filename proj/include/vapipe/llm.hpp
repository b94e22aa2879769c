#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "vapipe/core.hpp"
#include "vapipe/manifest.hpp"

namespace vapipe {

// Model output that could not be turned into a ranked prediction; retried
// with a corrective instruction before a case is declared failed.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AuthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PromptTemplate {
  AgeGroup age_group = AgeGroup::adult;
  std::string base_text;
  std::string guidance;
  std::string examples;
  // Symptom question ids rendered as a care-access context block when present.
  std::vector<std::string> care_access_ids = {"care_sought", "facility_visit", "treatment_received"};
};

struct Prompt {
  std::string system_text;
  std::string user_text;
};

namespace detail {

inline std::string age_group_plural_upper(AgeGroup g) {
  switch (g) {
    case AgeGroup::adult: return "ADULTS";
    case AgeGroup::child: return "CHILDREN";
    case AgeGroup::neonate: return "NEONATES";
  }
  return "";
}

inline std::string replace_all(std::string text, std::string_view token, std::string_view value) {
  std::size_t pos = 0;
  while ((pos = text.find(token, pos)) != std::string::npos) {
    text.replace(pos, token.size(), value);
    pos += value.size();
  }
  return text;
}

}  // namespace detail

// A leftover "{placeholder_name}" token; literal JSON braces in the output
// contract do not match this shape.
inline bool has_unresolved_placeholders(std::string_view text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '{') continue;
    std::size_t j = i + 1;
    while (j < text.size() && (std::islower(static_cast<unsigned char>(text[j])) || text[j] == '_')) ++j;
    if (j > i + 1 && j < text.size() && text[j] == '}') return true;
  }
  return false;
}

inline std::string default_base_prompt() {
  return R"(You are an experienced verbal-autopsy coder with medical expertise specializing in {age_group} deaths.

TASK
1. Think step-by-step (hide the chain-of-thought).
2. Rank up to five causes from the allowed list, most likely first, each with a confidence level (high/medium/low).
3. Provide a single-sentence rationale citing:
   (a) key temporal clues,
   (b) the immediate mechanism, and
   (c) how comorbidities/injuries were weighed.

ALLOWED CAUSES FOR {age_group_upper}:
{cod_list}

ANALYSIS FRAMEWORK
- Build an internal timeline: onset -> progression -> death
- Distinguish the primary underlying cause from complications
- Separate similar conditions using explicit criteria
- For external causes: assess intentionality (accident vs. intentional harm)
- Balance epidemiological context with individual case specifics
- Consider age-specific patterns and vulnerabilities

{age_specific_guidance}

PRIMARY CAUSE HIERARCHY
1. Immediate mechanism (what acutely stopped heart/breathing)
2. Underlying disease (what led to that mechanism)
3. Contributing factors (what worsened the course)

{examples}

OUTPUT FORMAT
Respond with exactly one JSON object and nothing else, shaped as:
{"predictions": [{"cause": "<label from the allowed list>", "confidence": "high|medium|low"}], "rationale": "<one sentence>"}
List at most five predictions, most likely first.)";
}

inline PromptTemplate default_prompt_template(AgeGroup g) {
  PromptTemplate tpl;
  tpl.age_group = g;
  tpl.base_text = default_base_prompt();
  switch (g) {
    case AgeGroup::adult:
      tpl.guidance =
          "ADULT GUIDANCE\n"
          "- OTHER CVD vs. ACUTE MI: MI shows <1h onset with crushing chest pain and collapse; "
          "other CVD shows chronic dyspnea/edema with gradual decline.\n"
          "- AIDS vs. TB: AIDS with chronic wasting and opportunistic infections; TB with cough "
          ">2 weeks, night sweats, hemoptysis.\n"
          "- Consider maternal causes for women of reproductive age with peripartum timing.";
      tpl.examples =
          "# -------- EXAMPLE --------\n"
          "DEMOGRAPHICS: 55-year-old male, Mexico\n"
          "QUESTIONNAIRE: reported: sudden chest pain; denied: fever, cough\n"
          "NARRATIVE: \"He clutched his chest while working and collapsed within the hour.\"\n"
          "{\"predictions\": [{\"cause\": \"Acute Myocardial Infarction\", \"confidence\": \"high\"}], "
          "\"rationale\": \"Abrupt chest pain with hyperacute collapse indicates AMI; diabetes noted "
          "but not terminal.\"}\n"
          "# -------- END EXAMPLE --------";
      break;
    case AgeGroup::child:
      tpl.guidance =
          "CHILD GUIDANCE\n"
          "- PNEUMONIA vs. SEPSIS: pneumonia with cough, fever, fast breathing over 2-7 days; "
          "sepsis with rapid multi-organ decline, poor feeding, lethargy.\n"
          "- Weigh vaccination and nutrition context, and environmental hazards for injuries.";
      tpl.examples =
          "# -------- EXAMPLE --------\n"
          "DEMOGRAPHICS: 3-year-old male, rural Tanzania\n"
          "QUESTIONNAIRE: reported: fever, convulsions, unconsciousness\n"
          "NARRATIVE: \"High fever that comes and goes, then had fits and stopped responding.\"\n"
          "{\"predictions\": [{\"cause\": \"Malaria\", \"confidence\": \"high\"}], "
          "\"rationale\": \"Cyclical fever with seizures and coma in an endemic area indicates "
          "cerebral malaria.\"}\n"
          "# -------- END EXAMPLE --------";
      break;
    case AgeGroup::neonate:
      tpl.guidance =
          "NEONATE GUIDANCE\n"
          "- Emphasize timing relative to birth (<24h, 1-7d, >7d), maternal and delivery factors, "
          "birth weight and gestation.\n"
          "- BIRTH ASPHYXIA vs. PRETERM: asphyxia with failure to cry or breathe at birth and "
          "early seizures; preterm with very low birth weight, persistent respiratory distress, "
          "temperature instability.";
      tpl.examples =
          "# -------- EXAMPLE --------\n"
          "DEMOGRAPHICS: 2-day-old male, home delivery\n"
          "QUESTIONNAIRE: reported: did not cry at birth, difficulty breathing\n"
          "NARRATIVE: \"Long labor, baby didn't cry when born, tried to make him breathe.\"\n"
          "{\"predictions\": [{\"cause\": \"Birth asphyxia\", \"confidence\": \"high\"}], "
          "\"rationale\": \"Failure to establish breathing at birth after prolonged labor indicates "
          "asphyxia.\"}\n"
          "# -------- END EXAMPLE --------";
      break;
  }
  return tpl;
}

// Instantiated system prompt plus the per-case user sections. Pure: the same
// record and template always produce identical bytes.
inline Prompt build_prompt(const VaRecord& record, const CauseCodebook& codebook,
                           const PromptTemplate& tpl) {
  if (record.age_group != tpl.age_group || codebook.age_group() != tpl.age_group) {
    throw ValidationError("record, codebook, and template age groups must match");
  }

  std::string cod_list;
  for (std::size_t i = 0; i < codebook.size(); ++i) {
    if (i) cod_list += "; ";
    cod_list += codebook.label(i);
  }
  cod_list += ".";

  Prompt prompt;
  prompt.system_text = detail::replace_all(tpl.base_text, "{age_group}", to_string(tpl.age_group));
  prompt.system_text = detail::replace_all(prompt.system_text, "{age_group_upper}",
                                           detail::age_group_plural_upper(tpl.age_group));
  prompt.system_text = detail::replace_all(prompt.system_text, "{cod_list}", cod_list);
  prompt.system_text = detail::replace_all(prompt.system_text, "{age_specific_guidance}", tpl.guidance);
  prompt.system_text = detail::replace_all(prompt.system_text, "{examples}", tpl.examples);
  if (has_unresolved_placeholders(prompt.system_text)) {
    throw ValidationError("system prompt still contains unresolved placeholders");
  }

  std::ostringstream user;
  const char* age_unit = record.age_group == AgeGroup::neonate ? "day" : "year";
  user << "DEMOGRAPHICS: " << record.age_value << "-" << age_unit << "-old " << to_string(record.sex)
       << ", " << record.site << "\n";

  std::vector<std::string> reported, denied, care_context;
  for (const auto& [question, state] : record.symptoms) {
    const bool is_care = std::find(tpl.care_access_ids.begin(), tpl.care_access_ids.end(), question) !=
                         tpl.care_access_ids.end();
    if (state == TriState::missing) continue;
    if (is_care) {
      care_context.push_back(question + "=" + (state == TriState::yes ? "yes" : "no"));
      continue;
    }
    if (state == TriState::yes) reported.push_back(question);
    else denied.push_back(question);
  }
  user << "QUESTIONNAIRE:";
  if (reported.empty() && denied.empty()) {
    user << " (no symptom responses)";
  } else {
    if (!reported.empty()) {
      user << " reported:";
      for (std::size_t i = 0; i < reported.size(); ++i) user << (i ? ", " : " ") << reported[i];
      if (!denied.empty()) user << ";";
    }
    if (!denied.empty()) {
      user << " denied:";
      for (std::size_t i = 0; i < denied.size(); ++i) user << (i ? ", " : " ") << denied[i];
    }
  }
  user << "\n";
  if (!care_context.empty()) {
    user << "CARE ACCESS:";
    for (std::size_t i = 0; i < care_context.size(); ++i) user << (i ? ", " : " ") << care_context[i];
    user << "\n";
  }
  user << "NARRATIVE: \"" << (record.narrative ? *record.narrative : "(none recorded)") << "\"";
  prompt.user_text = user.str();
  return prompt;
}

// Full resolution pipeline for a model-emitted cause string.
inline std::optional<std::size_t> normalize_label(std::string_view raw, const CauseCodebook& codebook) {
  return codebook.resolve(raw);
}

namespace detail {

// Candidate balanced { ... } spans, string- and escape-aware.
inline std::vector<std::string> json_object_candidates(std::string_view text) {
  std::vector<std::string> out;
  for (std::size_t start = 0; start < text.size(); ++start) {
    if (text[start] != '{') continue;
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = start; i < text.size(); ++i) {
      const char c = text[i];
      if (in_string) {
        if (escaped) escaped = false;
        else if (c == '\\') escaped = true;
        else if (c == '"') in_string = false;
        continue;
      }
      if (c == '"') in_string = true;
      else if (c == '{') ++depth;
      else if (c == '}') {
        if (--depth == 0) {
          out.emplace_back(text.substr(start, i - start + 1));
          break;
        }
      }
    }
  }
  return out;
}

}  // namespace detail

// Extract the first well-formed {"predictions": [...]} object anywhere in the
// response, resolve labels, drop duplicates keeping the first occurrence, and
// truncate to five entries.
inline RankedPrediction parse_response(std::string_view text, const CauseCodebook& codebook) {
  for (const auto& candidate : detail::json_object_candidates(text)) {
    nlohmann::json obj = nlohmann::json::parse(candidate, nullptr, /*allow_exceptions=*/false);
    if (obj.is_discarded() || !obj.is_object() || !obj.contains("predictions") ||
        !obj["predictions"].is_array()) {
      continue;
    }
    RankedPrediction ranked;
    std::vector<bool> seen(codebook.size(), false);
    for (const auto& item : obj["predictions"]) {
      if (!item.is_object() || !item.contains("cause") || !item["cause"].is_string()) continue;
      auto cause = normalize_label(item["cause"].get<std::string>(), codebook);
      if (!cause || seen[*cause]) continue;
      seen[*cause] = true;
      RankedEntry entry;
      entry.cause = *cause;
      entry.confidence = Confidence::medium;
      if (item.contains("confidence") && item["confidence"].is_string()) {
        const std::string folded = detail::fold_label(item["confidence"].get<std::string>());
        if (folded == "high") entry.confidence = Confidence::high;
        else if (folded == "low") entry.confidence = Confidence::low;
      }
      ranked.entries.push_back(entry);
      if (ranked.entries.size() == kMaxRanked) break;
    }
    if (ranked.entries.empty()) {
      throw ParseError("response JSON contained no resolvable cause labels");
    }
    return ranked;
  }
  throw ParseError("response contained no JSON object with a predictions array");
}

// Inverse of parse_response on the structured path.
inline std::string serialize_response(const RankedPrediction& ranked, const CauseCodebook& codebook,
                                      std::string_view rationale = "") {
  nlohmann::json predictions = nlohmann::json::array();
  for (const auto& e : ranked.entries) {
    predictions.push_back({{"cause", codebook.label(e.cause)}, {"confidence", to_string(e.confidence)}});
  }
  return nlohmann::json{{"predictions", predictions}, {"rationale", std::string(rationale)}}.dump();
}

// --- remote client ----------------------------------------------------------

struct LlmClientConfig {
  std::string endpoint = "http://127.0.0.1:8080/v1/chat/completions";
  std::string model = "gpt-5";
  double timeout_seconds = 60.0;
  std::size_t max_retries = 2;
  double backoff_base_seconds = 0.5;
  std::size_t max_concurrency = 4;
  std::string cache_dir = "llm_cache";
  std::string api_key_env = "VAPIPE_API_KEY";

  void validate() const {
    if (max_concurrency == 0) throw ValidationError("max_concurrency must be >= 1");
    if (timeout_seconds <= 0.0) throw ValidationError("timeout must be positive");
    if (backoff_base_seconds < 0.0) throw ValidationError("backoff base must be >= 0");
  }
};

inline LlmClientConfig llm_config_from_json(const nlohmann::json& j) {
  LlmClientConfig config;
  config.endpoint = j.value("endpoint", config.endpoint);
  config.model = j.value("model", config.model);
  config.timeout_seconds = j.value("timeout_seconds", config.timeout_seconds);
  config.max_retries = j.value("max_retries", config.max_retries);
  config.backoff_base_seconds = j.value("backoff_base_seconds", config.backoff_base_seconds);
  config.max_concurrency = j.value("max_concurrency", config.max_concurrency);
  config.cache_dir = j.value("cache_dir", config.cache_dir);
  config.api_key_env = j.value("api_key_env", config.api_key_env);
  config.validate();
  return config;
}

struct BatchFailure {
  std::string id;
  std::string error;
};

struct BatchResult {
  PredictionSet predictions;
  std::vector<BatchFailure> failures;
  std::size_t cache_hits = 0;
  std::size_t requests = 0;
};

namespace detail {

struct EndpointParts {
  std::string base;  // scheme://host[:port]
  std::string path;
};

inline EndpointParts split_endpoint(const std::string& endpoint) {
  const auto scheme_end = endpoint.find("://");
  if (scheme_end == std::string::npos) throw ValidationError("endpoint must include a scheme");
  const auto path_start = endpoint.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {endpoint, "/"};
  return {endpoint.substr(0, path_start), endpoint.substr(path_start)};
}

inline std::string cache_key(const std::string& model, const Prompt& prompt) {
  return sha256_hex(model + "\n" + prompt.system_text + "\n" + prompt.user_text);
}

inline std::optional<std::string> cache_lookup(const std::string& dir, const std::string& key) {
  const auto path = std::filesystem::path(dir) / (key + ".json");
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  nlohmann::json obj = nlohmann::json::parse(in, nullptr, false);
  if (obj.is_discarded() || !obj.contains("response")) return std::nullopt;
  return obj["response"].get<std::string>();
}

// Write-temp-then-rename so concurrent writers never expose a torn entry.
inline void cache_store(const std::string& dir, const std::string& key, const std::string& model,
                        const Prompt& prompt, const std::string& response) {
  std::filesystem::create_directories(dir);
  nlohmann::json obj = {{"model", model},
                        {"system", prompt.system_text},
                        {"user", prompt.user_text},
                        {"response", response}};
  const auto tmp = std::filesystem::path(dir) / (key + ".tmp");
  const auto final_path = std::filesystem::path(dir) / (key + ".json");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write cache entry " + tmp.string());
    out << obj.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, final_path);
}

}  // namespace detail

// One POST against a chat-completion endpoint; returns the message content.
// Auth failures abort the whole batch, anything else is retried per case.
inline std::string chat_completion_request(httplib::Client& client, const std::string& path,
                                           const LlmClientConfig& config, const std::string& api_key,
                                           const Prompt& prompt, const std::string& user_suffix) {
  nlohmann::json body = {
      {"model", config.model},
      {"messages", nlohmann::json::array({
                       nlohmann::json{{"role", "system"}, {"content", prompt.system_text}},
                       nlohmann::json{{"role", "user"}, {"content", prompt.user_text + user_suffix}},
                   })}};
  httplib::Headers headers;
  if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
  auto result = client.Post(path, headers, body.dump(), "application/json");
  if (!result) {
    throw std::runtime_error("network error: " + httplib::to_string(result.error()));
  }
  if (result->status == 401 || result->status == 403) {
    throw AuthError("authentication failed (HTTP " + std::to_string(result->status) + ")");
  }
  if (result->status != 200) {
    throw std::runtime_error("HTTP " + std::to_string(result->status) + ": " + result->body);
  }
  nlohmann::json reply = nlohmann::json::parse(result->body, nullptr, false);
  if (reply.is_discarded()) throw std::runtime_error("endpoint returned invalid JSON");
  try {
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("endpoint reply missing choices[0].message.content");
  }
}

// Cache-first batch prediction with bounded concurrency. Failed cases land in
// the failure manifest; they are never silently dropped.
inline BatchResult predict_batch(const std::vector<VaRecord>& records, const CauseCodebook& codebook,
                                 const PromptTemplate& tpl, const LlmClientConfig& config) {
  config.validate();
  BatchResult result;
  result.predictions.method = "llm";

  struct PendingCase {
    const VaRecord* record;
    Prompt prompt;
    std::string key;
  };
  std::vector<PendingCase> misses;
  for (const auto& record : records) {
    Prompt prompt = build_prompt(record, codebook, tpl);
    std::string key = detail::cache_key(config.model, prompt);
    if (auto cached = detail::cache_lookup(config.cache_dir, key)) {
      ++result.cache_hits;
      try {
        Prediction pred;
        pred.ranked = parse_response(*cached, codebook);
        result.predictions.by_id.emplace(record.id, std::move(pred));
      } catch (const ParseError& e) {
        result.failures.push_back({record.id, std::string("cached response unusable: ") + e.what()});
      }
      continue;
    }
    misses.push_back({&record, std::move(prompt), std::move(key)});
  }
  if (misses.empty()) return result;

  const char* key_env = std::getenv(config.api_key_env.c_str());
  if (key_env == nullptr || std::string_view(key_env).empty()) {
    throw AuthError("API key environment variable '" + config.api_key_env +
                    "' is not set and " + std::to_string(misses.size()) + " cases are not cached");
  }
  const std::string api_key = key_env;
  const auto endpoint = detail::split_endpoint(config.endpoint);

  struct CaseOutcome {
    std::optional<RankedPrediction> ranked;
    std::string error;
  };
  std::vector<CaseOutcome> outcomes(misses.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> request_count{0};
  std::atomic<bool> auth_failed{false};
  std::mutex auth_mutex;
  std::string auth_message;

  auto worker = [&]() {
    httplib::Client client(endpoint.base);
    client.set_connection_timeout(std::chrono::milliseconds(
        static_cast<long>(config.timeout_seconds * 1000)));
    client.set_read_timeout(std::chrono::milliseconds(static_cast<long>(config.timeout_seconds * 1000)));
    while (true) {
      const std::size_t index = next.fetch_add(1);
      if (index >= misses.size() || auth_failed.load()) return;
      const auto& pending = misses[index];
      CaseOutcome& outcome = outcomes[index];
      for (std::size_t attempt = 0; attempt <= config.max_retries; ++attempt) {
        if (auth_failed.load()) return;
        if (attempt > 0) {
          const double delay = config.backoff_base_seconds * std::pow(2.0, static_cast<double>(attempt - 1));
          std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        }
        const std::string suffix =
            attempt == 0 ? ""
                         : "\n\nREMINDER: respond with only the JSON object described in OUTPUT "
                           "FORMAT. No prose before or after it.";
        try {
          ++request_count;
          const std::string content = chat_completion_request(client, endpoint.path, config, api_key,
                                                              pending.prompt, suffix);
          outcome.ranked = parse_response(content, codebook);
          detail::cache_store(config.cache_dir, pending.key, config.model, pending.prompt, content);
          break;
        } catch (const AuthError& e) {
          std::lock_guard<std::mutex> lock(auth_mutex);
          auth_message = e.what();
          auth_failed.store(true);
          return;
        } catch (const std::exception& e) {
          outcome.error = e.what();
        }
      }
    }
  };

  std::vector<std::thread> threads;
  const std::size_t thread_count = std::min(config.max_concurrency, misses.size());
  threads.reserve(thread_count);
  for (std::size_t t = 0; t < thread_count; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  result.requests = request_count.load();

  if (auth_failed.load()) {
    throw AuthError(auth_message + " (endpoint " + config.endpoint + ")");
  }
  for (std::size_t i = 0; i < misses.size(); ++i) {
    if (outcomes[i].ranked) {
      Prediction pred;
      pred.ranked = std::move(outcomes[i].ranked);
      result.predictions.by_id.emplace(misses[i].record->id, std::move(pred));
    } else {
      result.failures.push_back({misses[i].record->id, outcomes[i].error});
    }
  }
  return result;
}

inline void write_failure_manifest(const std::string& path, const std::vector<BatchFailure>& failures) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  for (const auto& f : failures) {
    out << nlohmann::json{{"id", f.id}, {"error", f.error}}.dump() << '\n';
  }
}

}  // namespace vapipe
