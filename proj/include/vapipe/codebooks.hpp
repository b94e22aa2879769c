#pragma once

#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vapipe/core.hpp"

namespace vapipe {

// Canonical cause lists, one label per line, order significant. The index of
// a line is the cause index every other module exchanges.
namespace codebook_text {

inline constexpr std::string_view kAdult = R"(AIDS
Acute Myocardial Infarction
Asthma
Bite of Venomous Animal
Breast Cancer
COPD
Cervical Cancer
Cirrhosis
Colorectal Cancer
Diabetes
Diarrhea/Dysentery
Drowning
Epilepsy
Esophageal Cancer
Falls
Fires
Homicide
Leukemia/Lymphomas
Lung Cancer
Malaria
Maternal
Other Cardiovascular Diseases
Other Infectious Diseases
Other Injuries
Other Non-communicable Diseases
Pneumonia
Poisonings
Prostate Cancer
Renal Failure
Road Traffic
Stomach Cancer
Stroke
Suicide
TB
)";

inline constexpr std::string_view kChild = R"(AIDS
Bite of Venomous Animal
Diarrhea/Dysentery
Drowning
Encephalitis
Falls
Fires
Hemorrhagic fever
Malaria
Measles
Meningitis
Other Cancers
Other Cardiovascular Diseases
Other Defined Causes of Child Deaths
Other Digestive Diseases
Other Infectious Diseases
Pneumonia
Poisonings
Road Traffic
Sepsis
Violent Death
)";

inline constexpr std::string_view kNeonate = R"(Birth asphyxia
Congenital malformation
Meningitis/Sepsis
Pneumonia
Preterm Delivery
Stillbirth
)";

}  // namespace codebook_text

inline std::vector<std::string> parse_codebook_lines(std::string_view text) {
  std::vector<std::string> labels;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    labels.push_back(line);
  }
  return labels;
}

// Shorthand forms seen in reports and model output, mapped onto canonical labels.
inline std::vector<std::pair<std::string, std::string>> builtin_aliases(AgeGroup g) {
  switch (g) {
    case AgeGroup::adult:
      return {
          {"AMI", "Acute Myocardial Infarction"},
          {"Acute Myocardial Infarct.", "Acute Myocardial Infarction"},
          {"Heart Attack", "Acute Myocardial Infarction"},
          {"Tuberculosis", "TB"},
          {"Chronic Obstructive Pulmonary Disease", "COPD"},
          {"Other Cardiovascular", "Other Cardiovascular Diseases"},
          {"Other CVD", "Other Cardiovascular Diseases"},
          {"Other Infectious", "Other Infectious Diseases"},
          {"Other Non-communicable", "Other Non-communicable Diseases"},
          {"Road Traffic Accident", "Road Traffic"},
          {"Diarrhea", "Diarrhea/Dysentery"},
          {"Dysentery", "Diarrhea/Dysentery"},
          {"Leukemia", "Leukemia/Lymphomas"},
          {"Lymphoma", "Leukemia/Lymphomas"},
          {"Maternal Death", "Maternal"},
          {"Kidney Failure", "Renal Failure"},
      };
    case AgeGroup::child:
      return {
          {"Other Cardiovascular", "Other Cardiovascular Diseases"},
          {"Other Infectious", "Other Infectious Diseases"},
          {"Other Defined Causes", "Other Defined Causes of Child Deaths"},
          {"Road Traffic Accident", "Road Traffic"},
          {"Diarrhea", "Diarrhea/Dysentery"},
          {"Dysentery", "Diarrhea/Dysentery"},
          {"Hemorrhagic Fever", "Hemorrhagic fever"},
      };
    case AgeGroup::neonate:
      return {
          {"Asphyxia", "Birth asphyxia"},
          {"Congenital Malformations", "Congenital malformation"},
          {"Preterm", "Preterm Delivery"},
          {"Prematurity", "Preterm Delivery"},
          {"Sepsis", "Meningitis/Sepsis"},
          {"Meningitis", "Meningitis/Sepsis"},
      };
  }
  return {};
}

inline CauseCodebook builtin_codebook(AgeGroup g) {
  std::string_view text;
  switch (g) {
    case AgeGroup::adult: text = codebook_text::kAdult; break;
    case AgeGroup::child: text = codebook_text::kChild; break;
    case AgeGroup::neonate: text = codebook_text::kNeonate; break;
  }
  CauseCodebook book(g, parse_codebook_lines(text), builtin_aliases(g));
  if (book.size() != canonical_cause_count(g)) {
    throw std::logic_error("embedded " + to_string(g) + " codebook has " +
                           std::to_string(book.size()) + " labels, expected " +
                           std::to_string(canonical_cause_count(g)));
  }
  return book;
}

}  // namespace vapipe
