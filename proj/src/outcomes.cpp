#include "cfgen/outcomes.hpp"

#include "cfgen/errors.hpp"

namespace cfgen {

std::string to_string(OutcomeVariable v) {
  switch (v) {
    case OutcomeVariable::value: return "value";
    case OutcomeVariable::confidence: return "confidence";
    case OutcomeVariable::riskiness: return "riskiness";
  }
  throw ParameterError("invalid outcome variable");
}

OutcomeVariable outcome_from_string(const std::string& name) {
  if (name == "value") return OutcomeVariable::value;
  if (name == "confidence") return OutcomeVariable::confidence;
  if (name == "riskiness") return OutcomeVariable::riskiness;
  throw ParameterError("unknown outcome variable '" + name + "' (expected value, confidence or riskiness)");
}

}  // namespace cfgen
