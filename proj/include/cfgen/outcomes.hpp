#pragma once

#include <array>
#include <cstddef>
#include <string>

namespace cfgen {

/// Behavioral outcome variables characterizing the agent at a state.
enum class OutcomeVariable : int { value = 0, confidence = 1, riskiness = 2 };
inline constexpr std::size_t kOutcomeCount = 3;

using OutcomeVector = std::array<double, kOutcomeCount>;

std::string to_string(OutcomeVariable v);
OutcomeVariable outcome_from_string(const std::string& name);

}  // namespace cfgen
