#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace stal::csv {

/// Splits one line on commas, trimming surrounding whitespace and a trailing '\r'.
std::vector<std::string_view> split(std::string_view line);

/// Shortest decimal form that parses back to the identical double.
std::string format_double(double value);

/// Full-string parse; throws a data error naming `context` on failure.
double parse_double(std::string_view text, const std::string& context);
long long parse_int(std::string_view text, const std::string& context);

}  // namespace stal::csv
