#pragma once

#include <string>
#include <string_view>

namespace sharpopt {

/// Shortest decimal string that parses back to the identical double.
std::string format_double(double v);

/// Strict full-string parse (surrounding blanks allowed). Returns false on failure.
bool parse_double(std::string_view text, double& out);

}  // namespace sharpopt
