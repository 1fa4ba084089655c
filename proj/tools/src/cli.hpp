#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace plab::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kRunFailure = 2;
inline constexpr int kInfeasible = 3;

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// $PLAB_OUT, or "plab-out" when unset.
std::string default_output_root();

}  // namespace plab::cli
