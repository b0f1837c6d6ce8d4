#pragma once

namespace metacomp {

inline constexpr const char* kToolVersion = "metacomp 0.1.0";

}  // namespace metacomp
