#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace metacomp {

/// FNV-1a 64-bit. Used for artifact fingerprints (staleness detection,
/// provenance chaining), not for anything adversarial.
class Fnv1a {
 public:
  Fnv1a& update(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= b[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(const std::string& s) { return update(s.data(), s.size()); }
  Fnv1a& update(std::span<const double> v) { return update(v.data(), v.size() * sizeof(double)); }
  Fnv1a& update(std::uint64_t x) { return update(&x, sizeof(x)); }

  std::uint64_t value() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hash_hex(const std::string& s);
std::string hash_hex_bytes(const void* p, std::size_t n);
std::string hash_file_hex(const std::string& path);

}  // namespace metacomp
