#include "metacomp/hash.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace metacomp {

std::string Fnv1a::hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  std::uint64_t v = state_;
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::string hash_hex(const std::string& s) {
  Fnv1a h;
  h.update(s);
  return h.hex();
}

std::string hash_hex_bytes(const void* p, std::size_t n) {
  Fnv1a h;
  h.update(p, n);
  return h.hex();
}

std::string hash_file_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("hash_file_hex: cannot open " + path);
  Fnv1a h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

}  // namespace metacomp
