#include "mcstl/featurize.hpp"

#include <cstdint>
#include <string>

namespace mcstl {

namespace {

uint64_t fnv1a(const char* data, size_t n) {
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

Vector text_embedding(std::string_view text, int dim) {
  if (dim < 1) throw std::invalid_argument("text_embedding: dim must be >= 1");
  Vector v = Vector::Zero(dim);
  if (text.empty()) return v;

  std::string padded;
  padded.reserve(text.size() + 2);
  padded.push_back('\x01');
  padded.append(text);
  padded.push_back('\x02');

  const size_t n = padded.size();
  for (size_t i = 0; i + 3 <= n; ++i) {
    const uint64_t h = fnv1a(padded.data() + i, 3);
    const int bucket = static_cast<int>(h % static_cast<uint64_t>(dim));
    const double sign = (h >> 63) ? -1.0 : 1.0;
    v[bucket] += sign;
  }
  const double norm = v.norm();
  if (norm > 0.0) v /= norm;
  return v;
}

}  // namespace mcstl
