#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace egdarts {

// FNV-1a, used for content hashes in manifests and split keys.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic sub-seed derivation: independent streams per purpose so that
// adding a consumer does not shift any other stream.
inline uint64_t derive_seed(uint64_t master, std::string_view tag) {
  return splitmix64(master ^ fnv1a(tag));
}

inline uint64_t derive_seed(uint64_t master, std::string_view tag, uint64_t index) {
  return splitmix64(derive_seed(master, tag) ^ splitmix64(index));
}

std::string hex_u64(uint64_t v);

}  // namespace egdarts
