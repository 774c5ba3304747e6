#include "egdarts/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "egdarts/error.hpp"

namespace egdarts {

namespace {

static_assert(sizeof(double) == 8, "checkpoint format requires 64-bit doubles");

// Byte-order helpers; the on-disk format is little-endian.
void write_f64_le(std::ostream& os, const double* src, size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(n * 8));
  } else {
    for (size_t i = 0; i < n; ++i) {
      uint64_t bits;
      std::memcpy(&bits, &src[i], 8);
      char buf[8];
      for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      os.write(buf, 8);
    }
  }
}

void read_f64_le(std::istream& is, double* dst, size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n * 8));
  } else {
    for (size_t i = 0; i < n; ++i) {
      char buf[8];
      is.read(buf, 8);
      uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[b])) << (8 * b);
      std::memcpy(&dst[i], &bits, 8);
    }
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<TensorPtr>& tensors,
                     const std::vector<std::string>& names) {
  if (tensors.size() != names.size())
    throw ConfigError("checkpoint: tensor count " + std::to_string(tensors.size()) +
                      " != name count " + std::to_string(names.size()));
  nlohmann::json manifest = nlohmann::json::array();
  for (size_t i = 0; i < tensors.size(); ++i) {
    manifest.push_back({{"name", names[i]},
                        {"shape", tensors[i]->shape},
                        {"count", tensors[i]->size()}});
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  os << manifest.dump() << '\n';
  for (const auto& t : tensors) write_f64_le(os, t->data.data(), t->data.size());
  if (!os) throw DataError("checkpoint: write failed for '" + path + "'");
}

void load_checkpoint(const std::string& path, const std::vector<TensorPtr>& tensors,
                     const std::vector<std::string>& names) {
  if (tensors.size() != names.size())
    throw ConfigError("checkpoint: tensor count " + std::to_string(tensors.size()) +
                      " != name count " + std::to_string(names.size()));
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line)) throw DataError("checkpoint: missing manifest line in '" + path + "'");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: bad manifest JSON in '" + path + "': " + e.what());
  }
  if (!manifest.is_array() || manifest.size() != tensors.size())
    throw DataError("checkpoint: manifest lists " + std::to_string(manifest.size()) +
                    " tensors, expected " + std::to_string(tensors.size()));
  for (size_t i = 0; i < tensors.size(); ++i) {
    const auto& e = manifest[i];
    if (e.at("name").get<std::string>() != names[i])
      throw DataError("checkpoint: entry " + std::to_string(i) + " is '" +
                      e.at("name").get<std::string>() + "', expected '" + names[i] + "'");
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    if (shape != tensors[i]->shape)
      throw DataError("checkpoint: shape mismatch for '" + names[i] + "'");
    read_f64_le(is, tensors[i]->data.data(), tensors[i]->data.size());
    if (!is) throw DataError("checkpoint: truncated data for '" + names[i] + "'");
  }
}

}  // namespace egdarts
