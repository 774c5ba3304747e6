#include "egdarts/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "egdarts/error.hpp"
#include "egdarts/util.hpp"

namespace egdarts {

namespace {

constexpr int kCifarSide = 32;
constexpr int kCifarPixelBytes = 3 * kCifarSide * kCifarSide;
constexpr std::array<double, 3> kCifarMean{0.4914, 0.4822, 0.4465};
constexpr std::array<double, 3> kCifarStd{0.2470, 0.2435, 0.2616};

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset file '" + path + "'");
  is.seekg(0, std::ios::end);
  const auto len = is.tellg();
  is.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(len));
  is.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!is) throw DataError("read failed for '" + path + "'");
  return bytes;
}

}  // namespace

RawDataset load_cifar_raw(const std::string& path, CifarVariant variant) {
  const auto bytes = read_file(path);
  const int label_bytes = variant == CifarVariant::c10 ? 1 : 2;
  const size_t record = static_cast<size_t>(label_bytes + kCifarPixelBytes);
  if (bytes.empty() || bytes.size() % record != 0)
    throw DataError("cifar file '" + path + "' has " + std::to_string(bytes.size()) +
                    " bytes, not a positive multiple of the record size " +
                    std::to_string(record) + " (stray bytes start at offset " +
                    std::to_string(bytes.size() / record * record) + ")");
  RawDataset raw;
  raw.n = static_cast<int>(bytes.size() / record);
  raw.height = raw.width = kCifarSide;
  raw.num_classes = variant == CifarVariant::c10 ? 10 : 100;
  raw.pixels.resize(static_cast<size_t>(raw.n) * kCifarPixelBytes);
  raw.labels.resize(static_cast<size_t>(raw.n));
  if (variant == CifarVariant::c100) raw.coarse.resize(static_cast<size_t>(raw.n));
  for (int i = 0; i < raw.n; ++i) {
    const uint8_t* rec = bytes.data() + static_cast<size_t>(i) * record;
    if (variant == CifarVariant::c10) {
      raw.labels[static_cast<size_t>(i)] = rec[0];
    } else {
      raw.coarse[static_cast<size_t>(i)] = rec[0];
      raw.labels[static_cast<size_t>(i)] = rec[1];  // fine label
    }
    std::copy(rec + label_bytes, rec + record,
              raw.pixels.begin() + static_cast<size_t>(i) * kCifarPixelBytes);
  }
  for (int i = 0; i < raw.n; ++i) {
    if (raw.labels[static_cast<size_t>(i)] >= raw.num_classes)
      throw DataError("cifar file '" + path + "': record " + std::to_string(i) + " has label " +
                      std::to_string(raw.labels[static_cast<size_t>(i)]) + " >= " +
                      std::to_string(raw.num_classes));
  }
  return raw;
}

std::vector<uint8_t> encode_cifar_records(const RawDataset& raw, CifarVariant variant) {
  const int label_bytes = variant == CifarVariant::c10 ? 1 : 2;
  const size_t img = static_cast<size_t>(raw.channels) * raw.height * raw.width;
  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(raw.n) * (img + static_cast<size_t>(label_bytes)));
  for (int i = 0; i < raw.n; ++i) {
    if (variant == CifarVariant::c10) {
      out.push_back(static_cast<uint8_t>(raw.labels[static_cast<size_t>(i)]));
    } else {
      out.push_back(static_cast<uint8_t>(raw.coarse.empty() ? 0 : raw.coarse[static_cast<size_t>(i)]));
      out.push_back(static_cast<uint8_t>(raw.labels[static_cast<size_t>(i)]));
    }
    const uint8_t* px = raw.pixels.data() + static_cast<size_t>(i) * img;
    out.insert(out.end(), px, px + img);
  }
  return out;
}

Dataset normalize_raw(const RawDataset& raw, const std::string& name,
                      std::optional<std::array<double, 3>> mean,
                      std::optional<std::array<double, 3>> stddev) {
  Dataset ds;
  ds.name = name;
  ds.channels = raw.channels;
  ds.height = raw.height;
  ds.width = raw.width;
  ds.num_classes = raw.num_classes;
  ds.labels = raw.labels;
  const size_t plane = static_cast<size_t>(raw.height) * raw.width;
  const size_t img = static_cast<size_t>(raw.channels) * plane;

  std::array<double, 3> m{}, s{};
  if (mean && stddev) {
    m = *mean;
    s = *stddev;
  } else {
    // Per-channel statistics over the raw pixels scaled to [0,1].
    std::array<double, 3> sum{}, sumsq{};
    for (int i = 0; i < raw.n; ++i) {
      for (int c = 0; c < raw.channels; ++c) {
        const uint8_t* p = raw.pixels.data() + static_cast<size_t>(i) * img +
                           static_cast<size_t>(c) * plane;
        for (size_t j = 0; j < plane; ++j) {
          const double v = p[j] / 255.0;
          sum[static_cast<size_t>(c)] += v;
          sumsq[static_cast<size_t>(c)] += v * v;
        }
      }
    }
    const double cnt = static_cast<double>(raw.n) * static_cast<double>(plane);
    for (int c = 0; c < raw.channels; ++c) {
      m[static_cast<size_t>(c)] = sum[static_cast<size_t>(c)] / cnt;
      const double var = sumsq[static_cast<size_t>(c)] / cnt -
                         m[static_cast<size_t>(c)] * m[static_cast<size_t>(c)];
      s[static_cast<size_t>(c)] = std::sqrt(std::max(var, 1e-12));
    }
  }
  ds.mean = m;
  ds.stddev = s;

  ds.images.resize(static_cast<size_t>(raw.n) * img);
  for (int i = 0; i < raw.n; ++i) {
    for (int c = 0; c < raw.channels; ++c) {
      const uint8_t* p =
          raw.pixels.data() + static_cast<size_t>(i) * img + static_cast<size_t>(c) * plane;
      double* q = ds.images.data() + static_cast<size_t>(i) * img + static_cast<size_t>(c) * plane;
      const double mc = m[static_cast<size_t>(c)], inv = 1.0 / s[static_cast<size_t>(c)];
      for (size_t j = 0; j < plane; ++j) q[j] = (p[j] / 255.0 - mc) * inv;
    }
  }
  return ds;
}

Dataset load_cifar(const std::string& path, CifarVariant variant) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    if (variant == CifarVariant::c10) {
      for (int b = 1; b <= 5; ++b)
        files.push_back((fs::path(path) / ("data_batch_" + std::to_string(b) + ".bin")).string());
    } else {
      files.push_back((fs::path(path) / "train.bin").string());
    }
  } else {
    files.push_back(path);
  }
  RawDataset all;
  for (const auto& f : files) {
    RawDataset part = load_cifar_raw(f, variant);
    if (all.n == 0) {
      all = std::move(part);
    } else {
      all.pixels.insert(all.pixels.end(), part.pixels.begin(), part.pixels.end());
      all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
      all.coarse.insert(all.coarse.end(), part.coarse.begin(), part.coarse.end());
      all.n += part.n;
    }
  }
  return normalize_raw(all, variant == CifarVariant::c10 ? "cifar10" : "cifar100", kCifarMean,
                       kCifarStd);
}

RawDataset synth_raw(uint64_t seed, int n, int classes, int size) {
  if (classes < 2) throw ConfigError("synth_raw: classes must be >= 2");
  if (size < 8) throw ConfigError("synth_raw: size must be >= 8");
  if (n < classes) throw ConfigError("synth_raw: n must be >= classes");
  // Distinct channel palettes keep classes separable even from channel means;
  // orientation and frequency add conv-detectable texture.
  static constexpr double kPalette[10][3] = {
      {1.00, 0.20, 0.20}, {0.20, 1.00, 0.20}, {0.20, 0.20, 1.00}, {1.00, 1.00, 0.20},
      {1.00, 0.20, 1.00}, {0.20, 1.00, 1.00}, {0.90, 0.60, 0.20}, {0.60, 0.20, 0.90},
      {0.50, 0.90, 0.50}, {0.90, 0.90, 0.90}};
  RawDataset raw;
  raw.n = n;
  raw.height = raw.width = size;
  raw.num_classes = classes;
  const size_t plane = static_cast<size_t>(size) * size;
  raw.pixels.resize(static_cast<size_t>(n) * 3 * plane);
  raw.labels.resize(static_cast<size_t>(n));

  std::mt19937_64 rng(derive_seed(seed, "synth"));
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * 3.14159265358979323846);
  std::normal_distribution<double> noise(0.0, 0.08);

  int idx = 0;
  for (int c = 0; c < classes; ++c) {
    const int count = n / classes + (c < n % classes ? 1 : 0);
    const double angle = 3.14159265358979323846 * c / classes;
    const double ux = std::cos(angle), uy = std::sin(angle);
    const double freq = 2.0 + static_cast<double>(c % 3);
    const double* col = kPalette[c % 10];
    for (int j = 0; j < count; ++j, ++idx) {
      raw.labels[static_cast<size_t>(idx)] = c;
      const double phase = phase_dist(rng);
      uint8_t* img = raw.pixels.data() + static_cast<size_t>(idx) * 3 * plane;
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double t = (x * ux + y * uy) / static_cast<double>(size);
          const double g = 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 * freq * t + phase);
          for (int ch = 0; ch < 3; ++ch) {
            double v = col[ch] * g + noise(rng);
            v = std::clamp(v, 0.0, 1.0);
            img[static_cast<size_t>(ch) * plane + static_cast<size_t>(y) * size + x] =
                static_cast<uint8_t>(std::lround(v * 255.0));
          }
        }
      }
    }
  }
  return raw;
}

Dataset synth_dataset(uint64_t seed, int n, int classes, int size) {
  return normalize_raw(synth_raw(seed, n, classes, size), "synth");
}

std::pair<std::vector<int>, std::vector<int>> split_indices(const Dataset& ds,
                                                            const SplitSpec& spec) {
  if (spec.weight_fraction <= 0.0 || spec.weight_fraction >= 1.0)
    throw ConfigError("split: weight_fraction must be in (0, 1)");
  const size_t img = static_cast<size_t>(ds.image_elems());
  std::vector<std::vector<std::pair<uint64_t, int>>> per_class(
      static_cast<size_t>(ds.num_classes));
  for (int i = 0; i < ds.size(); ++i) {
    const uint64_t h =
        fnv1a(ds.images.data() + static_cast<size_t>(i) * img, img * sizeof(double));
    per_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back({h, i});
  }
  std::vector<int> weight_set, alpha_set;
  for (int c = 0; c < ds.num_classes; ++c) {
    auto& members = per_class[static_cast<size_t>(c)];
    if (members.size() < 2)
      throw DataError("split: class " + std::to_string(c) + " has " +
                      std::to_string(members.size()) + " samples, need at least 2");
    // Canonical content order first, then a seeded shuffle: membership is a
    // pure function of (content, seed, fraction).
    std::sort(members.begin(), members.end());
    std::vector<int> order(members.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(spec.seed, "split", static_cast<uint64_t>(c)));
    std::shuffle(order.begin(), order.end(), rng);
    const size_t k = static_cast<size_t>(
        std::llround(spec.weight_fraction * static_cast<double>(members.size())));
    const size_t kw = std::min(std::max<size_t>(k, 1), members.size() - 1);
    for (size_t j = 0; j < members.size(); ++j) {
      const int idx = members[static_cast<size_t>(order[j])].second;
      (j < kw ? weight_set : alpha_set).push_back(idx);
    }
  }
  std::sort(weight_set.begin(), weight_set.end());
  std::sort(alpha_set.begin(), alpha_set.end());
  return {std::move(weight_set), std::move(alpha_set)};
}

Dataset subset(const Dataset& ds, const std::vector<int>& indices) {
  Dataset out;
  out.name = ds.name;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.num_classes = ds.num_classes;
  out.mean = ds.mean;
  out.stddev = ds.stddev;
  const size_t img = static_cast<size_t>(ds.image_elems());
  out.images.resize(indices.size() * img);
  out.labels.resize(indices.size());
  for (size_t j = 0; j < indices.size(); ++j) {
    const size_t i = static_cast<size_t>(indices[j]);
    std::copy_n(ds.images.data() + i * img, img, out.images.data() + j * img);
    out.labels[j] = ds.labels[i];
  }
  return out;
}

TensorPtr batch_images(const Dataset& ds, const std::vector<int>& indices, bool requires_grad) {
  const size_t img = static_cast<size_t>(ds.image_elems());
  std::vector<double> data(indices.size() * img);
  for (size_t j = 0; j < indices.size(); ++j)
    std::copy_n(ds.images.data() + static_cast<size_t>(indices[j]) * img, img,
                data.data() + j * img);
  return make_tensor({static_cast<int64_t>(indices.size()), ds.channels, ds.height, ds.width},
                     std::move(data), requires_grad);
}

std::vector<int> batch_labels(const Dataset& ds, const std::vector<int>& indices) {
  std::vector<int> out(indices.size());
  for (size_t j = 0; j < indices.size(); ++j)
    out[j] = ds.labels[static_cast<size_t>(indices[j])];
  return out;
}

void augment_batch(Tensor& images, std::mt19937_64& rng) {
  const int64_t n = images.shape[0], ch = images.shape[1];
  const int64_t h = images.shape[2], w = images.shape[3];
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> shift(-4, 4);
  std::vector<double> buf(static_cast<size_t>(ch * h * w));
  for (int64_t i = 0; i < n; ++i) {
    double* img = images.data.data() + i * ch * h * w;
    const bool flip = coin(rng) == 1;
    const int dy = shift(rng), dx = shift(rng);
    for (int64_t c = 0; c < ch; ++c) {
      const double* src = img + c * h * w;
      double* dst = buf.data() + c * h * w;
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          const int64_t sy = y + dy;
          const int64_t sx = flip ? w - 1 - (x + dx) : x + dx;
          dst[y * w + x] =
              (sy >= 0 && sy < h && sx >= 0 && sx < w) ? src[sy * w + sx] : 0.0;
        }
      }
    }
    std::copy(buf.begin(), buf.end(), img);
  }
}

}  // namespace egdarts
