#pragma once

// Datasets: MNIST IDX (raw or gzipped), CIFAR-10 binary batches converted to
// 28x28 grayscale, stratified subsets, exact quarter-turn rotation, and small
// synthetic sets for tests and the two-parameter demo.

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "equiflow/paramspace.hpp"
#include "equiflow/rng.hpp"

namespace equiflow {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::string name;
  std::string split;
  std::uint64_t subset_seed = 0;
  Shape shape;                       // per-sample input shape
  std::size_t classes = 0;           // 0 for regression sets
  std::vector<float> images;         // size() * shape.numel()
  std::vector<std::uint32_t> labels;
  std::size_t target_dim = 0;        // regression sets only
  std::vector<float> targets;

  std::size_t size() const { return shape.numel() ? images.size() / shape.numel() : 0; }
  std::span<const float> sample(std::size_t i) const { return {images.data() + i * shape.numel(), shape.numel()}; }
  std::span<const float> target(std::size_t i) const { return {targets.data() + i * target_dim, target_dim}; }

  void validate() const {
    if (shape.numel() == 0 || images.size() % shape.numel() != 0) throw DataError(name + ": image buffer size mismatch");
    if (classes > 0) {
      if (labels.size() != size()) throw DataError(name + ": image/label count mismatch");
      for (const auto l : labels)
        if (l >= classes) throw DataError(name + ": label out of range");
    } else if (targets.size() != size() * target_dim) {
      throw DataError(name + ": target buffer size mismatch");
    }
  }
};

namespace detail {

inline std::vector<unsigned char> read_maybe_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open " + path);
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw DataError("read error in " + path);
  return out;
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

/// First existing path among `name` and `name.gz` inside dir.
inline std::optional<std::string> find_file(const std::filesystem::path& dir, const std::vector<std::string>& names) {
  for (const auto& n : names)
    for (const auto& candidate : {dir / n, dir / (n + ".gz")})
      if (std::filesystem::is_regular_file(candidate)) return candidate.string();
  return std::nullopt;
}

}  // namespace detail

/// Parses an IDX image file and an IDX label file.
inline Dataset load_mnist_idx_files(const std::string& images_path, const std::string& labels_path,
                                    const std::string& split = "") {
  const auto img = detail::read_maybe_gz(images_path);
  const auto lab = detail::read_maybe_gz(labels_path);
  if (img.size() < 16 || detail::be32(img, 0) != 0x00000803u) throw DataError(images_path + ": bad IDX image magic");
  if (lab.size() < 8 || detail::be32(lab, 0) != 0x00000801u) throw DataError(labels_path + ": bad IDX label magic");
  const std::size_t n = detail::be32(img, 4), rows = detail::be32(img, 8), cols = detail::be32(img, 12);
  const std::size_t nl = detail::be32(lab, 4);
  if (img.size() < 16 + n * rows * cols) throw DataError(images_path + ": truncated image file");
  if (lab.size() < 8 + nl) throw DataError(labels_path + ": truncated label file");
  if (n != nl) throw DataError("image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  Dataset d;
  d.name = "mnist";
  d.split = split;
  d.shape = Shape{1, rows, cols};
  d.classes = 10;
  d.images.resize(n * rows * cols);
  for (std::size_t i = 0; i < d.images.size(); ++i) d.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = lab[8 + i];
  d.validate();
  return d;
}

/// Loads split "train" or "test" from a directory holding the standard IDX file names.
inline Dataset load_mnist_idx(const std::string& dir, const std::string& split) {
  std::string prefix;
  if (split == "train") prefix = "train";
  else if (split == "test") prefix = "t10k";
  else throw DataError("unknown MNIST split '" + split + "'");
  const auto images = detail::find_file(dir, {prefix + "-images-idx3-ubyte", prefix + "-images.idx3-ubyte"});
  const auto labels = detail::find_file(dir, {prefix + "-labels-idx1-ubyte", prefix + "-labels.idx1-ubyte"});
  if (!images || !labels) throw DataError("MNIST " + split + " files not found in " + dir);
  return load_mnist_idx_files(*images, *labels, split);
}

/// CIFAR-10 binary batch(es): 1 label byte + 3072 channel-planar RGB bytes per record.
/// Converted to luminance 0.299R + 0.587G + 0.114B, center-cropped to 28x28, scaled to [0,1].
inline Dataset load_cifar10_gray_files(const std::vector<std::string>& paths, std::size_t crop = 28) {
  constexpr std::size_t kRecord = 3073, kSide = 32;
  if (crop == 0 || crop > kSide) throw DataError("cifar: crop must be in [1, 32]");
  const std::size_t off = (kSide - crop) / 2;
  Dataset d;
  d.name = "cifar_gray";
  d.split = "test";
  d.shape = Shape{1, crop, crop};
  d.classes = 10;
  for (const auto& p : paths) {
    const auto bytes = detail::read_maybe_gz(p);
    if (bytes.empty() || bytes.size() % kRecord != 0)
      throw DataError(p + ": size " + std::to_string(bytes.size()) + " is not a multiple of the 3073-byte record");
    for (std::size_t r = 0; r < bytes.size() / kRecord; ++r) {
      const unsigned char* rec = bytes.data() + r * kRecord;
      d.labels.push_back(rec[0]);
      const unsigned char* red = rec + 1;
      const unsigned char* green = red + kSide * kSide;
      const unsigned char* blue = green + kSide * kSide;
      for (std::size_t i = 0; i < crop; ++i)
        for (std::size_t j = 0; j < crop; ++j) {
          const std::size_t px = (i + off) * kSide + (j + off);
          const double y = 0.299 * red[px] + 0.587 * green[px] + 0.114 * blue[px];
          d.images.push_back(static_cast<float>(std::min(1.0, y / 255.0)));
        }
    }
  }
  d.validate();
  return d;
}

/// Test batch from a directory (accepts the extracted `cifar-10-batches-bin/` layout).
inline Dataset load_cifar10_gray(const std::string& dir, std::size_t crop = 28) {
  for (const auto& sub : {std::filesystem::path(dir), std::filesystem::path(dir) / "cifar-10-batches-bin"})
    if (const auto f = detail::find_file(sub, {"test_batch.bin"})) return load_cifar10_gray_files({*f}, crop);
  throw DataError("CIFAR-10 test_batch.bin not found in " + dir);
}

/// Dataset root: explicit path, else $EQUIFLOW_DATA_DIR, else "data".
inline std::string data_root(const std::string& configured = "") {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("EQUIFLOW_DATA_DIR"); env && *env) return env;
  return "data";
}

/// Label-stratified deterministic subset of n samples; each class gets its proportional
/// share (largest remainders first, ties to the lower class), order ascending by source index.
inline Dataset stratified_subset(const Dataset& src, std::size_t n, std::uint64_t seed) {
  if (src.classes == 0) throw DataError("stratified_subset needs a labeled dataset");
  if (n >= src.size()) return src;
  std::vector<std::vector<std::size_t>> by_class(src.classes);
  for (std::size_t i = 0; i < src.size(); ++i) by_class[src.labels[i]].push_back(i);
  std::vector<std::size_t> quota(src.classes);
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t taken = 0;
  for (std::size_t c = 0; c < src.classes; ++c) {
    const double exact = static_cast<double>(n) * static_cast<double>(by_class[c].size()) / static_cast<double>(src.size());
    quota[c] = static_cast<std::size_t>(exact);
    taken += quota[c];
    rema.emplace_back(-(exact - static_cast<double>(quota[c])), c);
  }
  std::sort(rema.begin(), rema.end());
  for (std::size_t i = 0; taken < n; ++i, ++taken) ++quota[rema[i % rema.size()].second];
  auto rng = make_stream(seed, 0, Stream::Data);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < src.classes; ++c) {
    auto& idx = by_class[c];
    std::shuffle(idx.begin(), idx.end(), rng);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(quota[c], idx.size())));
  }
  std::sort(chosen.begin(), chosen.end());
  Dataset d;
  d.name = src.name;
  d.split = src.split;
  d.subset_seed = seed;
  d.shape = src.shape;
  d.classes = src.classes;
  for (const auto i : chosen) {
    const auto s = src.sample(i);
    d.images.insert(d.images.end(), s.begin(), s.end());
    d.labels.push_back(src.labels[i]);
  }
  return d;
}

/// Rotates every channel of every image counterclockwise by quarter_turns * 90 degrees
/// (out[r][c] = in[c][n-1-r] per turn). Pure index permutation.
inline std::vector<float> rotate_batch(std::span<const float> images, Shape shape, std::size_t quarter_turns) {
  if (shape.height != shape.width) throw std::invalid_argument("rotate_batch: images must be square");
  const std::size_t n = shape.height, np = n * n;
  if (images.size() % np != 0) throw std::invalid_argument("rotate_batch: buffer is not a whole number of images");
  std::vector<float> out(images.size());
  const std::size_t q = quarter_turns % 4;
  for (std::size_t base = 0; base < images.size(); base += np)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        std::size_t sr = r, sc = c;
        if (q == 1) sr = c, sc = n - 1 - r;
        else if (q == 2) sr = n - 1 - r, sc = n - 1 - c;
        else if (q == 3) sr = n - 1 - c, sc = r;
        out[base + r * n + c] = images[base + sr * n + sc];
      }
  return out;
}

inline Dataset rotate_batch(const Dataset& d, std::size_t quarter_turns) {
  Dataset out = d;
  out.images = rotate_batch(d.images, d.shape, quarter_turns);
  return out;
}

/// Two-feature regression set for the C2 demo: x1 ~ N(1, 1), x2 ~ N(0, 1), y = |x1| + 0.1 noise.
/// C2 acts by negating x2 and trivially on y. Not from any published experiment.
inline Dataset make_c2_toy(std::size_t n, std::uint64_t seed) {
  auto rng = make_stream(seed, 0, Stream::Data);
  std::normal_distribution<double> nd(0.0, 1.0);
  Dataset d;
  d.name = "c2_toy";
  d.split = "train";
  d.subset_seed = seed;
  d.shape = Shape{2, 1, 1};
  d.target_dim = 1;
  for (std::size_t i = 0; i < n; ++i) {
    const double x1 = 1.0 + nd(rng), x2 = nd(rng);
    d.images.push_back(static_cast<float>(x1));
    d.images.push_back(static_cast<float>(x2));
    d.targets.push_back(static_cast<float>(std::abs(x1) + 0.1 * nd(rng)));
  }
  return d;
}

/// Small labeled image set: a random template per class plus noise, clipped to [0, 1].
inline Dataset make_synthetic_images(std::size_t n, std::size_t image_size, std::size_t classes, std::uint64_t seed,
                                     double noise = 0.3) {
  auto rng = make_stream(seed, 1, Stream::Data);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, noise);
  const std::size_t np = image_size * image_size;
  std::vector<double> templates(classes * np);
  for (auto& t : templates) t = uni(rng);
  Dataset d;
  d.name = "synthetic";
  d.split = "train";
  d.subset_seed = seed;
  d.shape = Shape{1, image_size, image_size};
  d.classes = classes;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    d.labels.push_back(static_cast<std::uint32_t>(c));
    for (std::size_t p = 0; p < np; ++p)
      d.images.push_back(static_cast<float>(std::clamp(templates[c * np + p] + nd(rng), 0.0, 1.0)));
  }
  return d;
}

}  // namespace equiflow
