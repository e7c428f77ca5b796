#include <gtest/gtest.h>
#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "equiflow/data.hpp"
#include "equiflow/training.hpp"

using namespace equiflow;
namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> be(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b, bool gz = false) {
  if (gz) {
    gzFile f = gzopen(p.string().c_str(), "wb");
    gzwrite(f, b.data(), static_cast<unsigned>(b.size()));
    gzclose(f);
    return;
  }
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t side, std::uint32_t magic = 0x803) {
  std::vector<unsigned char> b;
  for (const auto v : {magic, n, side, side}) {
    const auto w = be(v);
    b.insert(b.end(), w.begin(), w.end());
  }
  for (std::uint32_t i = 0; i < n * side * side; ++i) b.push_back(static_cast<unsigned char>(i % 256));
  return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t n) {
  std::vector<unsigned char> b;
  for (const auto v : {0x801u, n}) {
    const auto w = be(v);
    b.insert(b.end(), w.begin(), w.end());
  }
  for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<unsigned char>(i % 10));
  return b;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("equiflow_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Mnist, ParsesRawAndGzippedIdx) {
  TempDir dir;
  auto img = idx_images(3, 28);
  img[16] = 255;
  write_bytes(dir.path / "t10k-images-idx3-ubyte", img);
  write_bytes(dir.path / "t10k-labels-idx1-ubyte.gz", idx_labels(3), true);
  const auto d = load_mnist_idx(dir.path.string(), "test");
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.shape, (Shape{1, 28, 28}));
  EXPECT_EQ(d.images[0], 1.0f);
  EXPECT_EQ(d.images[256], 0.0f);
  EXPECT_EQ(d.labels[2], 2u);
  EXPECT_THROW(load_mnist_idx(dir.path.string(), "train"), DataError);
  EXPECT_THROW(load_mnist_idx(dir.path.string(), "validation"), DataError);
}

TEST(Mnist, RejectsBadFiles) {
  TempDir dir;
  const auto im = dir.path / "im", lb = dir.path / "lb";
  write_bytes(im, idx_images(3, 4, 0x804));
  write_bytes(lb, idx_labels(3));
  EXPECT_THROW(load_mnist_idx_files(im.string(), lb.string()), DataError);
  auto trunc = idx_images(3, 4);
  trunc.resize(trunc.size() - 5);
  write_bytes(im, trunc);
  EXPECT_THROW(load_mnist_idx_files(im.string(), lb.string()), DataError);
  write_bytes(im, idx_images(4, 4));
  EXPECT_THROW(load_mnist_idx_files(im.string(), lb.string()), DataError);
  EXPECT_THROW(load_mnist_idx_files((dir.path / "missing").string(), lb.string()), DataError);
}

TEST(Mnist, RealFilesHaveTheStandardSizes) {
  const auto root = data_root();
  for (const auto& dir : {root + "/mnist", root}) {
    if (!fs::exists(dir + "/t10k-labels-idx1-ubyte") && !fs::exists(dir + "/t10k-labels-idx1-ubyte.gz")) continue;
    EXPECT_EQ(load_mnist_idx(dir, "test").size(), 10000u);
    EXPECT_EQ(load_mnist_idx(dir, "train").size(), 60000u);
    return;
  }
  GTEST_SKIP() << "MNIST not found under " << root;
}

TEST(Cifar, ConvertsToGrayAndCrops) {
  TempDir dir;
  std::vector<unsigned char> bytes;
  // record 0: pure white; record 1: constant (10, 20, 30); record 2: red left half, label 7
  for (int r = 0; r < 3; ++r) {
    bytes.push_back(r == 2 ? 7 : static_cast<unsigned char>(r));
    for (int ch = 0; ch < 3; ++ch)
      for (int px = 0; px < 1024; ++px) {
        unsigned char v = 255;
        if (r == 1) v = static_cast<unsigned char>(10 * (ch + 1));
        if (r == 2) v = (ch == 0 && px % 32 < 16) ? 255 : 0;
        bytes.push_back(v);
      }
  }
  write_bytes(dir.path / "test_batch.bin", bytes);
  const auto d = load_cifar10_gray(dir.path.string());
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d.shape, (Shape{1, 28, 28}));
  for (std::size_t i = 0; i < 784; ++i) EXPECT_FLOAT_EQ(d.images[i], 1.0f);
  const float gray = static_cast<float>((0.299 * 10 + 0.587 * 20 + 0.114 * 30) / 255.0);
  for (std::size_t i = 784; i < 2 * 784; ++i) EXPECT_FLOAT_EQ(d.images[i], gray);
  // center crop keeps source columns 2..29: 14 red columns then 14 black
  EXPECT_FLOAT_EQ(d.images[2 * 784 + 13], static_cast<float>(0.299));
  EXPECT_FLOAT_EQ(d.images[2 * 784 + 14], 0.0f);
  EXPECT_EQ(d.labels[2], 7u);
  bytes.pop_back();
  write_bytes(dir.path / "test_batch.bin", bytes);
  EXPECT_THROW(load_cifar10_gray(dir.path.string()), DataError);
}

TEST(Subset, IsStratifiedAndReproducible) {
  const auto src = make_synthetic_images(1000, 4, 10, 1);
  Dataset skewed = src;
  for (std::size_t i = 0; i < 300; ++i) skewed.labels[i] = 0;  // class 0 heavy
  const auto a = stratified_subset(skewed, 200, 42);
  const auto b = stratified_subset(skewed, 200, 42);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(stratified_subset(skewed, 200, 43).labels.size(), 0u);
  ASSERT_EQ(a.size(), 200u);
  std::map<std::uint32_t, double> full, sub;
  for (const auto l : skewed.labels) full[l] += 1;
  for (const auto l : a.labels) sub[l] += 1;
  for (const auto& [c, cnt] : full) EXPECT_LE(std::abs(sub[c] - cnt * 200.0 / 1000.0), 1.0) << c;
  EXPECT_EQ(a.subset_seed, 42u);
}

TEST(Rotate, MatchesTheRotationRepresentation) {
  const auto src = make_synthetic_images(3, 5, 2, 2);
  const auto c4 = make_cyclic(4);
  const auto rep = rep_rot_c4(c4, 5, 5, 1);
  for (Element g = 0; g < 4; ++g) {
    const auto rot = rotate_batch(src.images, src.shape, g);
    for (std::size_t i = 0; i < src.size(); ++i) {
      const auto expect = rep.apply<float>(g, src.sample(i));
      for (std::size_t p = 0; p < 25; ++p) EXPECT_EQ(rot[i * 25 + p], expect[p]);
    }
    EXPECT_EQ(rotate_batch(rot, src.shape, c4->inverse(g)), src.images);
  }
  EXPECT_EQ(rotate_batch(src.images, src.shape, 0), src.images);
  auto four = src.images;
  for (int k = 0; k < 4; ++k) four = rotate_batch(four, src.shape, 1);
  EXPECT_EQ(four, src.images);
  const std::vector<float> tiny{1, 2, 3, 4};  // [[a,b],[c,d]] -> [[b,d],[a,c]]
  EXPECT_EQ(rotate_batch(tiny, Shape{1, 2, 2}, 1), (std::vector<float>{2, 4, 1, 3}));
  EXPECT_THROW(rotate_batch(tiny, Shape{1, 1, 4}, 1), std::invalid_argument);
}

TEST(C2Toy, AugmentedRiskIsSymmetricInTheSecondWeight) {
  const auto spec = make_c2_linear();
  const auto data = make_c2_toy(64, 3);
  data.validate();
  for (double w1 = -1.0; w1 <= 1.0; w1 += 0.5)
    for (double w2 = -1.0; w2 <= 1.0; w2 += 0.25) {
      const std::vector<double> a{w1, w2}, b{w1, -w2};
      EXPECT_NEAR(risk_augmented<double>(spec, a, data, LossKind::SquaredError),
                  risk_augmented<double>(spec, b, data, LossKind::SquaredError), 1e-12);
    }
}

TEST(C2Toy, PairedTrajectoriesMirror) {
  const auto spec = make_c2_linear();
  const auto data = make_c2_toy(64, 3);
  std::vector<double> a{0.3, 0.8}, b{0.3, -0.8};
  for (int t = 0; t < 100; ++t) {
    a = step_full_gd<double>(spec, a, data, 0.05, LossKind::SquaredError);
    b = step_full_gd<double>(spec, b, data, 0.05, LossKind::SquaredError);
    EXPECT_NEAR(a[0], b[0], 1e-10);
    EXPECT_NEAR(a[1], -b[1], 1e-10);
  }
  EXPECT_EQ(make_c2_toy(10, 1).images, make_c2_toy(10, 1).images);
}
