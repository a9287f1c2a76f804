#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <fstream>

#include "support.hpp"
#include "tssam/data.hpp"

using namespace tssam;
using testing_support::temp_dir;

namespace {

using cd = std::complex<double>;

std::vector<cd> dft2(const std::vector<cd>& x, std::size_t h, std::size_t w, int sign) {
  std::vector<cd> out(h * w);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      cd s = 0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x2 = 0; x2 < w; ++x2) {
          const double a = double(sign) * 2 * M_PI * (double(u * y) / double(h) + double(v * x2) / double(w));
          s += x[y * w + x2] * cd(std::cos(a), std::sin(a));
        }
      out[u * w + v] = s;
    }
  return out;
}

// DFT, zero the low-frequency square by explicit signed offsets, inverse DFT, real part
std::vector<double> high_pass_oracle(const std::vector<double>& plane, std::size_t h, std::size_t w, double tau) {
  std::vector<cd> x(plane.begin(), plane.end());
  auto X = dft2(x, h, w, -1);
  const double side = std::floor(tau * double(std::min(h, w)));
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      const double du = u <= h / 2 ? double(u) : double(u) - double(h);
      const double dv = v <= w / 2 ? double(v) : double(v) - double(w);
      if (2 * std::abs(du) < side && 2 * std::abs(dv) < side) X[u * w + v] = 0;
    }
  const auto y = dft2(X, h, w, +1);
  std::vector<double> out(h * w);
  for (std::size_t i = 0; i < h * w; ++i) out[i] = y[i].real() / double(h * w);
  return out;
}

double energy(const std::vector<cd>& X) {
  double e = 0;
  for (const auto& z : X) e += std::norm(z);
  return e;
}

double contrast(const data::SegSample& s) {
  const std::size_t n = s.height() * s.width();
  double total = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    double in = 0, out = 0, nin = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (s.mask[i] == 1.f) in += s.image[c * n + i], ++nin;
      else out += s.image[c * n + i];
    }
    total += std::abs(in / nin - out / (double(n) - nin));
  }
  return total / 3;
}

data::SegSample solid(const std::string& id, std::size_t h, std::size_t w, float v) {
  data::SegSample s{id, Tensor<float>({3, h, w}, v), Tensor<float>({1, h, w})};
  for (std::size_t i = 0; i < h * w / 2; ++i) s.mask[i] = 1.f;
  return s;
}

}  // namespace

TEST(Synthetic, SameArgumentsGiveBitIdenticalSamples) {
  const auto a = data::generate_synthetic(4, 32, 48, 7, data::Difficulty::high);
  const auto b = data::generate_synthetic(4, 32, 48, 7, data::Difficulty::high);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_TRUE(bit_identical(a[i].image, b[i].image));
    EXPECT_TRUE(bit_identical(a[i].mask, b[i].mask));
    EXPECT_EQ(a[i].image.shape(), (Shape{3, 32, 48}));
  }
  const auto c = data::generate_synthetic(4, 32, 48, 8, data::Difficulty::high);
  EXPECT_FALSE(bit_identical(a[0].image, c[0].image));
}

TEST(Synthetic, SamplesAreValidWithBoundedForeground) {
  for (auto d : {data::Difficulty::low, data::Difficulty::high}) {
    const auto set = data::generate_synthetic(40, 64, 64, 3, d);
    for (const auto& s : set) {
      EXPECT_NO_THROW(data::validate(s));
      double fg = 0;
      for (float v : s.mask.values()) fg += v;
      fg /= double(s.mask.numel());
      EXPECT_GE(fg, data::kMinForeground) << s.id;
      EXPECT_LE(fg, data::kMaxForeground) << s.id;
    }
  }
}

TEST(Synthetic, HighDifficultyHasLowerContrast) {
  double low = 0, high = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    low += contrast(data::generate_synthetic(1, 64, 64, seed, data::Difficulty::low)[0]);
    high += contrast(data::generate_synthetic(1, 64, 64, seed, data::Difficulty::high)[0]);
  }
  EXPECT_LT(high / 100, low / 100);
}

TEST(Synthetic, RejectsSizesNotDivisibleBy16) {
  EXPECT_THROW(data::generate_synthetic(1, 60, 64, 0, data::Difficulty::low), ConfigError);
  EXPECT_THROW(data::generate_synthetic(1, 64, 0, 0, data::Difficulty::low), ConfigError);
  EXPECT_THROW(data::parse_difficulty("medium"), ConfigError);
}

TEST(Synthetic, FolderRoundTripWithManifest) {
  const auto dir = temp_dir("synth_folder");
  const auto manifest = data::write_synthetic_folder(dir.string(), 3, 32, 32, 11, data::Difficulty::low);
  EXPECT_EQ(manifest.at("seed"), 11);
  EXPECT_EQ(manifest.at("files").size(), 3u);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  const auto loaded = data::load_folder((dir / "images").string(), (dir / "masks").string());
  const auto orig = data::generate_synthetic(3, 32, 32, 11, data::Difficulty::low);
  ASSERT_EQ(loaded.samples.size(), 3u);
  EXPECT_TRUE(loaded.warnings.empty());
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded.samples[i].id, orig[i].id);
    EXPECT_TRUE(bit_identical(loaded.samples[i].mask, orig[i].mask));
    for (std::size_t k = 0; k < orig[i].image.numel(); ++k)
      ASSERT_NEAR(loaded.samples[i].image[k], orig[i].image[k], 0.5 / 255 + 1e-6);
  }
}

TEST(LoadFolder, EmptyDirectoriesAreAnError) {
  const auto dir = temp_dir("load_empty");
  std::filesystem::create_directories(dir / "i");
  std::filesystem::create_directories(dir / "m");
  EXPECT_THROW(data::load_folder((dir / "i").string(), (dir / "m").string()), ValidationError);
  EXPECT_THROW(data::load_folder((dir / "nope").string(), (dir / "m").string()), IoError);
}

TEST(LoadFolder, OrphansAreReportedAndOrderIsSorted) {
  const auto dir = temp_dir("load_orphan");
  std::filesystem::create_directories(dir / "i");
  std::filesystem::create_directories(dir / "m");
  for (const char* id : {"c", "a", "b", "orphan"}) data::write_png((dir / "i" / (std::string(id) + ".png")).string(), solid(id, 4, 4, 0.2f).image);
  for (const char* id : {"b", "c", "a"}) data::write_png((dir / "m" / (std::string(id) + ".png")).string(), solid(id, 4, 4, 0.2f).mask);
  const auto r = data::load_folder((dir / "i").string(), (dir / "m").string());
  ASSERT_EQ(r.samples.size(), 3u);
  EXPECT_EQ(r.samples[0].id, "a");
  EXPECT_EQ(r.samples[1].id, "b");
  EXPECT_EQ(r.samples[2].id, "c");
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("orphan"), std::string::npos);
}

TEST(LoadFolder, MaskIsBinarisedAtHalf) {
  const auto dir = temp_dir("load_binarise");
  std::filesystem::create_directories(dir / "i");
  std::filesystem::create_directories(dir / "m");
  Tensor<float> mask({1, 1, 3});
  mask[0] = 0.f, mask[1] = 128.f / 255.f, mask[2] = 1.f;
  Tensor<float> image({3, 1, 3}, 0.5f);
  data::write_png((dir / "i" / "x.png").string(), image);
  data::write_png((dir / "m" / "x.png").string(), mask);
  const auto r = data::load_folder((dir / "i").string(), (dir / "m").string());
  ASSERT_EQ(r.samples.size(), 1u);
  EXPECT_EQ(r.samples[0].mask[0], 0.f);
  EXPECT_EQ(r.samples[0].mask[1], 1.f);
  EXPECT_EQ(r.samples[0].mask[2], 1.f);
}

TEST(LoadFolder, SizeMismatchAndUnreadableFilesFail) {
  const auto dir = temp_dir("load_bad");
  std::filesystem::create_directories(dir / "i");
  std::filesystem::create_directories(dir / "m");
  data::write_png((dir / "i" / "x.png").string(), solid("x", 4, 4, 0.1f).image);
  data::write_png((dir / "m" / "x.png").string(), solid("x", 4, 8, 0.1f).mask);
  EXPECT_THROW(data::load_folder((dir / "i").string(), (dir / "m").string()), ShapeError);
  std::ofstream((dir / "m" / "x.png")) << "not a png";
  EXPECT_THROW(data::load_folder((dir / "i").string(), (dir / "m").string()), IoError);
}

TEST(Resize, SameSizeIsBitIdentical) {
  const auto s = data::generate_synthetic(1, 32, 32, 1, data::Difficulty::low)[0];
  const auto r = data::resize_sample(s, 32, 32);
  EXPECT_TRUE(bit_identical(r.image, s.image));
  EXPECT_TRUE(bit_identical(r.mask, s.mask));
  EXPECT_THROW(data::resize_sample(s, 0, 32), ConfigError);
}

TEST(Resize, MaskStaysBinary) {
  const auto s = data::generate_synthetic(1, 64, 64, 2, data::Difficulty::high)[0];
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{24, 40}, {97, 13}, {128, 128}}) {
    const auto r = data::resize_sample(s, h, w);
    EXPECT_EQ(r.mask.shape(), (Shape{1, h, w}));
    EXPECT_EQ(r.image.shape(), (Shape{3, h, w}));
    for (float v : r.mask.values()) EXPECT_TRUE(v == 0.f || v == 1.f);
    EXPECT_NO_THROW(data::validate(r));
  }
}

TEST(Resize, DownscaledConstantStaysConstant) {
  const auto r = data::resize_sample(solid("k", 32, 32, 0.3f), 16, 16);
  for (float v : r.image.values()) EXPECT_NEAR(v, 0.3f, 1e-6f);
}

TEST(HighFreq, MatchesLoopOracle) {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {6, 10}, {9, 7}}) {
    const auto t = oracle::random({h, w}, h * w, 0.0, 1.0);
    const std::vector<double> plane(t.values().begin(), t.values().end());
    for (double tau : {0.0, 0.25, 0.5, 0.9}) {
      const auto got = data::high_pass(plane, h, w, tau);
      const auto want = high_pass_oracle(plane, h, w, tau);
      for (std::size_t i = 0; i < h * w; ++i) ASSERT_NEAR(got[i], want[i], 1e-10) << h << "x" << w << " tau " << tau;
    }
  }
}

TEST(HighFreq, ImpulseRetainsSpectralEnergy) {
  std::vector<double> impulse(64, 0.0);
  impulse[3 * 8 + 5] = 1.0;
  const double full = energy(dft2({impulse.begin(), impulse.end()}, 8, 8, -1));
  for (double tau : {0.1, 0.25, 0.5, 0.75}) {
    const auto hp = data::high_pass(impulse, 8, 8, tau);
    const double kept = energy(dft2({hp.begin(), hp.end()}, 8, 8, -1));
    EXPECT_GE(kept / full, 1 - tau * tau) << tau;
    EXPECT_LE(kept / full, 1.0 + 1e-12);
  }
}

TEST(HighFreq, ConstantImageGivesZeros) {
  const auto out = data::high_freq_component(Tensor<float>({3, 16, 16}, 0.6f));
  for (float v : out.values()) EXPECT_EQ(v, 0.f);
}

TEST(HighFreq, ZeroRatioIsRenormalisedIdentity) {
  const auto img = data::generate_synthetic(1, 32, 32, 4, data::Difficulty::low)[0].image;
  const auto out = data::high_freq_component(img, 0.0);
  const std::size_t n = 32 * 32;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto [lo, hi] = std::minmax_element(img.data() + c * n, img.data() + (c + 1) * n);
    for (std::size_t i = 0; i < n; ++i)
      ASSERT_NEAR(out[c * n + i], (img[c * n + i] - *lo) / (*hi - *lo), 1e-5);
  }
}

TEST(HighFreq, OutputInUnitRangeAndRatioValidated) {
  const auto img = data::generate_synthetic(1, 32, 32, 5, data::Difficulty::high)[0].image;
  const auto out = data::high_freq_component(img);
  EXPECT_EQ(out.shape(), img.shape());
  for (float v : out.values()) {
    EXPECT_GE(v, 0.f);
    EXPECT_LE(v, 1.f);
  }
  EXPECT_THROW(data::high_freq_component(img, 1.0), ConfigError);
  EXPECT_THROW(data::high_freq_component(img, -0.1), ConfigError);
}

TEST(MakeBatch, StacksSelectedSamples) {
  const auto set = data::generate_synthetic(3, 16, 16, 6, data::Difficulty::low);
  const auto [img, msk] = data::make_batch<double>(set, {2, 0});
  EXPECT_EQ(img.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(msk.shape(), (Shape{2, 1, 16, 16}));
  EXPECT_EQ(img[0], double(set[2].image[0]));
  EXPECT_EQ(msk[256 + 17], double(set[0].mask[17]));
  EXPECT_THROW(data::make_batch<double>(set, {}), ConfigError);
}
