#pragma once

// Samples, PNG folders, resize, the synthetic camouflage generator and the
// FFT high-pass used as shadow-task input.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include <fftw3.h>
#include <png.h>
#include <nlohmann/json.hpp>

#include "tssam/hashing.hpp"
#include "tssam/ops.hpp"
#include "tssam/parallel.hpp"
#include "tssam/rng.hpp"

namespace tssam::data {

struct SegSample {
  std::string id;
  Tensor<float> image;  // (3,H,W) in [0,1]
  Tensor<float> mask;   // (1,H,W) in {0,1}

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
};

inline void validate(const SegSample& s) {
  if (s.image.rank() != 3 || s.image.dim(0) != 3) throw ShapeError(s.id + ": image must be (3,H,W), got " + to_string(s.image.shape()));
  if (s.mask.rank() != 3 || s.mask.dim(0) != 1) throw ShapeError(s.id + ": mask must be (1,H,W), got " + to_string(s.mask.shape()));
  if (s.image.dim(1) != s.mask.dim(1) || s.image.dim(2) != s.mask.dim(2))
    throw ShapeError(s.id + ": image " + to_string(s.image.shape()) + " and mask " + to_string(s.mask.shape()) +
                     " differ in size");
  for (float v : s.image.values())
    if (!(v >= 0.f && v <= 1.f)) throw ValidationError(s.id + ": image values must lie in [0,1]");
  for (float v : s.mask.values())
    if (v != 0.f && v != 1.f) throw ValidationError(s.id + ": mask must be binary");
}

// ------------------------------------------------------------------ PNG

/// 8-bit PNG as (C,H,W) floats in [0,1]; channels = 3 (RGB) or 1 (gray).
inline Tensor<float> read_png(const std::string& path, std::size_t channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read '" + path + "': " + img.message);
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode '" + path + "': " + img.message);
  }
  const std::size_t h = img.height, w = img.width;
  Tensor<float> out({channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        out[(c * h + y) * w + x] = float(buf[(y * w + x) * channels + c]) / 255.f;
  return out;
}

/// (C,H,W) in [0,1] -> 8-bit PNG, C = 3 or 1.
inline void write_png(const std::string& path, const Tensor<float>& t) {
  if (t.rank() != 3 || (t.dim(0) != 3 && t.dim(0) != 1)) throw ShapeError("write_png: expected (3|1,H,W), got " + to_string(t.shape()));
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  std::vector<png_byte> buf(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k)
        buf[(y * w + x) * c + k] = png_byte(std::lround(std::clamp(t[(k * h + y) * w + x], 0.f, 1.f) * 255.f));
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(w);
  img.height = png_uint_32(h);
  img.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write '" + path + "': " + img.message);
}

// ------------------------------------------------------------------ folders

struct LoadResult {
  std::vector<SegSample> samples;
  std::vector<std::string> warnings;
};

inline std::map<std::string, std::filesystem::path> png_by_stem(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("'" + dir + "' is not a readable directory");
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return char(std::tolower(ch)); });
    if (ext == ".png") out[e.path().stem().string()] = e.path();
  }
  return out;
}

/// Pairs images/<id>.png with masks/<id>.png; masks binarised at 0.5. Output sorted by id.
inline LoadResult load_folder(const std::string& images_dir, const std::string& masks_dir) {
  const auto images = png_by_stem(images_dir);
  const auto masks = png_by_stem(masks_dir);
  LoadResult r;
  std::vector<std::pair<std::string, std::pair<std::string, std::string>>> pairs;
  for (const auto& [id, p] : images) {
    auto it = masks.find(id);
    if (it == masks.end()) r.warnings.push_back("image '" + id + "' has no mask");
    else pairs.push_back({id, {p.string(), it->second.string()}});
  }
  for (const auto& [id, p] : masks)
    if (!images.count(id)) r.warnings.push_back("mask '" + id + "' has no image");
  if (pairs.empty()) throw ValidationError("no image/mask pairs found in '" + images_dir + "' and '" + masks_dir + "'");
  r.samples.resize(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    auto& s = r.samples[i];
    s.id = pairs[i].first;
    s.image = read_png(pairs[i].second.first, 3);
    s.mask = read_png(pairs[i].second.second, 1);
    for (auto& v : s.mask.values()) v = v >= 0.5f ? 1.f : 0.f;
    validate(s);
  });
  return r;
}

// ------------------------------------------------------------------ resize

/// Image bilinear (half-pixel centres), mask nearest neighbour.
inline SegSample resize_sample(const SegSample& s, std::size_t oh, std::size_t ow) {
  if (oh == 0 || ow == 0) throw ConfigError("resize_sample: target size must be positive");
  if (oh == s.height() && ow == s.width()) return s;
  SegSample out{s.id, {}, Tensor<float>({1, oh, ow})};
  Tape<float> tape(false);
  out.image = ops::resize_bilinear(tape.constant(s.image.reshaped({1, 3, s.height(), s.width()})), oh, ow)
                  .value()
                  .reshaped({3, oh, ow});
  const std::size_t ih = s.height(), iw = s.width();
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = std::min(ih - 1, std::size_t((double(y) + 0.5) * double(ih) / double(oh)));
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t sx = std::min(iw - 1, std::size_t((double(x) + 0.5) * double(iw) / double(ow)));
      out.mask[y * ow + x] = s.mask[sy * iw + sx];
    }
  }
  return out;
}

// ------------------------------------------------------------------ high-pass

namespace detail {
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Real part of the inverse FFT after zeroing the centred low-frequency square:
/// bins whose signed frequency offsets satisfy |dy|,|dx| < side/2 with
/// side = floor(tau * min(H,W)). The zeroed set is symmetric, so the filtered
/// spectrum stays Hermitian. Input and output are (H,W) planes.
inline std::vector<double> high_pass(const std::vector<double>& plane, std::size_t h, std::size_t w, double tau) {
  if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("high_freq_component: mask ratio must lie in [0,1)");
  const std::size_t n = h * w;
  fftw_complex* buf = fftw_alloc_complex(n);
  fftw_plan fwd, inv;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fwd = fftw_plan_dft_2d(int(h), int(w), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
    inv = fftw_plan_dft_2d(int(h), int(w), buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < n; ++i) buf[i][0] = plane[i], buf[i][1] = 0.0;
  fftw_execute(fwd);
  const double half = std::floor(tau * double(std::min(h, w))) / 2.0;
  auto offset = [](std::size_t k, std::size_t len) { return k <= len / 2 ? double(k) : double(k) - double(len); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (std::abs(offset(y, h)) < half && std::abs(offset(x, w)) < half) buf[y * w + x][0] = buf[y * w + x][1] = 0.0;
  fftw_execute(inv);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = buf[i][0] / double(n);
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
  }
  fftw_free(buf);
  return out;
}

inline constexpr double kFlatRangeTolerance = 1e-9;

/// Per-channel high-pass, min-max renormalised to [0,1]; a flat result maps to zeros.
inline Tensor<float> high_freq_component(const Tensor<float>& image, double tau = 0.25) {
  if (image.rank() != 3) throw ShapeError("high_freq_component: expected (C,H,W), got " + to_string(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<float> out(image.shape());
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<double> plane(image.data() + k * h * w, image.data() + (k + 1) * h * w);
    const auto hp = high_pass(plane, h, w, tau);
    const auto [lo, hi] = std::minmax_element(hp.begin(), hp.end());
    const double range = *hi - *lo;
    for (std::size_t i = 0; i < h * w; ++i)
      out[k * h * w + i] = range <= kFlatRangeTolerance ? 0.f : float((hp[i] - *lo) / range);
  }
  return out;
}

// ------------------------------------------------------------------ synthetic

enum class Difficulty { low, high };

inline Difficulty parse_difficulty(const std::string& s) {
  if (s == "low") return Difficulty::low;
  if (s == "high") return Difficulty::high;
  throw ConfigError("unknown difficulty '" + s + "' (expected low|high)");
}

inline std::string to_string(Difficulty d) { return d == Difficulty::low ? "low" : "high"; }

inline constexpr double kMinForeground = 0.05;
inline constexpr double kMaxForeground = 0.5;

namespace detail {

/// Two-octave smoothed value noise in [0,1].
inline std::vector<double> value_noise(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> field(h * w, 0.0);
  double amp = 1.0, total = 0.0;
  for (std::size_t cell : {16u, 6u}) {
    const std::size_t gh = h / cell + 2, gw = w / cell + 2;
    std::vector<double> grid(gh * gw);
    for (auto& g : grid) g = rng.uniform();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double fy = double(y) / double(cell), fx = double(x) / double(cell);
        const std::size_t iy = std::size_t(fy), ix = std::size_t(fx);
        auto smooth = [](double t) { return t * t * (3 - 2 * t); };
        const double ty = smooth(fy - double(iy)), tx = smooth(fx - double(ix));
        const double top = grid[iy * gw + ix] * (1 - tx) + grid[iy * gw + ix + 1] * tx;
        const double bot = grid[(iy + 1) * gw + ix] * (1 - tx) + grid[(iy + 1) * gw + ix + 1] * tx;
        field[y * w + x] += amp * (top * (1 - ty) + bot * ty);
      }
    total += amp;
    amp *= 0.5;
  }
  for (auto& v : field) v /= total;
  return field;
}

/// Ellipse or star-shaped polygon indicator ORed into `mask`.
inline void draw_blob(std::vector<float>& mask, std::size_t h, std::size_t w, Rng& rng) {
  const double m = double(std::min(h, w));
  const double cy = rng.uniform(0.25, 0.75) * double(h), cx = rng.uniform(0.25, 0.75) * double(w);
  const double theta = rng.uniform(0, std::numbers::pi);
  if (rng.uniform() < 0.5) {
    const double ry = rng.uniform(0.12, 0.32) * m, rx = rng.uniform(0.12, 0.32) * m;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = double(y) + 0.5 - cy, dx = double(x) + 0.5 - cx;
        const double u = dx * std::cos(theta) + dy * std::sin(theta), v = -dx * std::sin(theta) + dy * std::cos(theta);
        if ((u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0) mask[y * w + x] = 1.f;
      }
    return;
  }
  const int k = rng.uniform_int(5, 8);
  std::vector<double> vy(static_cast<std::size_t>(k)), vx(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const double a = theta + 2 * std::numbers::pi * i / k, r = rng.uniform(0.12, 0.32) * m;
    vy[std::size_t(i)] = cy + r * std::sin(a);
    vx[std::size_t(i)] = cx + r * std::cos(a);
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double py = double(y) + 0.5, px = double(x) + 0.5;
      bool inside = false;
      for (std::size_t i = 0, j = std::size_t(k) - 1; i < std::size_t(k); j = i++)
        if ((vy[i] > py) != (vy[j] > py) && px < (vx[j] - vx[i]) * (py - vy[i]) / (vy[j] - vy[i]) + vx[i])
          inside = !inside;
      if (inside) mask[y * w + x] = 1.f;
    }
}

}  // namespace detail

/// Textured background plus one or two blobs carrying the same texture, phase
/// shifted and colour shifted; the shift is smaller at high difficulty.
inline SegSample synthesize_one(std::size_t h, std::size_t w, std::uint64_t seed, Difficulty difficulty,
                                std::string id) {
  Rng rng(seed);
  std::vector<float> mask;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 1000) throw Error("generate_synthetic: could not place a blob with valid foreground fraction");
    mask.assign(h * w, 0.f);
    const int blobs = rng.uniform_int(1, 2);
    for (int b = 0; b < blobs; ++b) detail::draw_blob(mask, h, w, rng);
    double frac = 0;
    for (float v : mask) frac += v;
    frac /= double(h * w);
    if (frac >= kMinForeground && frac <= kMaxForeground) break;
  }
  const auto noise = detail::value_noise(h, w, rng);
  const double shift = difficulty == Difficulty::low ? 0.35 : 0.06;
  const std::ptrdiff_t oy = std::ptrdiff_t(difficulty == Difficulty::low ? h / 3 : h / 16);
  const std::ptrdiff_t ox = std::ptrdiff_t(difficulty == Difficulty::low ? w / 3 : w / 16);
  double base[3], delta[3], norm = 0;
  for (int c = 0; c < 3; ++c) base[c] = rng.uniform(0.3, 0.7), delta[c] = rng.normal(), norm += delta[c] * delta[c];
  norm = std::sqrt(norm) + 1e-12;
  SegSample s{std::move(id), Tensor<float>({3, h, w}), Tensor<float>({1, h, w}, mask)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool fg = mask[y * w + x] == 1.f;
      const std::size_t sy = fg ? std::size_t((std::ptrdiff_t(y) + oy) % std::ptrdiff_t(h)) : y;
      const std::size_t sx = fg ? std::size_t((std::ptrdiff_t(x) + ox) % std::ptrdiff_t(w)) : x;
      const double t = noise[sy * w + sx] - 0.5;
      for (int c = 0; c < 3; ++c) {
        const double v = base[c] + 0.5 * t + (fg ? shift * delta[c] / norm : 0.0);
        s.image[(std::size_t(c) * h + y) * w + x] = float(std::clamp(v, 0.0, 1.0));
      }
    }
  return s;
}

/// Deterministic in (n, size, seed, difficulty). Ids are zero-padded indices.
inline std::vector<SegSample> generate_synthetic(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed,
                                                 Difficulty difficulty) {
  if (h == 0 || w == 0 || h % 16 || w % 16)
    throw ConfigError("generate_synthetic: size must be positive multiples of 16, got " + std::to_string(h) + "x" +
                      std::to_string(w));
  Rng master(seed);
  std::vector<std::uint64_t> seeds(n);
  for (auto& s : seeds) s = master.engine()();
  std::vector<SegSample> out(n);
  parallel_for(n, [&](std::size_t i) {
    char id[16];
    std::snprintf(id, sizeof id, "%05zu", i);
    out[i] = synthesize_one(h, w, seeds[i], difficulty, id);
  });
  return out;
}

/// images/<id>.png, masks/<id>.png and manifest.json under `dir`.
inline nlohmann::json write_synthetic_folder(const std::string& dir, std::size_t n, std::size_t h, std::size_t w,
                                             std::uint64_t seed, Difficulty difficulty) {
  namespace fs = std::filesystem;
  const auto samples = generate_synthetic(n, h, w, seed, difficulty);
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  nlohmann::json files = nlohmann::json::object();
  for (const auto& s : samples) {
    const auto ip = (fs::path(dir) / "images" / (s.id + ".png")).string();
    const auto mp = (fs::path(dir) / "masks" / (s.id + ".png")).string();
    write_png(ip, s.image);
    write_png(mp, s.mask);
    files[s.id] = {{"image_sha256", sha256_file(ip)}, {"mask_sha256", sha256_file(mp)}};
  }
  nlohmann::json manifest = {{"generator", "tssam-synthetic"},
                             {"n", n},
                             {"size", {h, w}},
                             {"seed", seed},
                             {"difficulty", to_string(difficulty)},
                             {"files", files}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in '" + dir + "'");
  out << manifest.dump(2) << '\n';
  return manifest;
}

/// Stacks the samples at `idx` into (B,3,H,W) images and (B,1,H,W) masks.
template <class T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<SegSample>& samples, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ConfigError("make_batch: empty batch");
  const std::size_t h = samples[idx[0]].height(), w = samples[idx[0]].width();
  Tensor<T> img({idx.size(), 3, h, w}), msk({idx.size(), 1, h, w});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& s = samples[idx[b]];
    if (s.height() != h || s.width() != w) throw ShapeError("make_batch: mixed sample sizes in one batch");
    for (std::size_t i = 0; i < 3 * h * w; ++i) img[b * 3 * h * w + i] = T(s.image[i]);
    for (std::size_t i = 0; i < h * w; ++i) msk[b * h * w + i] = T(s.mask[i]);
  }
  return {std::move(img), std::move(msk)};
}

}  // namespace tssam::data
