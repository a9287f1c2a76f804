#pragma once

// Binary segmentation metrics on single-channel maps of shape (H,W):
// predictions in [0,1], ground truth in {0,1}.

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tssam/parallel.hpp"
#include "tssam/tensor.hpp"

namespace tssam::metrics {

using Map = Tensor<double>;

namespace detail {

inline void check_pair(const Map& pred, const Map& gt, const char* who) {
  if (pred.rank() != 2) throw ShapeError(std::string(who) + ": prediction must be (H,W), got " + to_string(pred.shape()));
  if (pred.shape() != gt.shape())
    throw ShapeError(std::string(who) + ": prediction " + to_string(pred.shape()) + " vs ground truth " +
                     to_string(gt.shape()));
  for (double v : gt.values())
    if (v != 0.0 && v != 1.0) throw ValidationError(std::string(who) + ": ground truth must be binary");
}

inline double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

}  // namespace detail

/// (B,1,H,W) or (1,H,W) or (H,W) tensor -> (H,W) plane of sample `b`.
template <class T>
Map plane(const Tensor<T>& t, std::size_t b = 0) {
  std::size_t h = 0, w = 0, off = 0;
  if (t.rank() == 2) {
    h = t.dim(0), w = t.dim(1);
  } else if (t.rank() == 3 && t.dim(0) == 1) {
    h = t.dim(1), w = t.dim(2);
  } else if (t.rank() == 4 && t.dim(1) == 1) {
    h = t.dim(2), w = t.dim(3), off = b * h * w;
  } else {
    throw ShapeError("metrics: expected a single-channel map, got " + to_string(t.shape()));
  }
  Map m({h, w});
  for (std::size_t i = 0; i < h * w; ++i) m[i] = double(t[off + i]);
  return m;
}

// ------------------------------------------------------------------ MAE / BER

inline double mae(const Map& pred, const Map& gt) {
  detail::check_pair(pred, gt, "mae");
  double s = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / double(pred.numel());
}

struct Confusion {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  Confusion& operator+=(const Confusion& o) {
    tp += o.tp, fp += o.fp, tn += o.tn, fn += o.fn;
    return *this;
  }
};

/// Predictions >= threshold count as positive.
inline Confusion confusion(const Map& pred, const Map& gt, double threshold = 0.5) {
  detail::check_pair(pred, gt, "confusion");
  Confusion c;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] >= threshold, g = gt[i] == 1.0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// Balanced error rate in percent; a class absent from the ground truth has recall 1.
inline double ber(const Confusion& c) {
  const double pos = c.tp + c.fn == 0 ? 1.0 : double(c.tp) / double(c.tp + c.fn);
  const double neg = c.tn + c.fp == 0 ? 1.0 : double(c.tn) / double(c.tn + c.fp);
  return 100.0 * (1.0 - 0.5 * (pos + neg));
}

inline double ber(const Map& pred, const Map& gt, double threshold = 0.5) { return ber(confusion(pred, gt, threshold)); }

// ------------------------------------------------------------------ weighted F

struct NearestForeground {
  std::vector<double> distance;    // Euclidean distance to the nearest foreground pixel
  std::vector<std::size_t> index;  // raster index of that pixel; ties -> smallest index
};

/// Exact nearest-foreground transform by expanding square rings around each
/// pixel; the search stops once the ring radius exceeds the best distance.
inline NearestForeground nearest_foreground(const Map& gt) {
  const std::size_t h = gt.dim(0), w = gt.dim(1);
  NearestForeground out{std::vector<double>(h * w, 0.0), std::vector<std::size_t>(h * w, 0)};
  const std::ptrdiff_t H = std::ptrdiff_t(h), W = std::ptrdiff_t(w);
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      const std::size_t p = std::size_t(y * W + x);
      if (gt[p] == 1.0) {
        out.index[p] = p;
        continue;
      }
      std::int64_t best = -1;
      std::size_t best_idx = 0;
      auto consider = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) {
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) return;
        const std::size_t q = std::size_t(yy * W + xx);
        if (gt[q] != 1.0) return;
        const std::int64_t d2 = (yy - y) * (yy - y) + (xx - x) * (xx - x);
        if (best < 0 || d2 < best || (d2 == best && q < best_idx)) best = d2, best_idx = q;
      };
      for (std::ptrdiff_t r = 1; r <= std::max(H, W); ++r) {
        if (best >= 0 && r * r > best) break;
        for (std::ptrdiff_t d = -r; d <= r; ++d) {
          consider(y - r, x + d);
          consider(y + r, x + d);
          if (d != -r && d != r) {
            consider(y + d, x - r);
            consider(y + d, x + r);
          }
        }
      }
      out.distance[p] = best < 0 ? 0.0 : std::sqrt(double(best));
      out.index[p] = best < 0 ? p : best_idx;
    }
  return out;
}

/// Normalised 2-D Gaussian, size x size, with entries below eps*max zeroed.
inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  std::vector<double> k(size * size);
  const double c = (double(size) - 1.0) / 2.0;
  double mx = 0, sum = 0;
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double y = double(i) - c, x = double(j) - c;
      k[i * size + j] = std::exp(-(x * x + y * y) / (2 * sigma * sigma));
      mx = std::max(mx, k[i * size + j]);
    }
  for (auto& v : k) {
    if (v < DBL_EPSILON * mx) v = 0;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

inline constexpr double kFBetaSquared = 1.0;
inline constexpr double kFGaussianSigma = 5.0;
inline constexpr std::size_t kFGaussianWindow = 7;
inline constexpr double kFDecayBase = 0.5;

/// Dependency-weighted F-measure. Throws UndefinedMetric when gt has no foreground.
inline double weighted_fbeta(const Map& pred, const Map& gt) {
  detail::check_pair(pred, gt, "weighted_fbeta");
  const std::size_t h = gt.dim(0), w = gt.dim(1), n = h * w;
  std::size_t fg = 0;
  for (double v : gt.values()) fg += v == 1.0;
  if (fg == 0) throw UndefinedMetric("weighted_fbeta: ground truth has no foreground pixel");

  std::vector<double> err(n), err_t(n);
  for (std::size_t i = 0; i < n; ++i) err[i] = std::abs(pred[i] - gt[i]);
  const auto nf = nearest_foreground(gt);
  for (std::size_t i = 0; i < n; ++i) err_t[i] = gt[i] == 1.0 ? err[i] : err[nf.index[i]];

  // zero-padded "same" filtering
  const auto k = gaussian_kernel(kFGaussianWindow, kFGaussianSigma);
  const std::ptrdiff_t r = std::ptrdiff_t(kFGaussianWindow / 2);
  std::vector<double> spread(n, 0.0);
  for (std::ptrdiff_t y = 0; y < std::ptrdiff_t(h); ++y)
    for (std::ptrdiff_t x = 0; x < std::ptrdiff_t(w); ++x) {
      double acc = 0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const std::ptrdiff_t yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= std::ptrdiff_t(h) || xx < 0 || xx >= std::ptrdiff_t(w)) continue;
          acc += k[std::size_t((dy + r) * std::ptrdiff_t(kFGaussianWindow) + dx + r)] * err_t[std::size_t(yy) * w + std::size_t(xx)];
        }
      spread[std::size_t(y) * w + std::size_t(x)] = acc;
    }

  double sum_ew_fg = 0, sum_ew_bg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool g = gt[i] == 1.0;
    const double m = g && spread[i] < err[i] ? spread[i] : err[i];
    const double importance = g ? 1.0 : 2.0 - std::exp(std::log(kFDecayBase) / 5.0 * nf.distance[i]);
    (g ? sum_ew_fg : sum_ew_bg) += m * importance;
  }
  const double tpw = double(fg) - sum_ew_fg;
  const double fpw = sum_ew_bg;
  const double recall = 1.0 - sum_ew_fg / double(fg);
  const double precision = tpw + fpw > 0 ? tpw / (tpw + fpw) : 0.0;
  const double num = (1.0 + kFBetaSquared) * precision * recall;
  if (num == 0.0) return 0.0;
  return num / (kFBetaSquared * precision + recall);
}

// ------------------------------------------------------------------ S-measure

namespace detail {

inline double object_score(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean(v);
  double var = 0;
  for (double x : v) var += (x - m) * (x - m);
  const double sd = v.size() > 1 ? std::sqrt(var / double(v.size() - 1)) : 0.0;
  return 2.0 * m / (m * m + 1.0 + sd + DBL_EPSILON);
}

/// Structural similarity of one rectangular block [y0,y1) x [x0,x1).
inline double block_ssim(const Map& pred, const Map& gt, std::size_t y0, std::size_t y1, std::size_t x0,
                         std::size_t x1) {
  const std::size_t w = gt.dim(1);
  const double n = double((y1 - y0) * (x1 - x0));
  double mx = 0, my = 0;
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) mx += pred[y * w + x], my += gt[y * w + x];
  mx /= n, my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) {
      const double a = pred[y * w + x] - mx, b = gt[y * w + x] - my;
      sxx += a * a, syy += b * b, sxy += a * b;
    }
  const double d = n - 1.0 + DBL_EPSILON;
  sxx /= d, syy /= d, sxy /= d;
  const double alpha = 4.0 * mx * my * sxy;
  const double beta = (mx * mx + my * my) * (sxx + syy);
  if (alpha != 0.0) return alpha / (beta + DBL_EPSILON);
  return beta == 0.0 ? 1.0 : 0.0;
}

}  // namespace detail

/// Structure measure: alpha * object-aware + (1 - alpha) * region-aware similarity.
inline double s_measure(const Map& pred, const Map& gt, double alpha = 0.5) {
  detail::check_pair(pred, gt, "s_measure");
  const std::size_t h = gt.dim(0), w = gt.dim(1), n = h * w;
  double fg_frac = 0, pred_mean = 0;
  for (std::size_t i = 0; i < n; ++i) fg_frac += gt[i], pred_mean += pred[i];
  fg_frac /= double(n), pred_mean /= double(n);
  if (fg_frac == 0.0) return 1.0 - pred_mean;
  if (fg_frac == 1.0) return pred_mean;

  std::vector<double> fg_vals, bg_vals;
  double cy = 0, cx = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      if (gt[i] == 1.0) {
        fg_vals.push_back(pred[i]);
        cy += double(y), cx += double(x);
      } else {
        bg_vals.push_back(1.0 - pred[i]);
      }
    }
  const double object = fg_frac * detail::object_score(fg_vals) + (1.0 - fg_frac) * detail::object_score(bg_vals);

  // 1-based centroid rounded half away from zero; splits into [0,Y) x [0,X) etc.
  const std::size_t X = std::size_t(std::round(cx / double(fg_vals.size()) + 1.0));
  const std::size_t Y = std::size_t(std::round(cy / double(fg_vals.size()) + 1.0));
  const double area = double(n);
  const double w1 = double(X * Y) / area, w2 = double((w - X) * Y) / area, w3 = double(X * (h - Y)) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  auto part = [&](double weight, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
    return (y1 > y0 && x1 > x0) ? weight * detail::block_ssim(pred, gt, y0, y1, x0, x1) : 0.0;
  };
  const double region = part(w1, 0, Y, 0, X) + part(w2, 0, Y, X, w) + part(w3, Y, h, 0, X) + part(w4, Y, h, X, w);
  return std::max(0.0, alpha * object + (1.0 - alpha) * region);
}

// ------------------------------------------------------------------ E-measure

/// Enhanced-alignment measure of `pred` binarised at min(2 * mean(pred), 1).
inline double e_measure(const Map& pred, const Map& gt) {
  detail::check_pair(pred, gt, "e_measure");
  const std::size_t n = gt.numel();
  double pm = 0;
  for (double v : pred.values()) pm += v;
  const double threshold = std::min(2.0 * pm / double(n), 1.0);
  std::vector<double> fm(n);
  double mu_fm = 0, mu_gt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fm[i] = pred[i] >= threshold ? 1.0 : 0.0;
    mu_fm += fm[i], mu_gt += gt[i];
  }
  const double gt_fg = mu_gt;
  mu_fm /= double(n), mu_gt /= double(n);
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double enhanced;
    if (gt_fg == 0.0) {
      enhanced = 1.0 - fm[i];
    } else if (gt_fg == double(n)) {
      enhanced = fm[i];
    } else {
      const double a = fm[i] - mu_fm, b = gt[i] - mu_gt;
      const double align = 2.0 * a * b / (a * a + b * b + DBL_EPSILON);
      enhanced = (align + 1.0) * (align + 1.0) / 4.0;
    }
    sum += enhanced;
  }
  return sum / double(n);
}

// ------------------------------------------------------------------ aggregation

struct ImageMetrics {
  double s_alpha = 0, e_phi = 0, mae = 0;
  std::optional<double> f_beta_w;  // empty when undefined (no foreground)
  Confusion conf;
};

inline ImageMetrics evaluate_image(const Map& pred, const Map& gt) {
  ImageMetrics m;
  m.s_alpha = s_measure(pred, gt);
  m.e_phi = e_measure(pred, gt);
  m.mae = mae(pred, gt);
  try {
    m.f_beta_w = weighted_fbeta(pred, gt);
  } catch (const UndefinedMetric&) {
  }
  m.conf = confusion(pred, gt);
  return m;
}

struct MetricReport {
  double s_alpha = 0, e_phi = 0, f_beta_w = 0, mae = 0, ber = 0;
  std::size_t n_images = 0;
  std::size_t f_beta_excluded = 0;  // images without foreground, skipped for F
};

struct EvalItem {
  std::string id;
  Map pred;
  Map gt;
};

/// Per-image means, with BER from the dataset-wide confusion matrix.
/// Items are processed in id order regardless of input order.
inline MetricReport evaluate_dataset(std::vector<EvalItem> items) {
  std::sort(items.begin(), items.end(), [](const EvalItem& a, const EvalItem& b) { return a.id < b.id; });
  std::vector<ImageMetrics> per(items.size());
  parallel_for(items.size(), [&](std::size_t i) { per[i] = evaluate_image(items[i].pred, items[i].gt); });
  MetricReport r;
  r.n_images = items.size();
  if (items.empty()) return r;
  Confusion total;
  std::size_t f_count = 0;
  for (const auto& m : per) {
    r.s_alpha += m.s_alpha;
    r.e_phi += m.e_phi;
    r.mae += m.mae;
    if (m.f_beta_w) r.f_beta_w += *m.f_beta_w, ++f_count;
    total += m.conf;
  }
  const double n = double(items.size());
  r.s_alpha /= n, r.e_phi /= n, r.mae /= n;
  r.f_beta_w = f_count ? r.f_beta_w / double(f_count) : 0.0;
  r.f_beta_excluded = items.size() - f_count;
  r.ber = ber(total);
  return r;
}

/// Pairs predictions with ground truth by id. Unpaired ids abort the run
/// unless `allow_missing`, in which case they are skipped and returned in `missing`.
inline MetricReport evaluate_dataset(const std::map<std::string, Map>& preds, const std::map<std::string, Map>& gts,
                                     bool allow_missing, std::vector<std::string>* missing = nullptr) {
  std::vector<EvalItem> items;
  std::vector<std::string> unpaired;
  for (const auto& [id, gt] : gts) {
    auto it = preds.find(id);
    if (it == preds.end()) unpaired.push_back(id + " (no prediction)");
    else items.push_back({id, it->second, gt});
  }
  for (const auto& [id, p] : preds)
    if (!gts.count(id)) unpaired.push_back(id + " (no ground truth)");
  if (missing) *missing = unpaired;
  if (!unpaired.empty() && !allow_missing) {
    std::string msg = "evaluate_dataset: unpaired samples:";
    for (const auto& u : unpaired) msg += " " + u;
    throw ValidationError(msg);
  }
  return evaluate_dataset(std::move(items));
}

inline nlohmann::json to_json(const MetricReport& r) {
  return {{"s_alpha", r.s_alpha}, {"e_phi", r.e_phi}, {"f_beta_w", r.f_beta_w},
          {"mae", r.mae},         {"ber", r.ber},     {"n_images", r.n_images}};
}

inline std::string format_table(const MetricReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(10) << "metric" << std::right << std::setw(12) << "value" << '\n';
  auto row = [&](const char* k, double v) { os << std::left << std::setw(10) << k << std::right << std::setw(12) << v << '\n'; };
  row("S_alpha", r.s_alpha);
  row("E_phi", r.e_phi);
  row("F_beta_w", r.f_beta_w);
  row("MAE", r.mae);
  row("BER", r.ber);
  os << std::left << std::setw(10) << "images" << std::right << std::setw(12) << r.n_images << '\n';
  if (r.f_beta_excluded) os << "(" << r.f_beta_excluded << " image(s) without foreground excluded from F_beta_w)\n";
  return os.str();
}

}  // namespace tssam::metrics
