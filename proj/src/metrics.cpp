#include "diffvps/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace diffvps {
namespace {

void check_pair(const Grid& a, const Grid& b, const char* what) {
  if (a.rows != b.rows || a.cols != b.cols) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---- structure measure ----

double object_score(const Grid& pred, const Grid& gt, bool fg) {
  double sum = 0.0;
  int n = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if ((gt.values[i] > 0.5) != fg) continue;
    sum += fg ? pred.values[i] : 1.0 - pred.values[i];
    ++n;
  }
  if (n == 0) return 0.0;
  const double mu = sum / n;
  double ss = 0.0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if ((gt.values[i] > 0.5) != fg) continue;
    const double v = (fg ? pred.values[i] : 1.0 - pred.values[i]) - mu;
    ss += v * v;
  }
  const double sd = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  return 2.0 * mu / (mu * mu + 1.0 + sd);
}

double s_object(const Grid& pred, const Grid& gt) {
  const double u = mean_of(gt.values);
  return u * object_score(pred, gt, true) + (1.0 - u) * object_score(pred, gt, false);
}

double block_ssim(const Grid& pred, const Grid& gt, int r0, int r1, int c0, int c1) {
  const int n = (r1 - r0) * (c1 - c0);
  if (n <= 0) return 0.0;
  double sx = 0.0, sy = 0.0;
  for (int r = r0; r < r1; ++r) {
    for (int c = c0; c < c1; ++c) {
      sx += pred(r, c);
      sy += gt(r, c);
    }
  }
  const double mx = sx / n, my = sy / n;
  double vx = 0.0, vy = 0.0, cxy = 0.0;
  for (int r = r0; r < r1; ++r) {
    for (int c = c0; c < c1; ++c) {
      const double dx = pred(r, c) - mx, dy = gt(r, c) - my;
      vx += dx * dx;
      vy += dy * dy;
      cxy += dx * dy;
    }
  }
  if (n > 1) {
    vx /= n - 1;
    vy /= n - 1;
    cxy /= n - 1;
  } else {
    vx = vy = cxy = 0.0;
  }
  const double a = 4.0 * mx * my * cxy;
  const double b = (mx * mx + my * my) * (vx + vy);
  if (a != 0.0) return a / b;
  return b == 0.0 ? 1.0 : 0.0;
}

double s_region(const Grid& pred, const Grid& gt) {
  // Split at the (1-based, rounded) foreground centroid.
  double total = 0.0, sr = 0.0, sc = 0.0;
  for (int r = 0; r < gt.rows; ++r) {
    for (int c = 0; c < gt.cols; ++c) {
      total += gt(r, c);
      sr += gt(r, c) * (r + 1);
      sc += gt(r, c) * (c + 1);
    }
  }
  const int x = total > 0 ? static_cast<int>(std::round(sc / total)) : static_cast<int>(std::round(gt.cols / 2.0));
  const int y = total > 0 ? static_cast<int>(std::round(sr / total)) : static_cast<int>(std::round(gt.rows / 2.0));
  const double area = static_cast<double>(gt.rows) * gt.cols;
  const double w1 = x * y / area;
  const double w2 = (gt.cols - x) * y / area;
  const double w3 = x * (gt.rows - y) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  return w1 * block_ssim(pred, gt, 0, y, 0, x) + w2 * block_ssim(pred, gt, 0, y, x, gt.cols) +
         w3 * block_ssim(pred, gt, y, gt.rows, 0, x) + w4 * block_ssim(pred, gt, y, gt.rows, x, gt.cols);
}

// ---- weighted F ----

std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> taps(static_cast<size_t>(size));
  const double half = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) {
    const double x = i - half;
    taps[static_cast<size_t>(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
  }
  const double s = std::accumulate(taps.begin(), taps.end(), 0.0);
  for (auto& v : taps) v /= s;
  return taps;
}

// Separable zero-padded correlation with a normalized Gaussian.
Grid gaussian_filter(const Grid& in, int size, double sigma) {
  const auto taps = gaussian_taps(size, sigma);
  const int half = size / 2;
  Grid tmp(in.rows, in.cols);
  for (int r = 0; r < in.rows; ++r) {
    for (int c = 0; c < in.cols; ++c) {
      double acc = 0.0;
      for (int k = -half; k <= half; ++k) {
        const int cc = c + k;
        if (cc >= 0 && cc < in.cols) acc += taps[static_cast<size_t>(k + half)] * in(r, cc);
      }
      tmp(r, c) = acc;
    }
  }
  Grid out(in.rows, in.cols);
  for (int r = 0; r < in.rows; ++r) {
    for (int c = 0; c < in.cols; ++c) {
      double acc = 0.0;
      for (int k = -half; k <= half; ++k) {
        const int rr = r + k;
        if (rr >= 0 && rr < in.rows) acc += taps[static_cast<size_t>(k + half)] * tmp(rr, c);
      }
      out(r, c) = acc;
    }
  }
  return out;
}

const std::array<std::string, 4> kCanonicalSplits{"easy-seen", "easy-unseen", "hard-seen", "hard-unseen"};

}  // namespace

Grid to_grid(const torch::Tensor& map) {
  if (map.dim() != 2) throw std::invalid_argument("to_grid: expected H x W");
  auto m = map.detach().to(torch::kDouble).contiguous();
  Grid g(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)));
  std::copy_n(m.data_ptr<double>(), g.size(), g.values.begin());
  return g;
}

double dice(const Grid& pred, const Grid& gt) {
  check_pair(pred, gt, "dice");
  double inter = 0.0, p = 0.0, g = 0.0;
  for (size_t i = 0; i < gt.size(); ++i) {
    const bool a = pred.values[i] > 0.5, b = gt.values[i] > 0.5;
    inter += a && b;
    p += a;
    g += b;
  }
  if (p + g == 0.0) return 1.0;
  return 2.0 * inter / (p + g);
}

double s_measure(const Grid& prob, const Grid& gt, double alpha) {
  check_pair(prob, gt, "s_measure");
  const double y = mean_of(gt.values);
  if (y == 0.0) return clamp01(1.0 - mean_of(prob.values));
  if (y == 1.0) return clamp01(mean_of(prob.values));
  return clamp01(alpha * s_object(prob, gt) + (1.0 - alpha) * s_region(prob, gt));
}

double e_measure_threshold(int k) { return (k + 0.5) / kEmeasureThresholds; }

double e_measure_mean(const Grid& prob, const Grid& gt) {
  check_pair(prob, gt, "e_measure_mean");
  // Histogram of "number of thresholds passed" per pixel, split by GT.
  std::array<double, kEmeasureThresholds + 1> fg_hist{}, bg_hist{};
  for (size_t i = 0; i < gt.size(); ++i) {
    const double scaled = prob.values[i] * kEmeasureThresholds - 0.5;
    const int passed = scaled < 0.0 ? 0 : std::min(kEmeasureThresholds, static_cast<int>(std::floor(scaled)) + 1);
    (gt.values[i] > 0.5 ? fg_hist : bg_hist)[static_cast<size_t>(passed)] += 1.0;
  }
  const double n = static_cast<double>(gt.size());
  const double n_fg = std::accumulate(fg_hist.begin(), fg_hist.end(), 0.0);
  const double mu_g = n_fg / n;

  double total = 0.0;
  double tp = 0.0, fp = 0.0;  // pixels with passed > k
  for (int k = kEmeasureThresholds - 1; k >= 0; --k) {
    tp += fg_hist[static_cast<size_t>(k + 1)];
    fp += bg_hist[static_cast<size_t>(k + 1)];
    double score;
    if (n_fg == 0.0) {
      score = 1.0 - fp / n;
    } else if (n_fg == n) {
      score = tp / n;
    } else {
      const double mu_f = (tp + fp) / n;
      auto enhanced = [&](double f, double g) {
        const double af = f - mu_f, ag = g - mu_g;
        const double phi = 2.0 * af * ag / (af * af + ag * ag);
        return (phi + 1.0) * (phi + 1.0) / 4.0;
      };
      const double fn = n_fg - tp, tn = (n - n_fg) - fp;
      score = (tp * enhanced(1, 1) + fn * enhanced(0, 1) + fp * enhanced(1, 0) + tn * enhanced(0, 0)) / n;
    }
    total += score;
  }
  return clamp01(total / kEmeasureThresholds);
}

NearestForeground nearest_foreground(const Grid& mask) {
  const int rows = mask.rows, cols = mask.cols;
  constexpr int kNone = -1;
  // Pass 1: nearest foreground row within each column (ties go up).
  std::vector<int> col_near(static_cast<size_t>(rows) * cols, kNone);
  for (int c = 0; c < cols; ++c) {
    std::vector<int> up(static_cast<size_t>(rows), kNone), down(static_cast<size_t>(rows), kNone);
    int last = kNone;
    for (int r = 0; r < rows; ++r) {
      if (mask(r, c) > 0.5) last = r;
      up[static_cast<size_t>(r)] = last;
    }
    last = kNone;
    for (int r = rows - 1; r >= 0; --r) {
      if (mask(r, c) > 0.5) last = r;
      down[static_cast<size_t>(r)] = last;
    }
    for (int r = 0; r < rows; ++r) {
      const int u = up[static_cast<size_t>(r)], d = down[static_cast<size_t>(r)];
      int best = u;
      if (u == kNone || (d != kNone && d - r < r - u)) best = d;
      col_near[static_cast<size_t>(r) * cols + c] = best;
    }
  }
  // Pass 2: combine columns, ties on (row, col).
  NearestForeground out;
  out.distance.assign(mask.size(), std::numeric_limits<double>::infinity());
  out.index.assign(mask.size(), kNone);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      long best_d2 = -1;
      int best_r = 0, best_c = 0;
      for (int cc = 0; cc < cols; ++cc) {
        const int rr = col_near[static_cast<size_t>(r) * cols + cc];
        if (rr == kNone) continue;
        const long d2 = static_cast<long>(rr - r) * (rr - r) + static_cast<long>(cc - c) * (cc - c);
        if (best_d2 < 0 || d2 < best_d2 || (d2 == best_d2 && (rr < best_r || (rr == best_r && cc < best_c)))) {
          best_d2 = d2;
          best_r = rr;
          best_c = cc;
        }
      }
      if (best_d2 >= 0) {
        const size_t i = static_cast<size_t>(r) * cols + c;
        out.distance[i] = std::sqrt(static_cast<double>(best_d2));
        out.index[i] = best_r * cols + best_c;
      }
    }
  }
  return out;
}

double weighted_fbeta(const Grid& prob, const Grid& gt, const WeightedFParams& params) {
  check_pair(prob, gt, "weighted_fbeta");
  const bool any_fg = std::any_of(gt.values.begin(), gt.values.end(), [](double v) { return v > 0.5; });
  if (!any_fg) {
    const bool any_pred = std::any_of(prob.values.begin(), prob.values.end(), [](double v) { return v != 0.0; });
    return any_pred ? 0.0 : 1.0;
  }
  const size_t n = gt.size();
  Grid err(gt.rows, gt.cols);
  for (size_t i = 0; i < n; ++i) err.values[i] = std::abs(prob.values[i] - gt.values[i]);

  const auto nearest = nearest_foreground(gt);
  Grid spread = err;
  for (size_t i = 0; i < n; ++i) {
    if (gt.values[i] <= 0.5) spread.values[i] = err.values[static_cast<size_t>(nearest.index[i])];
  }
  const Grid smoothed = gaussian_filter(spread, params.kernel, params.sigma);

  double fg_count = 0.0, fg_err = 0.0, bg_err = 0.0;
  const double decay = std::log(0.5) / params.attenuation;
  for (size_t i = 0; i < n; ++i) {
    if (gt.values[i] > 0.5) {
      fg_count += 1.0;
      fg_err += std::min(err.values[i], smoothed.values[i]);
    } else {
      bg_err += err.values[i] * (2.0 - std::exp(decay * nearest.distance[i]));
    }
  }
  const double tp = fg_count - fg_err;
  const double recall = 1.0 - fg_err / fg_count;
  const double precision = tp + bg_err > 0.0 ? tp / (tp + bg_err) : 0.0;
  const double denom = params.beta_sq * precision + recall;
  if (denom <= 0.0) return 0.0;
  return clamp01((1.0 + params.beta_sq) * precision * recall / denom);
}

FrameScore score_frame(const Grid& prob, const Grid& gt, double threshold) {
  FrameScore s;
  s.s_alpha = s_measure(prob, gt);
  s.e_phi_mn = e_measure_mean(prob, gt);
  s.f_w_beta = weighted_fbeta(prob, gt);
  Grid bin(prob.rows, prob.cols);
  for (size_t i = 0; i < prob.size(); ++i) bin.values[i] = prob.values[i] >= threshold ? 1.0 : 0.0;
  s.dice = dice(bin, gt);
  return s;
}

const ReportRow* MetricReport::find(const std::string& split) const {
  for (const auto& r : rows) {
    if (r.split == split) return &r;
  }
  return nullptr;
}

MetricReport aggregate_report(const std::vector<FrameScore>& scores,
                              const std::map<std::string, std::string>& split_map, Pooling pooling) {
  struct Acc {
    int64_t frames = 0;
    std::array<double, 4> sum{};
    std::map<std::string, std::pair<int64_t, std::array<double, 4>>> cases;
  };
  std::map<std::string, Acc> by_split;
  for (const auto& s : scores) {
    auto it = split_map.find(s.case_id);
    if (it == split_map.end()) {
      throw std::invalid_argument("frame " + std::to_string(s.frame_id) + " of case '" + s.case_id +
                                  "' has no split assignment");
    }
    auto& acc = by_split[it->second];
    const std::array<double, 4> v{s.s_alpha, s.e_phi_mn, s.f_w_beta, s.dice};
    acc.frames += 1;
    auto& per_case = acc.cases[s.case_id];
    per_case.first += 1;
    for (size_t k = 0; k < 4; ++k) {
      acc.sum[k] += v[k];
      per_case.second[k] += v[k];
    }
  }
  std::vector<std::string> order;
  for (const auto& name : kCanonicalSplits) {
    if (by_split.count(name)) order.push_back(name);
  }
  for (const auto& [name, acc] : by_split) {
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
  }
  MetricReport report;
  for (const auto& name : order) {
    const auto& acc = by_split.at(name);
    std::array<double, 4> mean{};
    if (pooling == Pooling::kFrames) {
      for (size_t k = 0; k < 4; ++k) mean[k] = acc.sum[k] / static_cast<double>(acc.frames);
    } else {
      for (const auto& [id, c] : acc.cases) {
        for (size_t k = 0; k < 4; ++k) mean[k] += c.second[k] / static_cast<double>(c.first);
      }
      for (auto& m : mean) m /= static_cast<double>(acc.cases.size());
    }
    report.rows.push_back({name, acc.frames, mean[0], mean[1], mean[2], mean[3]});
  }
  return report;
}

namespace {
std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}
}  // namespace

std::string report_to_csv(const MetricReport& report) {
  std::ostringstream os;
  os << "split,n_frames,S_alpha,E_phi_mn,F_w_beta,Dice\n";
  for (const auto& r : report.rows) {
    os << r.split << ',' << r.n_frames << ',' << fixed3(r.s_alpha) << ',' << fixed3(r.e_phi_mn) << ','
       << fixed3(r.f_w_beta) << ',' << fixed3(r.dice) << '\n';
  }
  return os.str();
}

std::string report_to_json(const MetricReport& report) {
  std::ostringstream os;
  os << "{\"rows\": [";
  for (size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    os << (i ? ", " : "") << "{\"split\": \"" << r.split << "\", \"n_frames\": " << r.n_frames
       << ", \"S_alpha\": " << fixed3(r.s_alpha) << ", \"E_phi_mn\": " << fixed3(r.e_phi_mn)
       << ", \"F_w_beta\": " << fixed3(r.f_w_beta) << ", \"Dice\": " << fixed3(r.dice) << "}";
  }
  os << "]}\n";
  return os.str();
}

void write_report(const MetricReport& report, const std::filesystem::path& stem) {
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << text;
  };
  auto csv = stem;
  auto json = stem;
  write(csv.replace_extension(".csv"), report_to_csv(report));
  write(json.replace_extension(".json"), report_to_json(report));
}

}  // namespace diffvps
