#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace diffvps {

// Row-major 2-D map of doubles; masks use {0, 1}, probability maps [0, 1].
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(int r, int c, double fill = 0.0) : rows(r), cols(c), values(static_cast<size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return values[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return values[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return values.size(); }
};

Grid to_grid(const torch::Tensor& map);

double dice(const Grid& pred, const Grid& gt);

// Structure measure, alpha * object + (1 - alpha) * region.
double s_measure(const Grid& prob, const Grid& gt, double alpha = 0.5);

inline constexpr int kEmeasureThresholds = 256;
// Threshold k binarizes at prob >= (k + 0.5) / 256.
double e_measure_threshold(int k);
double e_measure_mean(const Grid& prob, const Grid& gt);

struct WeightedFParams {
  double beta_sq = 1.0;
  double sigma = 5.0;
  int kernel = 7;
  double attenuation = 5.0;
};
double weighted_fbeta(const Grid& prob, const Grid& gt, const WeightedFParams& params = {});

// Euclidean distance to, and index of, the nearest pixel with value 1.
// Ties resolve to the smallest (row, col). Empty masks yield infinite
// distance and index -1.
struct NearestForeground {
  std::vector<double> distance;
  std::vector<int> index;
};
NearestForeground nearest_foreground(const Grid& mask);

struct FrameScore {
  double s_alpha = 0.0;
  double e_phi_mn = 0.0;
  double f_w_beta = 0.0;
  double dice = 0.0;
  std::string case_id;
  int frame_id = 0;
};

// Probability map + binary GT -> all four metrics; Dice on the 0.5 binarized map.
FrameScore score_frame(const Grid& prob, const Grid& gt, double threshold = 0.5);

struct ReportRow {
  std::string split;
  int64_t n_frames = 0;
  double s_alpha = 0.0;
  double e_phi_mn = 0.0;
  double f_w_beta = 0.0;
  double dice = 0.0;
};

struct MetricReport {
  std::vector<ReportRow> rows;
  const ReportRow* find(const std::string& split) const;
};

enum class Pooling { kFrames, kCases };

// split_map assigns each case_id to a split name. Canonical benchmark
// splits come first in a fixed order, any others follow alphabetically.
MetricReport aggregate_report(const std::vector<FrameScore>& scores,
                              const std::map<std::string, std::string>& split_map,
                              Pooling pooling = Pooling::kFrames);

std::string report_to_csv(const MetricReport& report);
std::string report_to_json(const MetricReport& report);
void write_report(const MetricReport& report, const std::filesystem::path& stem);

}  // namespace diffvps
