#include "diffvps/data.hpp"

#include "diffvps/mask_codec.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace diffvps {

namespace fs = std::filesystem;

std::string to_string(Difficulty d) { return d == Difficulty::kEasy ? "easy" : "hard"; }

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d.png", i);
  return buf;
}

std::string numbered(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d", prefix, i);
  return buf;
}

// Blob geometry families, one per class: semi-axes at 64 px scale.
constexpr std::array<std::array<double, 2>, 6> kClassAxes{{{8, 8}, {11, 6.5}, {12, 12}, {15, 9}, {16, 15}, {19, 11}}};

struct Wave {
  double kx, ky, phase, amp;
};

// Everything that stays fixed over one video.
struct Lineage {
  Difficulty difficulty = Difficulty::kEasy;
  int class_id = 0;
  uint64_t seed = 0;
  std::array<double, 3> bg_color{};
  std::array<double, 3> fg_tint{};
  std::vector<Wave> bg_waves, fg_waves;
  double axis_a = 0, axis_b = 0, theta0 = 0, spin = 0;
  double cx = 0, cy = 0, amp_x = 0, amp_y = 0, wx = 0, wy = 0, px = 0, py = 0;
  double wobble_phase = 0;
  double contrast = 0, noise = 0;
  int speculars = 0;
};

Lineage make_lineage(Difficulty difficulty, int class_id, uint64_t seed, int height, int width) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const double scale = std::min(height, width) / 64.0;

  Lineage l;
  l.difficulty = difficulty;
  l.class_id = class_id;
  l.seed = seed;
  l.bg_color = {uni(0.55, 0.75), uni(0.30, 0.45), uni(0.25, 0.40)};
  const double tint_sign = u01(rng) < 0.5 ? -1.0 : 1.0;
  l.fg_tint = {tint_sign * uni(0.8, 1.0), tint_sign * uni(0.6, 0.9), tint_sign * uni(0.5, 0.8)};
  for (int i = 0; i < 4; ++i) {
    const double freq = uni(0.08, 0.35) / scale, dir = uni(0.0, 2.0 * std::numbers::pi);
    l.bg_waves.push_back({freq * std::cos(dir), freq * std::sin(dir), uni(0.0, 6.3), uni(0.03, 0.07)});
  }
  for (int i = 0; i < 2; ++i) {
    const double freq = uni(0.4, 0.8) / scale, dir = uni(0.0, 2.0 * std::numbers::pi);
    l.fg_waves.push_back({freq * std::cos(dir), freq * std::sin(dir), uni(0.0, 6.3), uni(0.02, 0.04)});
  }
  const auto& axes = kClassAxes[static_cast<size_t>(class_id)];
  l.axis_a = axes[0] * scale * uni(0.92, 1.08);
  l.axis_b = axes[1] * scale * uni(0.92, 1.08);
  l.theta0 = uni(0.0, std::numbers::pi);
  l.spin = uni(-0.06, 0.06);
  l.amp_x = uni(3.0, 7.0) * scale;
  l.amp_y = uni(3.0, 7.0) * scale;
  const double margin_x = std::max(l.axis_a, l.axis_b) * 1.1 + l.amp_x + 2.0;
  const double margin_y = std::max(l.axis_a, l.axis_b) * 1.1 + l.amp_y + 2.0;
  l.cx = uni(margin_x, width - margin_x);
  l.cy = uni(margin_y, height - margin_y);
  l.wx = uni(0.25, 0.45);
  l.wy = uni(0.25, 0.45);
  l.px = uni(0.0, 6.3);
  l.py = uni(0.0, 6.3);
  l.wobble_phase = uni(0.0, 6.3);
  if (difficulty == Difficulty::kEasy) {
    l.contrast = uni(0.28, 0.34);
    l.noise = 0.01;
    l.speculars = 0;
  } else {
    l.contrast = uni(0.07, 0.10);
    l.noise = 0.03;
    l.speculars = 3;
  }
  return l;
}

struct RenderedFrame {
  cv::Mat rgb;   // CV_8UC3, RGB order
  cv::Mat mask;  // CV_8UC1, {0, 255}
};

RenderedFrame render(const Lineage& l, int t, int height, int width) {
  std::mt19937_64 rng(splitmix64(l.seed ^ (0x5bd1e995ULL * static_cast<uint64_t>(t + 1))));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double cx = l.cx + l.amp_x * std::sin(l.wx * t + l.px);
  const double cy = l.cy + l.amp_y * std::cos(l.wy * t + l.py);
  const double theta = l.theta0 + l.spin * t;
  const double ct = std::cos(theta), st = std::sin(theta);

  struct Spot {
    double x, y, r;
  };
  std::vector<Spot> spots;
  for (int i = 0; i < l.speculars; ++i) {
    spots.push_back({u01(rng) * width, u01(rng) * height, 1.0 + 1.5 * u01(rng)});
  }

  RenderedFrame out{cv::Mat(height, width, CV_8UC3), cv::Mat(height, width, CV_8UC1)};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      double tex = 0.0;
      for (const auto& w : l.bg_waves) tex += w.amp * std::sin(w.kx * px + w.ky * py + w.phase);

      const double dx = px - cx, dy = py - cy;
      const double u = (ct * dx + st * dy) / l.axis_a;
      const double v = (-st * dx + ct * dy) / l.axis_b;
      const double rho = std::sqrt(u * u + v * v);
      const double boundary = 1.0 + 0.08 * std::sin(3.0 * std::atan2(v, u) + 0.3 * t + l.wobble_phase);
      const bool inside = rho <= boundary;
      // Soft one-pixel edge in the image; the mask stays hard.
      const double edge_px = (boundary - rho) * std::min(l.axis_a, l.axis_b);
      const double cover = std::clamp(0.5 + edge_px, 0.0, 1.0);

      double fg_tex = 0.0;
      for (const auto& w : l.fg_waves) fg_tex += w.amp * std::sin(w.kx * px + w.ky * py + w.phase);

      double spec = 0.0;
      for (const auto& s : spots) {
        const double d2 = (px - s.x) * (px - s.x) + (py - s.y) * (py - s.y);
        spec += 0.6 * std::exp(-d2 / (2.0 * s.r * s.r));
      }

      std::array<double, 3> rgb{};
      for (size_t c = 0; c < 3; ++c) {
        const double bg = l.bg_color[c] + tex;
        const double fg = bg + l.contrast * l.fg_tint[c] + fg_tex;
        rgb[c] = std::clamp(bg + cover * (fg - bg) + spec + l.noise * gauss(rng), 0.0, 1.0);
      }
      auto& px_out = out.rgb.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) px_out[c] = static_cast<uint8_t>(std::lround(rgb[static_cast<size_t>(c)] * 255.0));
      out.mask.at<uint8_t>(y, x) = inside ? 255 : 0;
    }
  }
  return out;
}

std::array<double, 4> box_of(const cv::Mat& mask) {
  int x0 = mask.cols, y0 = mask.rows, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.rows; ++y) {
    for (int x = 0; x < mask.cols; ++x) {
      if (mask.at<uint8_t>(y, x) == 0) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) return {0, 0, 0, 0};
  const double w = mask.cols, h = mask.rows;
  return {(x0 + x1 + 1) / 2.0 / w, (y0 + y1 + 1) / 2.0 / h, (x1 - x0 + 1) / w, (y1 - y0 + 1) / h};
}

void write_png(const fs::path& path, const cv::Mat& img) {
  cv::Mat out = img;
  if (img.channels() == 3) cv::cvtColor(img, out, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), out)) throw std::runtime_error("cannot write " + path.string());
}

void write_case(const fs::path& dir, const Lineage& l, int first, int count, int height, int width) {
  fs::create_directories(dir / "Frame");
  fs::create_directories(dir / "GT");
  std::ofstream ann(dir / "annotations.jsonl", std::ios::trunc);
  for (int i = 0; i < count; ++i) {
    const auto frame = render(l, first + i, height, width);
    write_png(dir / "Frame" / frame_name(i), frame.rgb);
    write_png(dir / "GT" / frame_name(i), frame.mask);
    nlohmann::json line = {{"frame", i}, {"class_id", l.class_id}, {"box", box_of(frame.mask)}};
    ann << line.dump() << '\n';
  }
}

bool evenly_marked(int i, double fraction) {
  return std::floor((i + 1) * fraction) > std::floor(i * fraction);
}

}  // namespace

void generate_synthetic(const SyntheticConfig& cfg, uint64_t seed, const fs::path& root) {
  if (cfg.height <= 0 || cfg.width <= 0 || cfg.height % 32 != 0 || cfg.width % 32 != 0) {
    throw std::invalid_argument("generate_synthetic: frame size must be a positive multiple of 32");
  }
  if (cfg.n_cases < 1 || cfg.frames_per_case < 1) throw std::invalid_argument("generate_synthetic: need cases and frames");
  if (!(cfg.test_fraction >= 0.0 && cfg.test_fraction < 1.0) || !(cfg.seen_fraction >= 0.0 && cfg.seen_fraction <= 1.0) ||
      !(cfg.hard_fraction >= 0.0 && cfg.hard_fraction <= 1.0)) {
    throw std::invalid_argument("generate_synthetic: fractions out of range");
  }
  double weight_sum = 0.0;
  for (double w : cfg.class_weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("generate_synthetic: negative class weight");
    weight_sum += w;
  }
  if (weight_sum <= 0.0) throw std::invalid_argument("generate_synthetic: class weights sum to zero");

  const int n_test = static_cast<int>(std::lround(cfg.n_cases * cfg.test_fraction));
  const int n_train = cfg.n_cases - n_test;
  const int n_seen = std::min(n_train, static_cast<int>(std::lround(n_test * cfg.seen_fraction)));
  const int n_unseen = n_test - n_seen;
  const int n_lineages = n_train + n_unseen;

  std::vector<Lineage> lineages;
  for (int i = 0; i < n_lineages; ++i) {
    const uint64_t lseed = splitmix64(seed * 0x100000001b3ULL + static_cast<uint64_t>(i));
    std::mt19937_64 pick(lseed ^ 0xc1a55ULL);
    std::discrete_distribution<int> cls(cfg.class_weights.begin(), cfg.class_weights.end());
    // Train and unseen lineages each get an even spread of hard videos.
    const int slot = i < n_train ? i : i - n_train;
    const auto difficulty = evenly_marked(slot, cfg.hard_fraction) ? Difficulty::kHard : Difficulty::kEasy;
    lineages.push_back(make_lineage(difficulty, cls(pick), lseed, cfg.height, cfg.width));
  }

  fs::create_directories(root);
  nlohmann::json cases = nlohmann::json::array();
  int case_no = 0;
  auto add_case = [&](const std::string& role, int lineage, int first, const std::string& visibility) {
    const auto id = numbered("case", case_no++);
    write_case(root / role / id, lineages[static_cast<size_t>(lineage)], first, cfg.frames_per_case, cfg.height, cfg.width);
    nlohmann::json entry = {{"case_id", id},
                            {"role", role},
                            {"difficulty", to_string(lineages[static_cast<size_t>(lineage)].difficulty)},
                            {"lineage", numbered("video", lineage)},
                            {"class_id", lineages[static_cast<size_t>(lineage)].class_id},
                            {"frames", cfg.frames_per_case}};
    if (!visibility.empty()) entry["visibility"] = visibility;
    cases.push_back(entry);
  };
  for (int i = 0; i < n_train; ++i) add_case("train", i, 0, "");
  // Seen test cases continue train videos, spread over the train set with
  // the same hard share as the unseen ones.
  std::array<std::vector<int>, 2> train_by_difficulty;
  for (int i = 0; i < n_train; ++i) {
    train_by_difficulty[lineages[static_cast<size_t>(i)].difficulty == Difficulty::kHard].push_back(i);
  }
  std::array<int, 2> wanted{};
  for (int k = 0; k < n_seen; ++k) ++wanted[evenly_marked(k, cfg.hard_fraction)];
  for (int d = 0; d < 2; ++d) {
    const int other = 1 - d;
    const int spill = std::max(0, wanted[d] - static_cast<int>(train_by_difficulty[d].size()));
    wanted[d] -= spill;
    wanted[other] += spill;
  }
  std::vector<int> seen_lineages;
  for (int d = 0; d < 2; ++d) {
    const auto& pool = train_by_difficulty[d];
    for (int k = 0; k < wanted[d]; ++k) {
      seen_lineages.push_back(pool[static_cast<size_t>(static_cast<int64_t>(k) * static_cast<int64_t>(pool.size()) / wanted[d])]);
    }
  }
  std::sort(seen_lineages.begin(), seen_lineages.end());
  for (const int lineage : seen_lineages) add_case("test", lineage, cfg.frames_per_case, "seen");
  for (int k = 0; k < n_unseen; ++k) add_case("test", n_train + k, 0, "unseen");

  nlohmann::json manifest = {{"version", 1},
                             {"seed", seed},
                             {"height", cfg.height},
                             {"width", cfg.width},
                             {"frames_per_case", cfg.frames_per_case},
                             {"cases", cases}};
  std::ofstream os(root / "splits.json", std::ios::trunc);
  os << manifest.dump(2) << '\n';
}

const CaseEntry& DatasetIndex::find(const std::string& case_id) const {
  for (const auto& c : cases) {
    if (c.case_id == case_id) return c;
  }
  throw std::out_of_range("unknown case '" + case_id + "'");
}

std::vector<const CaseEntry*> DatasetIndex::with_role(const std::string& role) const {
  std::vector<const CaseEntry*> out;
  for (const auto& c : cases) {
    if (c.role == role) out.push_back(&c);
  }
  return out;
}

size_t DatasetIndex::frame_count() const {
  size_t n = 0;
  for (const auto& c : cases) n += c.frames.size();
  return n;
}

DatasetIndex load_dataset(const fs::path& root) {
  const auto manifest_path = root / "splits.json";
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("missing split manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(manifest_path.string() + ": " + e.what());
  }

  DatasetIndex index;
  index.root = root;
  for (const auto& c : manifest.at("cases")) {
    CaseEntry e;
    e.case_id = c.at("case_id").get<std::string>();
    e.role = c.at("role").get<std::string>();
    e.difficulty = c.at("difficulty").get<std::string>();
    e.lineage = c.at("lineage").get<std::string>();
    if (e.role != "train" && e.role != "test") throw std::runtime_error(manifest_path.string() + ": bad role for " + e.case_id);
    if (e.difficulty != "easy" && e.difficulty != "hard") {
      throw std::runtime_error(manifest_path.string() + ": bad difficulty for " + e.case_id);
    }
    if (e.role == "test") {
      e.visibility = c.value("visibility", "");
      if (e.visibility != "seen" && e.visibility != "unseen") {
        throw std::runtime_error(manifest_path.string() + ": test case " + e.case_id + " lacks a visibility tag");
      }
    }
    const auto dir = root / e.role / e.case_id;
    const auto ann_path = dir / "annotations.jsonl";
    std::ifstream ann(ann_path);
    if (!ann) throw std::runtime_error("missing annotations " + ann_path.string());
    std::string line;
    int line_no = 0;
    while (std::getline(ann, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto where = ann_path.string() + ":" + std::to_string(line_no);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        throw std::runtime_error(where + ": malformed annotation");
      }
      if (!j.contains("frame") || !j.contains("class_id") || !j.contains("box") || !j["box"].is_array() ||
          j["box"].size() != 4) {
        throw std::runtime_error(where + ": annotation needs frame, class_id and a 4-element box");
      }
      ClipAnnotations a;
      a.class_id = j["class_id"].get<int64_t>();
      a.box = j["box"].get<std::array<double, 4>>();
      if (a.class_id < 0 || a.class_id > 5) throw std::runtime_error(where + ": class_id outside 0..5");
      for (double v : a.box) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::runtime_error(where + ": box outside the unit square");
      }
      const int frame = j["frame"].get<int>();
      if (frame != static_cast<int>(e.annotations.size())) throw std::runtime_error(where + ": frames out of order");
      e.annotations.push_back(a);
      const auto frame_path = dir / "Frame" / frame_name(frame);
      const auto mask_path = dir / "GT" / frame_name(frame);
      if (!fs::exists(frame_path)) throw std::runtime_error(where + ": missing frame " + frame_path.string());
      if (!fs::exists(mask_path)) {
        throw std::runtime_error("frame " + frame_path.string() + " has no mask (expected " + mask_path.string() + ")");
      }
      e.frames.push_back(frame_path);
      e.masks.push_back(mask_path);
    }
    if (e.frames.empty()) throw std::runtime_error("case " + e.case_id + " has no annotated frames");
    // Frames on disk without annotations are orphans as well.
    for (const auto& entry : fs::directory_iterator(dir / "Frame")) {
      const auto name = entry.path().filename().string();
      if (std::find_if(e.frames.begin(), e.frames.end(), [&](const fs::path& p) { return p.filename() == name; }) ==
          e.frames.end()) {
        throw std::runtime_error("frame " + entry.path().string() + " has no annotation");
      }
    }
    index.cases.push_back(std::move(e));
  }
  return index;
}

torch::Tensor read_frame(const fs::path& path, int64_t height, int64_t width) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read frame " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  if (rgb.rows != height || rgb.cols != width) {
    cv::resize(rgb, rgb, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0, cv::INTER_AREA);
  }
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat) / 127.5 - 1.0;
}

namespace {

torch::Tensor read_mask_sized(const fs::path& path, int64_t height, int64_t width) {
  auto m = read_mask(path);
  if (m.size(0) != height || m.size(1) != width) {
    cv::Mat src(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_32FC1, m.data_ptr<float>());
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0, cv::INTER_NEAREST);
    m = torch::from_blob(dst.data, {height, width}, torch::kFloat).clone();
  }
  return (m >= 0.5).to(torch::kFloat);
}

}  // namespace

VideoClip sample_clip(const DatasetIndex& index, const std::string& case_id, int64_t frame, int64_t delta,
                      int64_t height, int64_t width) {
  const auto& c = index.find(case_id);
  const auto n = static_cast<int64_t>(c.frames.size());
  if (frame < 0 || frame >= n) throw std::out_of_range("case '" + case_id + "' has no frame " + std::to_string(frame));
  if (delta < 1) throw std::invalid_argument("sample_clip: delta must be >= 1");
  VideoClip clip;
  clip.case_id = case_id;
  clip.frame_index = frame;
  clip.target = read_frame(c.frames[static_cast<size_t>(frame)], height, width);
  std::vector<torch::Tensor> prev;
  for (int64_t k = frame - delta; k < frame; ++k) {
    prev.push_back(read_frame(c.frames[static_cast<size_t>(std::max<int64_t>(k, 0))], height, width));
  }
  clip.prev = torch::stack(prev);
  clip.mask = read_mask_sized(c.masks[static_cast<size_t>(frame)], height, width);
  clip.annotations = c.annotations[static_cast<size_t>(frame)];
  return clip;
}

ClipCache::ClipCache(const DatasetIndex& index, const std::vector<const CaseEntry*>& cases, int64_t height,
                     int64_t width)
    : cases_(cases) {
  (void)index;
  for (const auto* c : cases_) {
    std::vector<torch::Tensor> frames, masks;
    for (size_t i = 0; i < c->frames.size(); ++i) {
      frames.push_back(read_frame(c->frames[i], height, width));
      masks.push_back(read_mask_sized(c->masks[i], height, width));
    }
    frames_.push_back(torch::stack(frames));
    masks_.push_back(torch::stack(masks));
  }
}

VideoClip ClipCache::clip(size_t case_slot, int64_t frame, int64_t delta) const {
  const auto& frames = frames_.at(case_slot);
  const auto n = frames.size(0);
  if (frame < 0 || frame >= n) throw std::out_of_range("clip frame out of range");
  VideoClip clip;
  clip.case_id = cases_[case_slot]->case_id;
  clip.frame_index = frame;
  clip.target = frames[frame];
  auto idx = torch::arange(frame - delta, frame, torch::kLong).clamp_min(0);
  clip.prev = frames.index_select(0, idx);
  clip.mask = masks_[case_slot][frame];
  clip.annotations = cases_[case_slot]->annotations[static_cast<size_t>(frame)];
  return clip;
}

std::array<double, 4> mask_box(const torch::Tensor& mask) {
  auto m = mask.detach().to(torch::kFloat).contiguous();
  cv::Mat bytes(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1);
  auto acc = m.accessor<float, 2>();
  for (int y = 0; y < bytes.rows; ++y) {
    for (int x = 0; x < bytes.cols; ++x) bytes.at<uint8_t>(y, x) = acc[y][x] > 0.5f ? 255 : 0;
  }
  return box_of(bytes);
}

}  // namespace diffvps
