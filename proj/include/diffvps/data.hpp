#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace diffvps {

enum class Difficulty { kEasy, kHard };
std::string to_string(Difficulty d);

struct SyntheticConfig {
  int n_cases = 200;
  int frames_per_case = 8;
  int height = 64;
  int width = 64;
  double hard_fraction = 0.5;
  std::array<double, 6> class_weights{1, 1, 1, 1, 1, 1};
  double test_fraction = 0.3;
  double seen_fraction = 0.5;  // share of test cases continuing a train video
};

// Writes the dataset tree under root (created if absent):
//   root/splits.json
//   root/{train,test}/<case_id>/Frame/NNNNN.png   RGB frames
//   root/{train,test}/<case_id>/GT/NNNNN.png      {0,255} masks
//   root/{train,test}/<case_id>/annotations.jsonl {"frame","class_id","box":[xc,yc,w,h]}
void generate_synthetic(const SyntheticConfig& cfg, uint64_t seed, const std::filesystem::path& root);

struct ClipAnnotations {
  int64_t class_id = 0;
  std::array<double, 4> box{};  // x_c, y_c, w, h normalized to [0, 1]
};

struct CaseEntry {
  std::string case_id;
  std::string role;        // train | test
  std::string difficulty;  // easy | hard
  std::string visibility;  // seen | unseen (test only)
  std::string lineage;
  std::vector<std::filesystem::path> frames;
  std::vector<std::filesystem::path> masks;
  std::vector<ClipAnnotations> annotations;

  std::string split() const { return difficulty + "-" + visibility; }
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<CaseEntry> cases;

  const CaseEntry& find(const std::string& case_id) const;
  std::vector<const CaseEntry*> with_role(const std::string& role) const;
  size_t frame_count() const;
};

DatasetIndex load_dataset(const std::filesystem::path& root);

struct VideoClip {
  torch::Tensor target;  // 3 x H x W in [-1, 1]
  torch::Tensor prev;    // delta x 3 x H x W, oldest first
  torch::Tensor mask;    // H x W, {0, 1}
  ClipAnnotations annotations;
  std::string case_id;
  int64_t frame_index = 0;
};

// Frame as a float tensor 3 x H x W in [-1, 1] (RGB), resized when
// (height, width) differ from the stored size.
torch::Tensor read_frame(const std::filesystem::path& path, int64_t height, int64_t width);

// Previous frames before the start of a video repeat frame 0.
VideoClip sample_clip(const DatasetIndex& index, const std::string& case_id, int64_t frame, int64_t delta,
                      int64_t height, int64_t width);

// All frames and masks of a set of cases held in memory at a fixed size.
class ClipCache {
 public:
  ClipCache(const DatasetIndex& index, const std::vector<const CaseEntry*>& cases, int64_t height,
            int64_t width);

  VideoClip clip(size_t case_slot, int64_t frame, int64_t delta) const;
  size_t case_count() const { return cases_.size(); }
  int64_t frame_count(size_t case_slot) const { return frames_[case_slot].size(0); }
  const CaseEntry& entry(size_t case_slot) const { return *cases_[case_slot]; }

 private:
  std::vector<const CaseEntry*> cases_;
  std::vector<torch::Tensor> frames_;  // per case: F x 3 x H x W
  std::vector<torch::Tensor> masks_;   // per case: F x H x W
};

// Tight normalized box of a binary mask; zeros when empty.
std::array<double, 4> mask_box(const torch::Tensor& mask);

}  // namespace diffvps
