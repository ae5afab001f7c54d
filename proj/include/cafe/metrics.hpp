#pragma once

// Confusion-matrix segmentation scores. Rows are ground truth, columns are
// predictions. Pixels whose ground truth equals the ignore label are not
// counted. Classes with an empty union (absent from both prediction and
// ground truth) have no IoU and are left out of the means.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace cafe {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(int num_classes = 2, int ignore_label = -1);

  void update(std::span<const int> pred, std::span<const int> gt);
  void merge(const ConfusionAccumulator& other);

  int num_classes() const { return k_; }
  int ignore_label() const { return ignore_; }
  std::int64_t count(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt * k_ + pred)]; }
  std::int64_t total() const;
  const std::vector<std::int64_t>& counts() const { return counts_; }

  std::int64_t true_positives(int c) const;
  std::int64_t false_positives(int c) const;
  std::int64_t false_negatives(int c) const;

  bool operator==(const ConfusionAccumulator&) const = default;

 private:
  int k_;
  int ignore_;
  std::vector<std::int64_t> counts_;
};

struct ImageScore {
  std::string id;
  double miou = 0.0;
};

struct MetricReport {
  std::vector<std::optional<double>> iou_per_class;
  std::vector<std::optional<double>> dice_per_class;
  double miou = 0.0;
  double mdice = 0.0;
  std::int64_t pixels = 0;
  std::vector<ImageScore> per_image_miou;
};

/// Throws MetricError when nothing has been counted.
MetricReport compute(const ConfusionAccumulator& acc);

/// Global accumulator plus one mIoU per image.
class SegmentationEvaluator {
 public:
  explicit SegmentationEvaluator(int num_classes = 2, int ignore_label = -1) : global_(num_classes, ignore_label) {}

  void add_image(const std::string& id, std::span<const int> pred, std::span<const int> gt);
  const ConfusionAccumulator& accumulator() const { return global_; }
  MetricReport report() const;

 private:
  ConfusionAccumulator global_;
  std::vector<ImageScore> per_image_;
};

/// Argmax over classes of logits [B, K, H, W], written as B*H*W labels.
template <typename T>
std::vector<int> argmax_labels(std::span<const T> logits, std::int64_t batch, std::int64_t classes, std::int64_t hw);

nlohmann::json to_json(const MetricReport& r, int ignore_label);
std::string per_image_csv(const MetricReport& r);

}  // namespace cafe
