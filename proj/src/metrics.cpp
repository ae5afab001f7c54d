#include "cafe/metrics.hpp"

#include <sstream>

namespace cafe {

ConfusionAccumulator::ConfusionAccumulator(int num_classes, int ignore_label)
    : k_(num_classes), ignore_(ignore_label), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw MetricError("num_classes must be positive");
  if (ignore_label >= 0 && ignore_label < num_classes) throw MetricError("ignore label collides with a class id");
}

void ConfusionAccumulator::update(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size())
    throw MetricError("prediction and ground truth sizes differ: " + std::to_string(pred.size()) + " vs " +
                      std::to_string(gt.size()));
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_) continue;
    if (gt[i] < 0 || gt[i] >= k_) throw MetricError("illegal ground-truth class " + std::to_string(gt[i]));
    if (pred[i] < 0 || pred[i] >= k_) throw MetricError("illegal predicted class " + std::to_string(pred[i]));
  }
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] != ignore_) ++counts_[static_cast<std::size_t>(gt[i] * k_ + pred[i])];
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  if (other.k_ != k_ || other.ignore_ != ignore_) throw MetricError("cannot merge accumulators of different shape");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionAccumulator::total() const {
  std::int64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::int64_t ConfusionAccumulator::true_positives(int c) const { return count(c, c); }

std::int64_t ConfusionAccumulator::false_positives(int c) const {
  std::int64_t n = 0;
  for (int g = 0; g < k_; ++g)
    if (g != c) n += count(g, c);
  return n;
}

std::int64_t ConfusionAccumulator::false_negatives(int c) const {
  std::int64_t n = 0;
  for (int p = 0; p < k_; ++p)
    if (p != c) n += count(c, p);
  return n;
}

MetricReport compute(const ConfusionAccumulator& acc) {
  if (acc.total() == 0) throw MetricError("no pixels counted");
  MetricReport r;
  r.pixels = acc.total();
  double iou_sum = 0, dice_sum = 0;
  int defined = 0;
  for (int c = 0; c < acc.num_classes(); ++c) {
    const auto tp = acc.true_positives(c), fp = acc.false_positives(c), fn = acc.false_negatives(c);
    const auto uni = tp + fp + fn;
    if (uni == 0) {
      r.iou_per_class.emplace_back();
      r.dice_per_class.emplace_back();
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    const double dice = static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
    r.iou_per_class.emplace_back(iou);
    r.dice_per_class.emplace_back(dice);
    iou_sum += iou;
    dice_sum += dice;
    ++defined;
  }
  r.miou = iou_sum / defined;
  r.mdice = dice_sum / defined;
  return r;
}

void SegmentationEvaluator::add_image(const std::string& id, std::span<const int> pred, std::span<const int> gt) {
  ConfusionAccumulator one(global_.num_classes(), global_.ignore_label());
  one.update(pred, gt);
  global_.merge(one);
  if (one.total() > 0) per_image_.push_back({id, compute(one).miou});
}

MetricReport SegmentationEvaluator::report() const {
  auto r = compute(global_);
  r.per_image_miou = per_image_;
  return r;
}

template <typename T>
std::vector<int> argmax_labels(std::span<const T> logits, std::int64_t batch, std::int64_t classes, std::int64_t hw) {
  std::vector<int> out(static_cast<std::size_t>(batch * hw));
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t p = 0; p < hw; ++p) {
      int best = 0;
      T best_v = logits[static_cast<std::size_t>(b * classes * hw + p)];
      for (std::int64_t k = 1; k < classes; ++k) {
        const T v = logits[static_cast<std::size_t>((b * classes + k) * hw + p)];
        if (v > best_v) {
          best_v = v;
          best = static_cast<int>(k);
        }
      }
      out[static_cast<std::size_t>(b * hw + p)] = best;
    }
  return out;
}

template std::vector<int> argmax_labels<float>(std::span<const float>, std::int64_t, std::int64_t, std::int64_t);
template std::vector<int> argmax_labels<double>(std::span<const double>, std::int64_t, std::int64_t, std::int64_t);

nlohmann::json to_json(const MetricReport& r, int ignore_label) {
  auto opt = [](const std::vector<std::optional<double>>& v) {
    auto a = nlohmann::json::array();
    for (const auto& x : v) a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
    return a;
  };
  auto images = nlohmann::json::array();
  for (const auto& s : r.per_image_miou) images.push_back({{"id", s.id}, {"miou", s.miou}});
  return {{"miou", r.miou},
          {"mdice", r.mdice},
          {"iou_per_class", opt(r.iou_per_class)},
          {"dice_per_class", opt(r.dice_per_class)},
          {"pixels", r.pixels},
          {"per_image_miou", images},
          {"masking",
           {{"ignore_label", ignore_label},
            {"rule", "pixels whose ground truth equals ignore_label are excluded; classes with an empty union are "
                     "excluded from the means"}}}};
}

std::string per_image_csv(const MetricReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "id,miou\n";
  for (const auto& s : r.per_image_miou) os << s.id << ',' << s.miou << '\n';
  return os.str();
}

}  // namespace cafe
