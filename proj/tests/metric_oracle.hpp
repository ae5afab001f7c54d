#pragma once

// Brute-force segmentation scores from explicit pixel-index sets. Shares no
// code with the confusion accumulator.

#include <algorithm>
#include <iterator>
#include <optional>
#include <set>
#include <vector>

namespace cafe::testing {

struct OracleScores {
  std::vector<std::optional<double>> iou, dice;
  double miou = 0, mdice = 0;
};

inline OracleScores oracle_scores(const std::vector<int>& pred, const std::vector<int>& gt, int classes, int ignore) {
  OracleScores s;
  double iou_sum = 0, dice_sum = 0;
  int n = 0;
  for (int c = 0; c < classes; ++c) {
    std::set<std::size_t> p, g, inter, uni;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      if (pred[i] == c) p.insert(i);
      if (gt[i] == c) g.insert(i);
    }
    std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::inserter(inter, inter.begin()));
    std::set_union(p.begin(), p.end(), g.begin(), g.end(), std::inserter(uni, uni.begin()));
    if (uni.empty()) {
      s.iou.emplace_back();
      s.dice.emplace_back();
      continue;
    }
    const double iou = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    const double dice = 2.0 * static_cast<double>(inter.size()) / static_cast<double>(p.size() + g.size());
    s.iou.emplace_back(iou);
    s.dice.emplace_back(dice);
    iou_sum += iou;
    dice_sum += dice;
    ++n;
  }
  s.miou = iou_sum / n;
  s.mdice = dice_sum / n;
  return s;
}

}  // namespace cafe::testing
