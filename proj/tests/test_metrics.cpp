#include <random>

#include "cafe/metrics.hpp"
#include "doctest.h"
#include "metric_oracle.hpp"

using namespace cafe;

namespace {

std::pair<std::vector<int>, std::vector<int>> random_masks(std::mt19937_64& rng, int n, int classes) {
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::uniform_real_distribution<double> u;
  std::vector<int> pred(static_cast<std::size_t>(n)), gt(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    pred[static_cast<std::size_t>(i)] = cls(rng);
    gt[static_cast<std::size_t>(i)] = u(rng) < 0.1 ? -1 : cls(rng);
  }
  return {pred, gt};
}

}  // namespace

TEST_CASE("perfect agreement fills only the diagonal") {
  ConfusionAccumulator acc(3);
  std::vector<int> m{0, 1, 2, 2, 1, 0, 0};
  acc.update(m, m);
  for (int g = 0; g < 3; ++g)
    for (int p = 0; p < 3; ++p)
      if (g != p) CHECK(acc.count(g, p) == 0);
  auto r = compute(acc);
  for (const auto& v : r.iou_per_class) CHECK(*v == 1.0);
  CHECK(r.miou == 1.0);
  CHECK(r.mdice == 1.0);
}

TEST_CASE("ignored pixels are not counted") {
  ConfusionAccumulator acc(2);
  std::vector<int> gt(16, -1), pred(16, 1);
  acc.update(pred, gt);
  CHECK(acc.total() == 0);
  CHECK(acc == ConfusionAccumulator(2));
  CHECK_THROWS_AS(compute(acc), MetricError);
}

TEST_CASE("hand-counted 4x4 example") {
  // class 1: TP 6, FP 2, FN 2, TN 6
  std::vector<int> gt{1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0};
  std::vector<int> pred{1, 1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0};
  ConfusionAccumulator acc(2);
  acc.update(pred, gt);
  CHECK(acc.counts() == std::vector<std::int64_t>{6, 2, 2, 6});
  auto r = compute(acc);
  CHECK(*r.iou_per_class[1] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(*r.dice_per_class[1] == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("all-background prediction scores zero water IoU") {
  std::vector<int> gt{0, 1, 1, 0}, pred{0, 0, 0, 0};
  ConfusionAccumulator acc(2);
  acc.update(pred, gt);
  CHECK(*compute(acc).iou_per_class[1] == 0.0);
}

TEST_CASE("absent classes are excluded from the means") {
  std::vector<int> m{0, 0, 0, 0};
  ConfusionAccumulator acc(2);
  acc.update(m, m);
  auto r = compute(acc);
  CHECK_FALSE(r.iou_per_class[1].has_value());
  CHECK(r.miou == 1.0);
}

TEST_CASE("illegal labels are rejected") {
  ConfusionAccumulator acc(2);
  std::vector<int> ok{0, 1}, bad_gt{0, 2}, bad_pred{-1, 0};
  CHECK_THROWS_AS(acc.update(ok, bad_gt), MetricError);
  CHECK_THROWS_AS(acc.update(bad_pred, ok), MetricError);
  CHECK_THROWS_AS(acc.update(std::vector<int>{0}, ok), MetricError);
  CHECK(acc.total() == 0);
}

TEST_CASE("scores equal the pixel-set oracle") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int classes = 2 + trial % 3;
    auto [pred, gt] = random_masks(rng, 256, classes);
    ConfusionAccumulator acc(classes);
    acc.update(pred, gt);
    auto r = compute(acc);
    auto o = testing::oracle_scores(pred, gt, classes, -1);
    CHECK(r.iou_per_class == o.iou);
    CHECK(r.dice_per_class == o.dice);
    CHECK(r.miou == o.miou);
    CHECK(r.mdice == o.mdice);
    for (std::size_t c = 0; c < r.iou_per_class.size(); ++c) {
      if (!r.iou_per_class[c]) continue;
      const double iou = *r.iou_per_class[c], dice = *r.dice_per_class[c];
      CHECK(std::abs(dice - 2 * iou / (1 + iou)) < 1e-12);
      CHECK(dice >= iou);
      if (iou > 0 && iou < 1) CHECK(dice > iou);
    }
  }
}

TEST_CASE("merging partitions equals one stream") {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    ConfusionAccumulator whole(2), left(2), right(2);
    std::vector<std::pair<std::vector<int>, std::vector<int>>> chunks;
    for (int i = 0; i < 6; ++i) chunks.push_back(random_masks(rng, 30, 2));
    for (std::size_t i = 0; i < chunks.size(); ++i) {
      whole.update(chunks[i].first, chunks[i].second);
      (rng() % 2 ? left : right).update(chunks[i].first, chunks[i].second);
    }
    auto a = left, b = right;
    a.merge(right);
    b.merge(left);
    CHECK(a == whole);
    CHECK(b == whole);
  }
}

TEST_CASE("evaluator reports per-image scores and serializes") {
  SegmentationEvaluator ev(2);
  std::vector<int> gt{0, 1, 1, 0}, good{0, 1, 1, 0}, bad{1, 0, 0, 1};
  ev.add_image("a", good, gt);
  ev.add_image("b", bad, gt);
  auto r = ev.report();
  REQUIRE(r.per_image_miou.size() == 2);
  CHECK(r.per_image_miou[0].miou == 1.0);
  CHECK(r.per_image_miou[1].miou == 0.0);
  auto j = to_json(r, -1);
  for (const char* key : {"miou", "mdice", "iou_per_class", "per_image_miou", "masking"}) CHECK(j.contains(key));
  CHECK(per_image_csv(r) == "id,miou\na,1\nb,0\n");

  std::vector<float> logits{0.f, 2.f, 1.f, -1.f};  // B=1, K=2, hw=2
  CHECK(argmax_labels<float>(logits, 1, 2, 2) == std::vector<int>{1, 0});
}
