#pragma once

// The two segmentation-based evaluation protocols and the lambda_ss
// sensitivity sweep.
//
// eval-1: segmenters trained on the real domain score translated images
// against the labels those images inherited from their source scenes.
// eval-2: segmenters trained on translated images (optionally fine-tuned on
// real data) are scored on held-out real groups, leave-one-group-out.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "constructs/metrics.hpp"
#include "constructs/segmenter.hpp"
#include "constructs/training.hpp"

namespace constructs {

struct MetricReport {
  double px_acc = 0;
  double cls_acc = 0;
  double m_iou = 0;
  std::vector<double> per_class_iou;       // NaN for classes absent from GT
  std::map<int, double> dice_per_group;    // eval-2 only
  double dice_median = std::numeric_limits<double>::quiet_NaN();
  int fold_id = -1;
  int group_id = -1;
  std::string protocol;
  std::string provenance;
};

inline ordered_json to_json(const MetricReport& r) {
  ordered_json j;
  j["protocol"] = r.protocol;
  j["provenance"] = r.provenance;
  if (r.fold_id >= 0) j["fold_id"] = r.fold_id;
  if (r.group_id >= 0) j["group_id"] = r.group_id;
  j["px_acc"] = r.px_acc;
  j["cls_acc"] = r.cls_acc;
  j["m_iou"] = r.m_iou;
  ordered_json iou = ordered_json::array();
  for (double v : r.per_class_iou)
    iou.push_back(std::isnan(v) ? ordered_json(nullptr) : ordered_json(v));
  j["per_class_iou"] = iou;
  if (!r.dice_per_group.empty()) {
    ordered_json d;
    for (const auto& [g, v] : r.dice_per_group) d[std::to_string(g)] = v;
    j["dice_per_group"] = d;
    j["dice_median"] = r.dice_median;
  }
  return j;
}

namespace detail {

inline DomainDataset subset(const DomainDataset& d, const std::vector<int>& indices) {
  DomainDataset out;
  out.domain_tag = d.domain_tag;
  for (int i : indices) {
    out.names.push_back(d.names[static_cast<std::size_t>(i)]);
    out.images.push_back(d.images[static_cast<std::size_t>(i)]);
    if (d.has_masks()) out.masks.push_back(d.masks[static_cast<std::size_t>(i)]);
    if (d.has_groups()) out.group_ids.push_back(d.group_ids[static_cast<std::size_t>(i)]);
  }
  return out;
}

inline int dataset_classes(const DomainDataset& d) {
  if (!d.has_masks()) throw std::invalid_argument("evaluation: dataset carries no masks");
  return d.masks[0].num_classes;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (!n) return std::numeric_limits<double>::quiet_NaN();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Scores every image of `data` with `seg`, accumulating one confusion matrix
// over all pixels.
template <typename T>
std::vector<std::int64_t> score_confusion(const Segmenter<T>& seg, const DomainDataset& data) {
  const int k = seg.spec.num_classes;
  std::vector<std::int64_t> cm(static_cast<std::size_t>(k) * k, 0);
  for (std::size_t i = 0; i < static_cast<std::size_t>(data.size()); ++i) {
    auto pred = predict(seg, data.images[i]);
    auto one = confusion_matrix(pred, data.masks[i], k);
    for (std::size_t c = 0; c < cm.size(); ++c) cm[c] += one[c];
  }
  return cm;
}

inline MetricReport report_from_confusion(const std::vector<std::int64_t>& cm, int k) {
  MetricReport r;
  r.px_acc = pixel_accuracy(cm, k);
  r.cls_acc = class_accuracy(cm, k);
  r.m_iou = mean_iou(cm, k);
  r.per_class_iou = per_class_iou(cm, k);
  return r;
}

}  // namespace detail

// ---- eval-1: real-trained segmenter scores translated images ----

struct Eval1Result {
  std::vector<MetricReport> folds;
  double px_acc_mean = 0, px_acc_std = 0;
  double cls_acc_mean = 0, cls_acc_std = 0;
  double m_iou_mean = 0, m_iou_std = 0;
};

// K-fold cross-validation over the real set: each fold trains a segmenter on
// the other folds' images and scores the full translated set. Aggregate is
// mean and sample standard deviation over folds.
template <typename T>
Eval1Result eval1(const DomainDataset& real, const DomainDataset& translated,
                  const SegmenterSpec& seg_spec, int folds, std::uint64_t seed,
                  const std::string& provenance = "") {
  seg_spec.validate();
  if (folds < 2) throw std::invalid_argument("eval1: need at least 2 folds");
  if (static_cast<int>(real.size()) < folds)
    throw std::invalid_argument("eval1: fewer real images than folds");
  if (detail::dataset_classes(real) != detail::dataset_classes(translated))
    throw std::invalid_argument("eval1: class vocabulary mismatch between datasets");
  if (detail::dataset_classes(real) != seg_spec.num_classes)
    throw std::invalid_argument("eval1: segmenter num_classes does not match the datasets");

  Rng root(seed, 0x6576616c31);
  std::vector<int> perm = root.permutation(static_cast<int>(real.size()));

  Eval1Result out;
  for (int f = 0; f < folds; ++f) {
    std::vector<int> train_idx;
    for (std::size_t i = 0; i < perm.size(); ++i)
      if (static_cast<int>(i) % folds != f) train_idx.push_back(perm[i]);
    auto seg = train_segmenter<T>(seg_spec, detail::subset(real, train_idx),
                                  root.fork(static_cast<std::uint64_t>(f)).next_u64());
    MetricReport r = detail::report_from_confusion(detail::score_confusion(seg, translated),
                                                   seg_spec.num_classes);
    r.fold_id = f;
    r.protocol = "eval1";
    r.provenance = provenance;
    out.folds.push_back(std::move(r));
  }

  auto mean_std = [&](auto pick, double& mean, double& sd) {
    double s = 0;
    for (const auto& r : out.folds) s += pick(r);
    mean = s / static_cast<double>(out.folds.size());
    double q = 0;
    for (const auto& r : out.folds) q += (pick(r) - mean) * (pick(r) - mean);
    sd = out.folds.size() > 1 ? std::sqrt(q / static_cast<double>(out.folds.size() - 1)) : 0.0;
  };
  mean_std([](const MetricReport& r) { return r.px_acc; }, out.px_acc_mean, out.px_acc_std);
  mean_std([](const MetricReport& r) { return r.cls_acc; }, out.cls_acc_mean, out.cls_acc_std);
  mean_std([](const MetricReport& r) { return r.m_iou; }, out.m_iou_mean, out.m_iou_std);
  return out;
}

inline ordered_json to_json(const Eval1Result& r) {
  ordered_json j;
  j["protocol"] = "eval1";
  j["std_over"] = "folds, ddof=1";
  ordered_json folds = ordered_json::array();
  for (const auto& f : r.folds) folds.push_back(to_json(f));
  j["folds"] = folds;
  j["aggregate"]["px_acc"] = {{"mean", r.px_acc_mean}, {"std", r.px_acc_std}};
  j["aggregate"]["cls_acc"] = {{"mean", r.cls_acc_mean}, {"std", r.cls_acc_std}};
  j["aggregate"]["m_iou"] = {{"mean", r.m_iou_mean}, {"std", r.m_iou_std}};
  return j;
}

// Aggregate rows, columns in the order pxAcc, clsAcc, mIOU
inline std::string eval1_csv(const Eval1Result& r) {
  std::string s = "label,pxAcc,clsAcc,mIOU\n";
  char buf[160];
  for (const auto& f : r.folds) {
    std::snprintf(buf, sizeof buf, "fold%d,%.12g,%.12g,%.12g\n", f.fold_id, f.px_acc, f.cls_acc,
                  f.m_iou);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.12g,%.12g,%.12g\n", r.px_acc_mean, r.cls_acc_mean,
                r.m_iou_mean);
  s += buf;
  std::snprintf(buf, sizeof buf, "std,%.12g,%.12g,%.12g\n", r.px_acc_std, r.cls_acc_std,
                r.m_iou_std);
  s += buf;
  return s;
}

// ---- eval-2: translated images as training data, leave-one-group-out ----

struct Eval2Result {
  MetricReport baseline;         // trained on real groups only
  MetricReport translated_only;  // trained on translated images only
  MetricReport fine_tuned;       // translated pretraining + real fine-tune
};

template <typename T>
Eval2Result eval2(const DomainDataset& translated, const DomainDataset& real,
                  const SegmenterSpec& seg_spec, std::uint64_t seed,
                  const std::string& provenance = "") {
  seg_spec.validate();
  if (!real.has_groups()) throw std::invalid_argument("eval2: real dataset carries no group ids");
  if (detail::dataset_classes(real) != detail::dataset_classes(translated))
    throw std::invalid_argument("eval2: class vocabulary mismatch between datasets");
  if (detail::dataset_classes(real) != seg_spec.num_classes)
    throw std::invalid_argument("eval2: segmenter num_classes does not match the datasets");
  std::set<int> group_set(real.group_ids.begin(), real.group_ids.end());
  if (group_set.size() < 2) throw std::invalid_argument("eval2: need at least 2 groups");

  Rng root(seed, 0x6576616c32);

  // the translated-only model sees no real data, so one model serves every
  // held-out group
  auto pretrained = train_segmenter<T>(seg_spec, translated, root.fork(0).next_u64());

  Eval2Result out;
  out.baseline.protocol = "eval2/baseline";
  out.translated_only.protocol = "eval2/translated_only";
  out.fine_tuned.protocol = "eval2/fine_tuned";
  out.baseline.provenance = out.translated_only.provenance = out.fine_tuned.provenance =
      provenance;

  const int k = seg_spec.num_classes;
  std::vector<std::int64_t> cm_base(static_cast<std::size_t>(k) * k, 0),
      cm_pre(cm_base), cm_ft(cm_base);

  for (int g : group_set) {
    std::vector<int> train_idx, test_idx;
    for (std::size_t i = 0; i < static_cast<std::size_t>(real.size()); ++i)
      (real.group_ids[i] == g ? test_idx : train_idx).push_back(static_cast<int>(i));
    DomainDataset train_set = detail::subset(real, train_idx);
    DomainDataset test_set = detail::subset(real, test_idx);

    const std::uint64_t tag = static_cast<std::uint64_t>(g);
    auto baseline = train_segmenter<T>(seg_spec, train_set, root.fork(2 * tag + 1).next_u64());
    auto fine_tuned = train_segmenter<T>(seg_spec, train_set, root.fork(2 * tag + 2).next_u64(),
                                         &pretrained);

    auto dice_over = [&](const Segmenter<T>& seg) {
      std::int64_t inter = 0, a = 0, b = 0;
      for (std::size_t i = 0; i < static_cast<std::size_t>(test_set.size()); ++i) {
        auto pred = predict(seg, test_set.images[i]);
        const auto& gt = test_set.masks[i];
        for (std::int64_t p = 0; p < gt.labels.size(); ++p) {
          const bool in_a = pred.labels.data[p] == seg_spec.foreground_class;
          const bool in_b = gt.labels.data[p] == seg_spec.foreground_class;
          a += in_a;
          b += in_b;
          inter += in_a && in_b;
        }
      }
      return a + b ? 2.0 * static_cast<double>(inter) / static_cast<double>(a + b) : 1.0;
    };
    auto accumulate = [&](const Segmenter<T>& seg, std::vector<std::int64_t>& cm) {
      auto one = detail::score_confusion(seg, test_set);
      for (std::size_t c = 0; c < cm.size(); ++c) cm[c] += one[c];
    };

    out.baseline.dice_per_group[g] = dice_over(baseline);
    out.translated_only.dice_per_group[g] = dice_over(pretrained);
    out.fine_tuned.dice_per_group[g] = dice_over(fine_tuned);
    accumulate(baseline, cm_base);
    accumulate(pretrained, cm_pre);
    accumulate(fine_tuned, cm_ft);
  }

  auto finish = [&](MetricReport& r, const std::vector<std::int64_t>& cm) {
    MetricReport scores = detail::report_from_confusion(cm, k);
    r.px_acc = scores.px_acc;
    r.cls_acc = scores.cls_acc;
    r.m_iou = scores.m_iou;
    r.per_class_iou = scores.per_class_iou;
    std::vector<double> d;
    for (const auto& [gid, v] : r.dice_per_group) d.push_back(v);
    r.dice_median = detail::median(std::move(d));
  };
  finish(out.baseline, cm_base);
  finish(out.translated_only, cm_pre);
  finish(out.fine_tuned, cm_ft);
  return out;
}

inline ordered_json to_json(const Eval2Result& r) {
  ordered_json j;
  j["protocol"] = "eval2";
  j["baseline"] = to_json(r.baseline);
  j["translated_only"] = to_json(r.translated_only);
  j["fine_tuned"] = to_json(r.fine_tuned);
  return j;
}

inline std::string eval2_csv(const Eval2Result& r) {
  std::string s = "group,baseline_dice,translated_only_dice,fine_tuned_dice\n";
  char buf[160];
  for (const auto& [g, v] : r.baseline.dice_per_group) {
    std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,%.12g\n", g, v, r.translated_only.dice_per_group.at(g),
                  r.fine_tuned.dice_per_group.at(g));
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "median,%.12g,%.12g,%.12g\n", r.baseline.dice_median,
                r.translated_only.dice_median, r.fine_tuned.dice_median);
  s += buf;
  return s;
}

// ---- lambda_ss sensitivity sweep ----

struct SweepRow {
  double lambda_ss = 0;
  double px_acc = 0, cls_acc = 0, m_iou = 0;  // eval-1 aggregate means
};

inline const std::vector<double>& default_sweep_lambdas() {
  static const std::vector<double> v{1, 2, 3, 5, 10};
  return v;
}

// Trains one bundle per lambda_ss value and runs eval-1 on its translations.
template <typename T>
std::vector<SweepRow> sensitivity_sweep(
    const DomainDataset& x_domain, const DomainDataset& y_domain, const GeneratorSpec& gen_spec,
    const DiscriminatorSpec& disc_spec, const ProjectionHeadSpec& head_spec,
    const TrainConfig& base, const SegmenterSpec& seg_spec, const std::vector<double>& lambdas,
    int folds, std::uint64_t eval_seed,
    const std::function<void(double, const StepRecord&)>& on_step = nullptr) {
  if (lambdas.empty()) throw std::invalid_argument("sweep: empty lambda list");
  std::vector<SweepRow> rows;
  for (double lam : lambdas) {
    TrainConfig cfg = base;
    cfg.loss.lambda_ss = lam;
    auto bundle = init_bundle<T>(gen_spec, disc_spec, head_spec, cfg);
    train(bundle, x_domain, y_domain,
          on_step ? StepSink<T>([&](const StepRecord& rec) { on_step(lam, rec); })
                  : StepSink<T>(nullptr));
    DomainDataset translated = translate(bundle, x_domain);
    Eval1Result r = eval1<T>(y_domain, translated, seg_spec, folds, eval_seed,
                             "sweep lambda_ss=" + std::to_string(lam));
    rows.push_back(SweepRow{lam, r.px_acc_mean, r.cls_acc_mean, r.m_iou_mean});
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string s = "lambda_ss,pxAcc,clsAcc,mIOU\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.12g,%.12g,%.12g,%.12g\n", r.lambda_ss, r.px_acc, r.cls_acc,
                  r.m_iou);
    s += buf;
  }
  return s;
}

}  // namespace constructs
