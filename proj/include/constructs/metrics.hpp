#pragma once

// Segmentation metrics over confusion matrices, plus the Frechet distance
// between feature populations. Classes absent from the ground truth are
// excluded from class-averaged scores.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "constructs/dataset.hpp"

namespace constructs {

// rows = ground truth class, cols = predicted class
inline std::vector<std::int64_t> confusion_matrix(const SegmentationMask& pred,
                                                  const SegmentationMask& gt,
                                                  int num_classes) {
  if (pred.labels.dims != gt.labels.dims)
    throw std::invalid_argument("metrics: prediction and ground truth shapes differ");
  std::vector<std::int64_t> cm(static_cast<std::size_t>(num_classes) * num_classes, 0);
  for (std::int64_t i = 0; i < gt.labels.size(); ++i) {
    const int g = gt.labels.data[i];
    const int p = pred.labels.data[i];
    if (g < 0 || g >= num_classes || p < 0 || p >= num_classes)
      throw std::invalid_argument("metrics: label outside [0, num_classes)");
    ++cm[static_cast<std::size_t>(g) * num_classes + p];
  }
  return cm;
}

inline double pixel_accuracy(const std::vector<std::int64_t>& cm, int num_classes) {
  std::int64_t diag = 0, total = 0;
  for (int g = 0; g < num_classes; ++g)
    for (int p = 0; p < num_classes; ++p) {
      total += cm[static_cast<std::size_t>(g) * num_classes + p];
      if (g == p) diag += cm[static_cast<std::size_t>(g) * num_classes + p];
    }
  return total ? static_cast<double>(diag) / static_cast<double>(total) : 1.0;
}

// mean per-class recall over classes present in the ground truth
inline double class_accuracy(const std::vector<std::int64_t>& cm, int num_classes) {
  double sum = 0;
  int present = 0;
  for (int g = 0; g < num_classes; ++g) {
    std::int64_t row = 0;
    for (int p = 0; p < num_classes; ++p) row += cm[static_cast<std::size_t>(g) * num_classes + p];
    if (!row) continue;
    sum += static_cast<double>(cm[static_cast<std::size_t>(g) * num_classes + g]) /
           static_cast<double>(row);
    ++present;
  }
  return present ? sum / present : 1.0;
}

// IoU per class; NaN marks classes absent from the ground truth
inline std::vector<double> per_class_iou(const std::vector<std::int64_t>& cm, int num_classes) {
  std::vector<double> out(static_cast<std::size_t>(num_classes),
                          std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < num_classes; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < num_classes; ++k) {
      row += cm[static_cast<std::size_t>(c) * num_classes + k];
      col += cm[static_cast<std::size_t>(k) * num_classes + c];
    }
    if (!row) continue;
    const std::int64_t inter = cm[static_cast<std::size_t>(c) * num_classes + c];
    out[static_cast<std::size_t>(c)] =
        static_cast<double>(inter) / static_cast<double>(row + col - inter);
  }
  return out;
}

inline double mean_iou(const std::vector<std::int64_t>& cm, int num_classes) {
  double sum = 0;
  int present = 0;
  for (double v : per_class_iou(cm, num_classes))
    if (!std::isnan(v)) {
      sum += v;
      ++present;
    }
  return present ? sum / present : 1.0;
}

inline double pixel_accuracy(const SegmentationMask& pred, const SegmentationMask& gt) {
  const int k = std::max(pred.num_classes, gt.num_classes);
  return pixel_accuracy(confusion_matrix(pred, gt, k), k);
}

inline double class_accuracy(const SegmentationMask& pred, const SegmentationMask& gt) {
  const int k = std::max(pred.num_classes, gt.num_classes);
  return class_accuracy(confusion_matrix(pred, gt, k), k);
}

inline double mean_iou(const SegmentationMask& pred, const SegmentationMask& gt) {
  const int k = std::max(pred.num_classes, gt.num_classes);
  return mean_iou(confusion_matrix(pred, gt, k), k);
}

// 2|A n B| / (|A| + |B|) for one class; 1 when both sets are empty
inline double dice(const SegmentationMask& pred, const SegmentationMask& gt, int cls) {
  if (pred.labels.dims != gt.labels.dims)
    throw std::invalid_argument("metrics: prediction and ground truth shapes differ");
  std::int64_t inter = 0, a = 0, b = 0;
  for (std::int64_t i = 0; i < gt.labels.size(); ++i) {
    const bool in_a = pred.labels.data[i] == cls;
    const bool in_b = gt.labels.data[i] == cls;
    a += in_a;
    b += in_b;
    inter += in_a && in_b;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

// ---- Frechet distance ----

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with the cross term
// computed through the symmetric form (Sa^(1/2) Sb Sa^(1/2))^(1/2).
// rows = samples, cols = feature dimensions.
inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("frechet_distance: feature dimensions differ");
  if (a.rows() < 2 || b.rows() < 2)
    throw std::invalid_argument("frechet_distance: need at least 2 samples per set");
  const Eigen::VectorXd mu_a = a.colwise().mean();
  const Eigen::VectorXd mu_b = b.colwise().mean();
  const Eigen::MatrixXd ca = (a.rowwise() - mu_a.transpose()).transpose() *
                             (a.rowwise() - mu_a.transpose()) /
                             static_cast<double>(a.rows() - 1);
  const Eigen::MatrixXd cb = (b.rowwise() - mu_b.transpose()).transpose() *
                             (b.rowwise() - mu_b.transpose()) /
                             static_cast<double>(b.rows() - 1);

  const double scale = std::max({1.0, ca.cwiseAbs().maxCoeff(), cb.cwiseAbs().maxCoeff()});
  const double tol = 1e-9 * scale;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(0.5 * (ca + ca.transpose()));
  if (es_a.eigenvalues().minCoeff() < -tol)
    throw std::runtime_error("frechet_distance: covariance of first set is not PSD");
  Eigen::MatrixXd sqrt_ca = es_a.eigenvectors() *
                            es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                            es_a.eigenvectors().transpose();

  Eigen::MatrixXd m = sqrt_ca * (0.5 * (cb + cb.transpose())) * sqrt_ca;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(0.5 * (m + m.transpose()));
  if (es_m.eigenvalues().minCoeff() < -tol * scale)
    throw std::runtime_error("frechet_distance: cross covariance is not PSD");
  const double tr_cross = es_m.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  return (mu_a - mu_b).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_cross;
}

inline double frechet_distance(const std::vector<std::vector<double>>& a,
                               const std::vector<std::vector<double>>& b) {
  auto pack = [](const std::vector<std::vector<double>>& v) {
    if (v.empty()) throw std::invalid_argument("frechet_distance: empty sample set");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()),
                      static_cast<Eigen::Index>(v[0].size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i].size() != v[0].size())
        throw std::invalid_argument("frechet_distance: ragged sample set");
      for (std::size_t j = 0; j < v[i].size(); ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[i][j];
    }
    return m;
  };
  return frechet_distance(pack(a), pack(b));
}

}  // namespace constructs
