#pragma once

#include <cstddef>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdsc/error.hpp"

namespace sgdsc {

/// Counts of (true class, predicted class) pairs over classes 1..C.
/// Rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw ConfigError("confusion matrix needs at least one class");
  }

  std::size_t classes() const { return classes_; }

  void accumulate(int true_label, int predicted_label) {
    check_label(true_label, "true");
    check_label(predicted_label, "predicted");
    ++counts_[index(true_label, predicted_label)];
  }

  /// Count for 1-based (true, predicted).
  std::uint64_t at(int true_label, int predicted_label) const {
    check_label(true_label, "true");
    check_label(predicted_label, "predicted");
    return counts_[index(true_label, predicted_label)];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t row_total(int true_label) const {
    std::uint64_t t = 0;
    for (std::size_t j = 1; j <= classes_; ++j) t += at(true_label, static_cast<int>(j));
    return t;
  }

  std::uint64_t col_total(int predicted_label) const {
    std::uint64_t t = 0;
    for (std::size_t i = 1; i <= classes_; ++i) t += at(static_cast<int>(i), predicted_label);
    return t;
  }

  ConfusionMatrix& merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) {
      throw ConfigError("cannot merge confusion matrices over " + std::to_string(classes_) + " and " +
                        std::to_string(other.classes_) + " classes");
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  /// Row-major C x C counts, 0-based.
  std::vector<std::vector<std::uint64_t>> rows() const {
    std::vector<std::vector<std::uint64_t>> out(classes_, std::vector<std::uint64_t>(classes_));
    for (std::size_t i = 0; i < classes_; ++i)
      for (std::size_t j = 0; j < classes_; ++j) out[i][j] = counts_[i * classes_ + j];
    return out;
  }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.size()) throw ConfigError("confusion rows must form a square matrix");
      for (std::size_t j = 0; j < rows.size(); ++j) cm.counts_[i * rows.size() + j] = rows[i][j];
    }
    return cm;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  void check_label(int label, const char* which) const {
    if (label < 1 || static_cast<std::size_t>(label) > classes_) {
      throw DataError(std::string(which) + " label " + std::to_string(label) + " outside 1.." +
                      std::to_string(classes_));
    }
  }
  std::size_t index(int t, int p) const {
    return static_cast<std::size_t>(t - 1) * classes_ + static_cast<std::size_t>(p - 1);
  }

  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

namespace detail {
inline void require_samples(const ConfusionMatrix& cm, const char* what) {
  if (cm.total() == 0) throw DataError(std::string(what) + ": confusion matrix is empty");
}
}  // namespace detail

inline double overall_accuracy(const ConfusionMatrix& cm) {
  detail::require_samples(cm, "overall accuracy");
  std::uint64_t diag = 0;
  for (std::size_t c = 1; c <= cm.classes(); ++c) diag += cm.at(static_cast<int>(c), static_cast<int>(c));
  return static_cast<double>(diag) / static_cast<double>(cm.total());
}

/// Recall per class; classes with no true samples report -1.
inline std::vector<double> per_class_accuracy(const ConfusionMatrix& cm) {
  std::vector<double> out;
  for (std::size_t c = 1; c <= cm.classes(); ++c) {
    const auto row = cm.row_total(static_cast<int>(c));
    out.push_back(row == 0 ? -1.0
                           : static_cast<double>(cm.at(static_cast<int>(c), static_cast<int>(c))) /
                                 static_cast<double>(row));
  }
  return out;
}

/// Mean per-class recall over classes that have at least one true sample.
inline double average_accuracy(const ConfusionMatrix& cm) {
  detail::require_samples(cm, "average accuracy");
  double acc = 0.0;
  std::size_t used = 0;
  for (double r : per_class_accuracy(cm)) {
    if (r < 0.0) continue;
    acc += r;
    ++used;
  }
  if (used < cm.classes()) {
    std::cerr << "warning: average accuracy excludes " << (cm.classes() - used)
              << " class(es) with no true samples\n";
  }
  return acc / static_cast<double>(used);
}

/// Cohen's kappa. When chance agreement is 1 the ratio is 0/0; the limit
/// convention returns 1 for perfect agreement and 0 otherwise.
inline double kappa(const ConfusionMatrix& cm) {
  detail::require_samples(cm, "kappa");
  const double n = static_cast<double>(cm.total());
  const double po = overall_accuracy(cm);
  double pe = 0.0;
  for (std::size_t c = 1; c <= cm.classes(); ++c) {
    pe += static_cast<double>(cm.row_total(static_cast<int>(c))) *
          static_cast<double>(cm.col_total(static_cast<int>(c)));
  }
  pe /= n * n;
  if (pe >= 1.0) {
    std::cerr << "warning: kappa undefined (chance agreement is 1); using limit convention\n";
    return po == 1.0 ? 1.0 : 0.0;
  }
  return (po - pe) / (1.0 - pe);
}

struct MetricsReport {
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  std::vector<double> per_class;
  std::vector<std::vector<std::uint64_t>> confusion;
};

inline MetricsReport make_report(const ConfusionMatrix& cm) {
  return MetricsReport{overall_accuracy(cm), average_accuracy(cm), kappa(cm), per_class_accuracy(cm), cm.rows()};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (double v : r.per_class) per_class.push_back(v < 0.0 ? nlohmann::json(nullptr) : nlohmann::json(v));
  return {{"oa", r.oa}, {"aa", r.aa}, {"kappa", r.kappa}, {"per_class", per_class}, {"confusion", r.confusion}};
}

}  // namespace sgdsc
