#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hknas {

/// K x K counts; rows are reference classes, columns predicted classes (0-based).
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw std::invalid_argument("confusion matrix needs at least one class");
  }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.size()) throw std::invalid_argument("confusion matrix must be square");
      for (std::size_t j = 0; j < rows.size(); ++j) cm.counts_[i * cm.k_ + j] = rows[i][j];
    }
    return cm;
  }

  void add(std::size_t reference, std::size_t predicted) {
    if (reference >= k_ || predicted >= k_) throw std::out_of_range("class index outside confusion matrix");
    ++counts_[reference * k_ + predicted];
  }

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t r, std::size_t c) const { return counts_.at(r * k_ + c); }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
  }
  std::uint64_t row_sum(std::size_t r) const {
    std::uint64_t t = 0;
    for (std::size_t c = 0; c < k_; ++c) t += at(r, c);
    return t;
  }
  std::uint64_t col_sum(std::size_t c) const {
    std::uint64_t t = 0;
    for (std::size_t r = 0; r < k_; ++r) t += at(r, c);
    return t;
  }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < k_; ++i) t += at(i, i);
    return t;
  }

  /// Recall of class r, or -1 when the class has no reference samples.
  double recall(std::size_t r) const {
    const auto n = row_sum(r);
    return n ? static_cast<double>(at(r, r)) / static_cast<double>(n) : -1.0;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

inline double oa(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (!n) throw std::invalid_argument("overall accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(n);
}

/// Mean recall over classes that have reference samples; empty rows are skipped with a warning.
inline double aa(const ConfusionMatrix& cm) {
  if (!cm.total()) throw std::invalid_argument("average accuracy of an empty confusion matrix");
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t r = 0; r < cm.classes(); ++r) {
    const double rc = cm.recall(r);
    if (rc < 0) {
      std::cerr << "warning: class " << r + 1 << " has no reference samples; excluded from AA\n";
      continue;
    }
    acc += rc;
    ++used;
  }
  return acc / static_cast<double>(used);
}

inline double kappa(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (!n) throw std::invalid_argument("kappa of an empty confusion matrix");
  const double total = static_cast<double>(n);
  const double po = static_cast<double>(cm.trace()) / total;
  double pe = 0.0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    pe += static_cast<double>(cm.row_sum(k)) * static_cast<double>(cm.col_sum(k));
  }
  pe /= total * total;
  if (pe >= 1.0) {
    if (po >= 1.0) return 1.0;
    throw std::domain_error("kappa undefined: chance agreement is 1 but observed agreement is below 1");
  }
  return (po - pe) / (1.0 - pe);
}

struct Metrics {
  ConfusionMatrix cm;
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
};

inline Metrics summarize(ConfusionMatrix cm) {
  Metrics m{std::move(cm)};
  m.oa = hknas::oa(m.cm);
  m.aa = hknas::aa(m.cm);
  m.kappa = hknas::kappa(m.cm);
  return m;
}

/// Scores `predict` over (reference, sample) pairs; `predict` returns 0-based classes.
template <class Sample>
Metrics evaluate(const std::vector<std::pair<std::size_t, Sample>>& labelled, std::size_t classes,
                 const std::function<std::vector<std::size_t>(const std::vector<Sample>&)>& predict) {
  if (labelled.empty()) throw std::invalid_argument("evaluation needs a non-empty test set");
  std::vector<Sample> samples;
  samples.reserve(labelled.size());
  for (const auto& [ref, s] : labelled) samples.push_back(s);
  const auto pred = predict(samples);
  if (pred.size() != samples.size()) throw std::logic_error("predictor returned the wrong number of classes");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < pred.size(); ++i) cm.add(labelled[i].first, pred[i]);
  return summarize(std::move(cm));
}

/// "OA\tAA\tKappa" header and values, then one "class\trecall" line per class.
inline std::string format_report(const Metrics& m) {
  std::ostringstream os;
  os.precision(17);
  os << "OA\tAA\tKappa\n" << m.oa << '\t' << m.aa << '\t' << m.kappa << '\n';
  os << "class\trecall\n";
  for (std::size_t r = 0; r < m.cm.classes(); ++r) {
    os << r + 1 << '\t';
    const double rc = m.cm.recall(r);
    if (rc < 0) os << "nan";
    else os << rc;
    os << '\n';
  }
  return os.str();
}

}  // namespace hknas
