#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "neurofuse/types.hpp"

namespace neurofuse {

/// Rows are true labels, columns predicted labels, both in (NC, MCI, AD) order.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  std::uint64_t total() const noexcept;
  std::uint64_t row_sum(int c) const noexcept;
  std::uint64_t column_sum(int c) const noexcept;
  bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix accumulate(std::span<const std::pair<Label, Label>> pairs);
ConfusionMatrix accumulate(std::span<const Label> truth, std::span<const Label> predicted);

struct OneVsRest {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  bool operator==(const OneVsRest&) const = default;
};

OneVsRest one_vs_rest(const ConfusionMatrix& cm, Label c) noexcept;

/// A ratio that is reported as 0 with defined = false when it would be 0/0.
struct Metric {
  double value = 0.0;
  bool defined = false;
};

struct ClassMetrics {
  Metric precision;  // tp / (tp + fp)
  Metric recall;     // tp / (tp + fn)
  Metric f1;
};

enum class Condition { T1w, FA, MD, T1wDti };
std::string_view to_string(Condition c) noexcept;
std::optional<Condition> parse_condition(std::string_view text) noexcept;
inline constexpr std::array<Condition, 4> kAllConditions{Condition::T1w, Condition::FA, Condition::MD,
                                                         Condition::T1wDti};

struct MetricsReport {
  double accuracy = 0.0;
  std::array<ClassMetrics, kNumClasses> classes{};
  int fold_id = -1;  // -1 for fold averages
  Condition condition = Condition::T1wDti;
};

MetricsReport compute_report(const ConfusionMatrix& cm, int fold_id = -1, Condition condition = Condition::T1wDti);

/// Mean over folds. A class metric is defined in the average when it is
/// defined in every fold; undefined folds contribute 0.
MetricsReport average_reports(std::span<const MetricsReport> reports);

nlohmann::json to_json(const MetricsReport& report);
nlohmann::json to_json(const ConfusionMatrix& cm);

/// Text table with rows Accuracy and Precision/Recall/F1 per class, and one
/// column per report (in the given order). Undefined values carry a '*'.
std::string format_table(std::span<const MetricsReport> reports);

}  // namespace neurofuse
