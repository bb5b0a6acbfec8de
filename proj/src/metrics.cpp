#include "neurofuse/metrics.hpp"

#include <fmt/format.h>

#include "neurofuse/error.hpp"

namespace neurofuse {

std::uint64_t ConfusionMatrix::total() const noexcept {
  std::uint64_t t = 0;
  for (const auto& row : counts)
    for (auto v : row) t += v;
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(int c) const noexcept {
  std::uint64_t t = 0;
  for (auto v : counts[c]) t += v;
  return t;
}

std::uint64_t ConfusionMatrix::column_sum(int c) const noexcept {
  std::uint64_t t = 0;
  for (const auto& row : counts) t += row[c];
  return t;
}

ConfusionMatrix accumulate(std::span<const std::pair<Label, Label>> pairs) {
  ConfusionMatrix cm;
  for (const auto& [t, p] : pairs) ++cm.counts[class_index(t)][class_index(p)];
  return cm;
}

ConfusionMatrix accumulate(std::span<const Label> truth, std::span<const Label> predicted) {
  if (truth.size() != predicted.size()) throw Error(ErrorCode::CountMismatch, "label lists differ in length");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) ++cm.counts[class_index(truth[i])][class_index(predicted[i])];
  return cm;
}

OneVsRest one_vs_rest(const ConfusionMatrix& cm, Label c) noexcept {
  const int k = class_index(c);
  OneVsRest r;
  r.tp = cm.counts[k][k];
  r.fp = cm.column_sum(k) - r.tp;
  r.fn = cm.row_sum(k) - r.tp;
  r.tn = cm.total() - r.tp - r.fp - r.fn;
  return r;
}

std::string_view to_string(Condition c) noexcept {
  switch (c) {
    case Condition::T1w: return "T1w";
    case Condition::FA: return "FA";
    case Condition::MD: return "MD";
    case Condition::T1wDti: return "T1w+DTI";
  }
  return "?";
}

std::optional<Condition> parse_condition(std::string_view text) noexcept {
  for (Condition c : kAllConditions) {
    if (text == to_string(c)) return c;
  }
  return std::nullopt;
}

namespace {

Metric ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return {};
  return {static_cast<double>(num) / static_cast<double>(den), true};
}

}  // namespace

MetricsReport compute_report(const ConfusionMatrix& cm, int fold_id, Condition condition) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw Error(ErrorCode::EmptyMatrix, "confusion matrix is empty");
  MetricsReport r;
  r.fold_id = fold_id;
  r.condition = condition;
  std::uint64_t trace = 0;
  for (int c = 0; c < kNumClasses; ++c) trace += cm.counts[c][c];
  r.accuracy = static_cast<double>(trace) / static_cast<double>(total);
  for (Label label : kAllLabels) {
    const OneVsRest o = one_vs_rest(cm, label);
    ClassMetrics& m = r.classes[class_index(label)];
    m.precision = ratio(o.tp, o.tp + o.fp);
    m.recall = ratio(o.tp, o.tp + o.fn);
    if (m.precision.defined && m.recall.defined) {
      const double s = m.precision.value + m.recall.value;
      if (s > 0) m.f1 = {2.0 * m.precision.value * m.recall.value / s, true};
    }
  }
  return r;
}

MetricsReport average_reports(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw Error(ErrorCode::EmptyMatrix, "no reports to average");
  MetricsReport avg;
  avg.condition = reports.front().condition;
  for (auto& c : avg.classes) c.precision.defined = c.recall.defined = c.f1.defined = true;
  const double n = static_cast<double>(reports.size());
  for (const auto& r : reports) {
    avg.accuracy += r.accuracy / n;
    for (int c = 0; c < kNumClasses; ++c) {
      auto add = [n](Metric& into, const Metric& m) {
        into.value += m.value / n;
        into.defined = into.defined && m.defined;
      };
      add(avg.classes[c].precision, r.classes[c].precision);
      add(avg.classes[c].recall, r.classes[c].recall);
      add(avg.classes[c].f1, r.classes[c].f1);
    }
  }
  return avg;
}

namespace {

nlohmann::json metric_json(const Metric& m) { return {{"value", m.value}, {"defined", m.defined}}; }

}  // namespace

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json classes = nlohmann::json::object();
  for (Label label : kAllLabels) {
    const auto& m = report.classes[class_index(label)];
    classes[std::string(to_string(label))] = {
        {"precision", metric_json(m.precision)}, {"recall", metric_json(m.recall)}, {"f1", metric_json(m.f1)}};
  }
  nlohmann::json j{{"condition", std::string(to_string(report.condition))},
                   {"accuracy", report.accuracy},
                   {"classes", classes}};
  if (report.fold_id >= 0) {
    j["fold"] = report.fold_id;
  } else {
    j["fold"] = nullptr;
  }
  return j;
}

nlohmann::json to_json(const ConfusionMatrix& cm) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : cm.counts) rows.push_back(row);
  return rows;
}

std::string format_table(std::span<const MetricsReport> reports) {
  constexpr int kLabelWidth = 16;
  constexpr int kColumnWidth = 10;
  std::string out = fmt::format("{:<{}}", "", kLabelWidth);
  for (const auto& r : reports) out += fmt::format("{:>{}}", to_string(r.condition), kColumnWidth);
  out += '\n';
  auto cell = [](const Metric& m) { return fmt::format("{:.3f}{}", m.value, m.defined ? " " : "*"); };

  out += fmt::format("{:<{}}", "Accuracy", kLabelWidth);
  for (const auto& r : reports) out += fmt::format("{:>{}}", fmt::format("{:.3f} ", r.accuracy), kColumnWidth);
  out += '\n';
  for (Label label : kAllLabels) {
    const int c = class_index(label);
    const std::array<std::pair<const char*, Metric ClassMetrics::*>, 3> rows{
        {{"Precision", &ClassMetrics::precision}, {"Recall", &ClassMetrics::recall}, {"F1", &ClassMetrics::f1}}};
    for (const auto& [name, member] : rows) {
      out += fmt::format("{:<{}}", fmt::format("{} {}", name, to_string(label)), kLabelWidth);
      for (const auto& r : reports) out += fmt::format("{:>{}}", cell(r.classes[c].*member), kColumnWidth);
      out += '\n';
    }
  }
  return out;
}

}  // namespace neurofuse
