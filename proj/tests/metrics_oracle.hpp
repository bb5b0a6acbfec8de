#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "neurofuse/metrics.hpp"

namespace test_support {

/// Per-sample brute force: expands the matrix into (truth, prediction)
/// pairs and counts outcomes one sample at a time.
struct BruteForce {
  double accuracy = 0.0;
  std::array<double, 3> precision{}, recall{}, f1{};
  std::array<bool, 3> precision_defined{}, recall_defined{}, f1_defined{};
};

inline BruteForce brute_force(const neurofuse::ConfusionMatrix& cm) {
  std::vector<std::pair<int, int>> samples;
  for (int t = 0; t < 3; ++t)
    for (int p = 0; p < 3; ++p)
      for (std::uint64_t k = 0; k < cm.counts[t][p]; ++k) samples.emplace_back(t, p);
  BruteForce out;
  int correct = 0;
  for (const auto& [t, p] : samples) correct += t == p;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  for (int c = 0; c < 3; ++c) {
    int tp = 0, predicted = 0, actual = 0;
    for (const auto& [t, p] : samples) {
      if (p == c) ++predicted;
      if (t == c) ++actual;
      if (t == c && p == c) ++tp;
    }
    out.precision_defined[c] = predicted > 0;
    out.recall_defined[c] = actual > 0;
    out.precision[c] = predicted > 0 ? static_cast<double>(tp) / predicted : 0.0;
    out.recall[c] = actual > 0 ? static_cast<double>(tp) / actual : 0.0;
    const double sum = out.precision[c] + out.recall[c];
    out.f1_defined[c] = out.precision_defined[c] && out.recall_defined[c] && sum > 0.0;
    out.f1[c] = out.f1_defined[c] ? 2.0 * out.precision[c] * out.recall[c] / sum : 0.0;
  }
  return out;
}

/// Random matrix with total >= 1; some rows or columns are emptied on purpose.
inline neurofuse::ConfusionMatrix random_matrix(std::mt19937_64& rng) {
  neurofuse::ConfusionMatrix cm;
  std::uniform_int_distribution<int> count(0, 40);
  for (auto& row : cm.counts)
    for (auto& v : row) v = static_cast<std::uint64_t>(count(rng));
  if (rng() % 4 == 0) {
    const int c = static_cast<int>(rng() % 3);
    for (int t = 0; t < 3; ++t) cm.counts[t][c] = 0;
  }
  if (rng() % 4 == 0) {
    const int c = static_cast<int>(rng() % 3);
    for (int p = 0; p < 3; ++p) cm.counts[c][p] = 0;
  }
  if (cm.total() == 0) cm.counts[0][0] = 1;
  return cm;
}

}  // namespace test_support
