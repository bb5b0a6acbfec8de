#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace neurofuse {

/// Diagnostic classes, in the fixed order used for scores and confusion matrices.
enum class Label : std::uint8_t { NC = 0, MCI = 1, AD = 2 };
inline constexpr int kNumClasses = 3;
inline constexpr std::array<Label, 3> kAllLabels{Label::NC, Label::MCI, Label::AD};

enum class Modality : std::uint8_t { T1w, FA, MD, Black };

std::string_view to_string(Label label) noexcept;
std::string_view to_string(Modality modality) noexcept;
std::optional<Label> parse_label(std::string_view text) noexcept;
std::optional<Modality> parse_modality(std::string_view text) noexcept;

inline int class_index(Label label) noexcept { return static_cast<int>(label); }
inline Label label_from_index(int index) { return static_cast<Label>(index); }

}  // namespace neurofuse
