#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace smvit {

/// The eleven camera angles, 18 degrees apart.
inline constexpr std::array<int, 11> kAllViews = {0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180};
inline constexpr int kDefaultStandardView = 90;

bool is_view_angle(int degrees);
/// ConfigError unless `degrees` is a multiple of 18 in [0, 180].
int check_view_angle(int degrees);
/// Three-digit directory form, e.g. 18 -> "018".
std::string view_dir_name(int degrees);

enum class Condition { NM, BG, CL };

std::string_view condition_name(Condition c);  // "nm", "bg", "cl"
/// Accepts either case; returns false when unknown.
bool parse_condition(std::string_view text, Condition& out);

/// Identity of one frame within the dataset.
struct SampleKey {
  std::string subject;
  Condition condition = Condition::NM;
  std::uint32_t sequence = 1;
  std::uint32_t frame = 0;
  /// When a feature row was converted, the view it came from; -1 otherwise.
  int original_view = -1;

  bool operator==(const SampleKey&) const = default;
};

}  // namespace smvit
