#include "smvit/types.hpp"

#include <cstdio>

#include "smvit/error.hpp"

namespace smvit {

bool is_view_angle(int degrees) { return degrees >= 0 && degrees <= 180 && degrees % 18 == 0; }

int check_view_angle(int degrees) {
  if (!is_view_angle(degrees))
    fail(ErrorKind::Config, "view angle " + std::to_string(degrees) + " is not a multiple of 18 in [0,180]");
  return degrees;
}

std::string view_dir_name(int degrees) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%03d", check_view_angle(degrees));
  return buf;
}

std::string_view condition_name(Condition c) {
  switch (c) {
    case Condition::NM:
      return "nm";
    case Condition::BG:
      return "bg";
    case Condition::CL:
      return "cl";
  }
  return "?";
}

bool parse_condition(std::string_view text, Condition& out) {
  if (text.size() != 2) return false;
  const char a = static_cast<char>(text[0] | 0x20), b = static_cast<char>(text[1] | 0x20);
  if (a == 'n' && b == 'm') out = Condition::NM;
  else if (a == 'b' && b == 'g') out = Condition::BG;
  else if (a == 'c' && b == 'l') out = Condition::CL;
  else return false;
  return true;
}

}  // namespace smvit
