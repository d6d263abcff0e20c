#include "foamqc/core.hpp"

namespace foamqc {

std::string_view to_string(ViewKind v) {
  switch (v) {
    case ViewKind::top: return "top";
    case ViewKind::bottom: return "bottom";
    case ViewKind::profile_1: return "profile_1";
    case ViewKind::profile_2: return "profile_2";
    case ViewKind::profile_3: return "profile_3";
  }
  return "?";
}

std::optional<ViewKind> parse_view(std::string_view s) {
  for (auto v : kAllViews)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

std::string_view to_string(RawLabel l) {
  switch (l) {
    case RawLabel::normal: return "normal";
    case RawLabel::normal_defective: return "normal_defective";
    case RawLabel::defective: return "defective";
  }
  return "?";
}

std::string_view to_string(BinaryLabel l) { return l == BinaryLabel::normal ? "normal" : "defective"; }

std::optional<RawLabel> parse_raw_label(std::string_view s) {
  for (auto l : {RawLabel::normal, RawLabel::normal_defective, RawLabel::defective})
    if (to_string(l) == s) return l;
  return std::nullopt;
}

}  // namespace foamqc
