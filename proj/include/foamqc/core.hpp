#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace foamqc {

// Error taxonomy. The CLI maps ValidationError and its subclasses to exit
// code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, int line)
      : ValidationError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class ParameterError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

enum class ViewKind { top = 0, bottom = 1, profile_1 = 2, profile_2 = 3, profile_3 = 4 };

inline constexpr std::array<ViewKind, 5> kAllViews = {ViewKind::top, ViewKind::bottom, ViewKind::profile_1,
                                                      ViewKind::profile_2, ViewKind::profile_3};

inline constexpr bool is_plan_view(ViewKind v) { return v == ViewKind::top || v == ViewKind::bottom; }
inline constexpr bool is_profile_view(ViewKind v) { return !is_plan_view(v); }

std::string_view to_string(ViewKind v);
std::optional<ViewKind> parse_view(std::string_view s);

enum class RawLabel { normal = 0, normal_defective = 1, defective = 2 };
enum class BinaryLabel { normal = 0, defective = 1 };

std::string_view to_string(RawLabel l);
std::string_view to_string(BinaryLabel l);
std::optional<RawLabel> parse_raw_label(std::string_view s);

// "If there is a doubt, there is no doubt": the ambiguous middle class is
// learned as defective.
constexpr BinaryLabel collapse_label(RawLabel raw) {
  return raw == RawLabel::normal ? BinaryLabel::normal : BinaryLabel::defective;
}

}  // namespace foamqc
