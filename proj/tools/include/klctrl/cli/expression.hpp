#pragma once

#include <memory>
#include <string>
#include <string_view>

namespace klctrl::cli {

/// Arithmetic over the example-row moments `mean_of_g` and `var_of_g`:
/// numbers, + - * / ^, unary minus and parentheses. `^` binds tighter than
/// unary minus and is right associative.
class Expression {
 public:
  /// Throws BadConfig with the offending column on a syntax error.
  static Expression parse(std::string_view text);
  static Expression constant(double value);

  double evaluate(double mean_of_g, double var_of_g) const;
  /// True when the value does not depend on the example row.
  bool is_constant() const noexcept;
  const std::string& text() const noexcept { return text_; }

  struct Node;

 private:
  std::shared_ptr<const Node> root_;
  std::string text_;
};

}  // namespace klctrl::cli
