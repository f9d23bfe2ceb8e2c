#include "klctrl/cli/expression.hpp"

#include <cctype>
#include <charconv>
#include <cmath>

#include "klctrl/error.hpp"

namespace klctrl::cli {

struct Expression::Node {
  enum class Op { Number, Mean, Var, Neg, Add, Sub, Mul, Div, Pow } op;
  double value = 0.0;
  std::shared_ptr<const Node> lhs, rhs;
};

namespace {

using Node = Expression::Node;
using NodePtr = std::shared_ptr<const Node>;

NodePtr make(Node::Op op, NodePtr lhs = nullptr, NodePtr rhs = nullptr, double value = 0.0) {
  return std::make_shared<const Node>(Node{op, value, std::move(lhs), std::move(rhs)});
}

class Parser {
 public:
  explicit Parser(std::string_view s) : s_(s) {}

  NodePtr parse() {
    auto n = expr();
    skip();
    if (pos_ != s_.size()) fail("unexpected '" + std::string(1, s_[pos_]) + "'");
    return n;
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorCode::BadConfig,
                "target expression '" + std::string(s_) + "': " + what + " at column " + std::to_string(pos_ + 1));
  }

  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  NodePtr expr() {
    auto n = term();
    for (;;) {
      if (accept('+')) n = make(Node::Op::Add, n, term());
      else if (accept('-')) n = make(Node::Op::Sub, n, term());
      else return n;
    }
  }

  NodePtr term() {
    auto n = unary();
    for (;;) {
      if (accept('*')) n = make(Node::Op::Mul, n, unary());
      else if (accept('/')) n = make(Node::Op::Div, n, unary());
      else return n;
    }
  }

  NodePtr unary() {
    if (accept('-')) return make(Node::Op::Neg, unary());
    if (accept('+')) return unary();
    return power();
  }

  NodePtr power() {
    auto base = primary();
    if (accept('^')) return make(Node::Op::Pow, base, unary());
    return base;
  }

  NodePtr primary() {
    skip();
    if (pos_ >= s_.size()) fail("unexpected end");
    if (accept('(')) {
      auto n = expr();
      if (!accept(')')) fail("expected ')'");
      return n;
    }
    const char c = s_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      double v = 0.0;
      const auto [end, ec] = std::from_chars(s_.data() + pos_, s_.data() + s_.size(), v);
      if (ec != std::errc()) fail("bad number");
      pos_ = static_cast<std::size_t>(end - s_.data());
      return make(Node::Op::Number, nullptr, nullptr, v);
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      const std::size_t start = pos_;
      while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_')) ++pos_;
      const auto name = s_.substr(start, pos_ - start);
      if (name == "mean_of_g") return make(Node::Op::Mean);
      if (name == "var_of_g") return make(Node::Op::Var);
      pos_ = start;
      fail("unknown symbol '" + std::string(name) + "'");
    }
    fail("unexpected '" + std::string(1, c) + "'");
  }
};

double eval(const Node& n, double mean, double var) {
  switch (n.op) {
    case Node::Op::Number: return n.value;
    case Node::Op::Mean: return mean;
    case Node::Op::Var: return var;
    case Node::Op::Neg: return -eval(*n.lhs, mean, var);
    case Node::Op::Add: return eval(*n.lhs, mean, var) + eval(*n.rhs, mean, var);
    case Node::Op::Sub: return eval(*n.lhs, mean, var) - eval(*n.rhs, mean, var);
    case Node::Op::Mul: return eval(*n.lhs, mean, var) * eval(*n.rhs, mean, var);
    case Node::Op::Div: return eval(*n.lhs, mean, var) / eval(*n.rhs, mean, var);
    case Node::Op::Pow: {
      const double b = eval(*n.lhs, mean, var);
      const double e = eval(*n.rhs, mean, var);
      // Exact squaring keeps targets such as mean^2 bit-identical to mean*mean.
      if (e == 2.0) return b * b;
      return std::pow(b, e);
    }
  }
  return 0.0;
}

bool constant_node(const Node& n) {
  if (n.op == Node::Op::Mean || n.op == Node::Op::Var) return false;
  return (!n.lhs || constant_node(*n.lhs)) && (!n.rhs || constant_node(*n.rhs));
}

}  // namespace

Expression Expression::parse(std::string_view text) {
  Expression e;
  e.root_ = Parser(text).parse();
  e.text_ = std::string(text);
  return e;
}

Expression Expression::constant(double value) {
  Expression e;
  e.root_ = make(Node::Op::Number, nullptr, nullptr, value);
  e.text_ = std::to_string(value);
  return e;
}

double Expression::evaluate(double mean_of_g, double var_of_g) const {
  const double v = eval(*root_, mean_of_g, var_of_g);
  if (!std::isfinite(v)) {
    throw Error(ErrorCode::BadConfig, "target expression '" + text_ + "' is not finite");
  }
  return v;
}

bool Expression::is_constant() const noexcept { return constant_node(*root_); }

}  // namespace klctrl::cli
