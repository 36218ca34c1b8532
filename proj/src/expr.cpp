#include "ecoate/expr.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <system_error>

#include "ecoate/error.hpp"

namespace ecoate::expr {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::shared_ptr<const Expr> share(Expr e) { return std::make_shared<const Expr>(std::move(e)); }

class Parser {
 public:
  Parser(std::string_view text, int dim) : text_(text), dim_(dim) {}

  Expr run() {
    Expr e = parse_expr();
    skip_space();
    if (pos_ != text_.size()) fail("unexpected character '" + std::string(1, text_[pos_]) + "'");
    return e;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const { throw SyntaxError(what, pos_); }

  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_space();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) fail(std::string("expected '") + c + "'");
  }

  Expr parse_expr() {
    Expr lhs = parse_term();
    for (;;) {
      if (accept('+')) {
        lhs = Expr::add(std::move(lhs), parse_term());
      } else if (accept('-')) {
        lhs = Expr::add(std::move(lhs), Expr::negate(parse_term()));
      } else {
        return lhs;
      }
    }
  }

  Expr parse_term() {
    Expr lhs = parse_signed();
    while (accept('*')) lhs = Expr::multiply(std::move(lhs), parse_signed());
    return lhs;
  }

  Expr parse_signed() {
    if (accept('-')) return Expr::negate(parse_signed());
    return parse_power();
  }

  Expr parse_power() {
    Expr base = parse_primary();
    while (accept('^')) {
      bool negative = accept('-');
      skip_space();
      double v = parse_number();
      base = Expr::power(std::move(base), negative ? -v : v);
    }
    return base;
  }

  double parse_number() {
    std::size_t start = pos_;
    auto digits = [&] {
      std::size_t s = pos_;
      while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      return pos_ - s;
    };
    std::size_t whole = digits();
    std::size_t frac = 0;
    if (pos_ < text_.size() && text_[pos_] == '.') {
      ++pos_;
      frac = digits();
    }
    if (whole + frac == 0) {
      pos_ = start;
      fail("expected number");
    }
    if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
      std::size_t mark = pos_++;
      if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '-')) ++pos_;
      if (digits() == 0) {
        pos_ = mark;
        fail("malformed exponent");
      }
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, v);
    if (ec != std::errc() || ptr != text_.data() + pos_ || !std::isfinite(v)) {
      pos_ = start;
      fail("number out of range");
    }
    return v;
  }

  Expr parse_primary() {
    skip_space();
    if (pos_ >= text_.size()) fail("unexpected end of input");
    char c = text_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return Expr::constant(parse_number());
    if (c == '(') {
      ++pos_;
      Expr inner = parse_expr();
      expect(')');
      return inner;
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      std::size_t start = pos_;
      while (pos_ < text_.size() && std::isalnum(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      std::string_view ident = text_.substr(start, pos_ - start);
      if (ident == "log" || ident == "exp") {
        expect('(');
        Expr arg = parse_expr();
        expect(')');
        return ident == "log" ? Expr::log(std::move(arg)) : Expr::exp(std::move(arg));
      }
      if (ident == "a") return Expr::treatment();
      if (ident == "y") return Expr::outcome();
      if (ident.size() > 1 && ident[0] == 'x' &&
          std::all_of(ident.begin() + 1, ident.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); }) &&
          ident[1] != '0') {
        int j = 0;
        auto [ptr, ec] = std::from_chars(ident.data() + 1, ident.data() + ident.size(), j);
        if (ec == std::errc() && j >= 1 && j <= dim_) return Expr::covariate(j - 1);
      }
      throw UnknownVariable("unknown variable '" + std::string(ident) + "' for covariate dimension " +
                            std::to_string(dim_));
    }
    fail(std::string("unexpected character '") + c + "'");
  }

  std::string_view text_;
  int dim_;
  std::size_t pos_ = 0;
};

int precedence(const Expr& e) {
  return std::visit(Overloaded{
                        [](const Binary& b) { return b.op == BinaryOp::kAdd ? 1 : 2; },
                        [](const Unary& u) { return u.op == UnaryOp::kNegate ? 3 : 5; },
                        [](const Power&) { return 4; },
                        [](const auto&) { return 5; },
                    },
                    e.node());
}

void emit(const Expr& e, int min_prec, std::string& out);

void emit_raw(const Expr& e, std::string& out) {
  std::visit(Overloaded{
                 [&](const Constant& c) { out += format_number(c.value); },
                 [&](const Variable& v) {
                   if (v.kind == VarKind::kTreatment) {
                     out += 'a';
                   } else if (v.kind == VarKind::kOutcome) {
                     out += 'y';
                   } else {
                     out += 'x';
                     out += std::to_string(v.index + 1);
                   }
                 },
                 [&](const Unary& u) {
                   if (u.op == UnaryOp::kNegate) {
                     out += '-';
                     emit(*u.arg, 3, out);
                   } else {
                     out += u.op == UnaryOp::kLog ? "log(" : "exp(";
                     emit(*u.arg, 0, out);
                     out += ')';
                   }
                 },
                 [&](const Binary& b) {
                   if (b.op == BinaryOp::kMultiply) {
                     emit(*b.lhs, 2, out);
                     out += '*';
                     emit(*b.rhs, 3, out);
                     return;
                   }
                   emit(*b.lhs, 1, out);
                   const auto* neg = std::get_if<Unary>(&b.rhs->node());
                   if (neg && neg->op == UnaryOp::kNegate) {
                     out += " - ";
                     emit(*neg->arg, 2, out);
                   } else {
                     out += " + ";
                     emit(*b.rhs, 2, out);
                   }
                 },
                 [&](const Power& p) {
                   emit(*p.base, 5, out);
                   out += '^';
                   if (std::signbit(p.exponent)) {
                     out += '-';
                     out += format_number(-p.exponent);
                   } else {
                     out += format_number(p.exponent);
                   }
                 },
             },
             e.node());
}

void emit(const Expr& e, int min_prec, std::string& out) {
  if (precedence(e) < min_prec) {
    out += '(';
    emit_raw(e, out);
    out += ')';
  } else {
    emit_raw(e, out);
  }
}

double eval_node(const Expr& e, const Point& p) {
  return std::visit(Overloaded{
                        [](const Constant& c) { return c.value; },
                        [&](const Variable& v) {
                          switch (v.kind) {
                            case VarKind::kTreatment: return p.a;
                            case VarKind::kOutcome: return p.y;
                            default:
                              if (v.index >= static_cast<int>(p.x.size()))
                                throw DimensionMismatch("expression references x" + std::to_string(v.index + 1) +
                                                        " but record has " + std::to_string(p.x.size()) +
                                                        " covariates");
                              return p.x[v.index];
                          }
                        },
                        [&](const Unary& u) {
                          double v = eval_node(*u.arg, p);
                          switch (u.op) {
                            case UnaryOp::kLog:
                              if (!(v > 0.0)) throw DomainError("log of non-positive value " + format_number(v));
                              return std::log(v);
                            case UnaryOp::kExp: return std::exp(v);
                            default: return -v;
                          }
                        },
                        [&](const Binary& b) {
                          double l = eval_node(*b.lhs, p);
                          double r = eval_node(*b.rhs, p);
                          return b.op == BinaryOp::kAdd ? l + r : l * r;
                        },
                        [&](const Power& pw) { return std::pow(eval_node(*pw.base, p), pw.exponent); },
                    },
                    e.node());
}

bool same(const Expr& l, const Expr& r) {
  if (l.node().index() != r.node().index()) return false;
  return std::visit(Overloaded{
                        [&](const Constant& c) { return c.value == std::get<Constant>(r.node()).value; },
                        [&](const Variable& v) {
                          const auto& o = std::get<Variable>(r.node());
                          return v.kind == o.kind && v.index == o.index;
                        },
                        [&](const Unary& u) {
                          const auto& o = std::get<Unary>(r.node());
                          return u.op == o.op && same(*u.arg, *o.arg);
                        },
                        [&](const Binary& b) {
                          const auto& o = std::get<Binary>(r.node());
                          return b.op == o.op && same(*b.lhs, *o.lhs) && same(*b.rhs, *o.rhs);
                        },
                        [&](const Power& pw) {
                          const auto& o = std::get<Power>(r.node());
                          return pw.exponent == o.exponent && same(*pw.base, *o.base);
                        },
                    },
                    l.node());
}

}  // namespace

Expr Expr::constant(double value) {
  if (!std::isfinite(value)) throw NonFinite("non-finite constant");
  if (value < 0.0) return negate(Expr(Constant{-value}));
  return Expr(Constant{value == 0.0 ? 0.0 : value});
}
Expr Expr::covariate(int index) {
  if (index < 0) throw UnknownVariable("negative covariate index");
  return Expr(Variable{VarKind::kCovariate, index});
}
Expr Expr::treatment() { return Expr(Variable{VarKind::kTreatment, 0}); }
Expr Expr::outcome() { return Expr(Variable{VarKind::kOutcome, 0}); }
Expr Expr::log(Expr arg) { return Expr(Unary{UnaryOp::kLog, share(std::move(arg))}); }
Expr Expr::exp(Expr arg) { return Expr(Unary{UnaryOp::kExp, share(std::move(arg))}); }
Expr Expr::negate(Expr arg) { return Expr(Unary{UnaryOp::kNegate, share(std::move(arg))}); }
Expr Expr::add(Expr lhs, Expr rhs) {
  return Expr(Binary{BinaryOp::kAdd, share(std::move(lhs)), share(std::move(rhs))});
}
Expr Expr::multiply(Expr lhs, Expr rhs) {
  return Expr(Binary{BinaryOp::kMultiply, share(std::move(lhs)), share(std::move(rhs))});
}
Expr Expr::power(Expr base, double exponent) {
  if (!std::isfinite(exponent)) throw NonFinite("non-finite exponent");
  return Expr(Power{share(std::move(base)), exponent == 0.0 ? 0.0 : exponent});
}

int Expr::covariate_extent() const {
  return std::visit(Overloaded{
                        [](const Constant&) { return 0; },
                        [](const Variable& v) { return v.kind == VarKind::kCovariate ? v.index + 1 : 0; },
                        [](const Unary& u) { return u.arg->covariate_extent(); },
                        [](const Binary& b) { return std::max(b.lhs->covariate_extent(), b.rhs->covariate_extent()); },
                        [](const Power& p) { return p.base->covariate_extent(); },
                    },
                    node());
}

bool operator==(const Expr& lhs, const Expr& rhs) { return same(lhs, rhs); }

Expr parse(std::string_view text, int dim) { return Parser(text, dim).run(); }

std::string format(const Expr& e) {
  std::string out;
  emit(e, 0, out);
  return out;
}

double evaluate(const Expr& e, const Point& p) {
  double v = eval_node(e, p);
  if (!std::isfinite(v)) throw NonFinite("expression '" + format(e) + "' is not finite");
  return v;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

BasisVector::BasisVector(std::vector<Expr> terms, int dim) : terms_(std::move(terms)), dim_(dim) {
  if (terms_.empty()) throw DimensionMismatch("basis vector must have at least one term");
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    if (terms_[i].covariate_extent() > dim)
      throw UnknownVariable("basis term '" + format(terms_[i]) + "' exceeds covariate dimension " +
                            std::to_string(dim));
    for (std::size_t j = 0; j < i; ++j)
      if (terms_[i] == terms_[j]) throw DimensionMismatch("duplicate basis term '" + format(terms_[i]) + "'");
  }
}

BasisVector BasisVector::parse(const std::vector<std::string>& texts, int dim) {
  std::vector<Expr> terms;
  terms.reserve(texts.size());
  for (const auto& t : texts) terms.push_back(expr::parse(t, dim));
  return BasisVector(std::move(terms), dim);
}

std::vector<std::string> BasisVector::to_strings() const {
  std::vector<std::string> out;
  out.reserve(terms_.size());
  for (const auto& t : terms_) out.push_back(format(t));
  return out;
}

void BasisVector::evaluate(const Point& p, std::span<double> out) const {
  for (std::size_t j = 0; j < terms_.size(); ++j) out[j] = expr::evaluate(terms_[j], p);
}

Eigen::VectorXd BasisVector::evaluate(const Point& p) const {
  Eigen::VectorXd out(size());
  evaluate(p, std::span<double>(out.data(), out.size()));
  return out;
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i == text.size() || text[i] == ';' || text[i] == ',') {
      std::string_view piece = text.substr(start, i - start);
      while (!piece.empty() && std::isspace(static_cast<unsigned char>(piece.front()))) piece.remove_prefix(1);
      while (!piece.empty() && std::isspace(static_cast<unsigned char>(piece.back()))) piece.remove_suffix(1);
      if (!piece.empty()) out.emplace_back(piece);
      start = i + 1;
    }
  }
  return out;
}

}  // namespace ecoate::expr
