#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace ecoate::expr {

// One record as seen by a basis expression.
struct Point {
  std::span<const double> x;
  double a = 0.0;
  double y = 0.0;
};

enum class VarKind { kCovariate, kTreatment, kOutcome };
enum class UnaryOp { kLog, kExp, kNegate };
enum class BinaryOp { kAdd, kMultiply };

class Expr;

struct Constant {
  double value;
};
struct Variable {
  VarKind kind;
  int index;  // zero-based covariate index, unused otherwise
};
struct Unary {
  UnaryOp op;
  std::shared_ptr<const Expr> arg;
};
struct Binary {
  BinaryOp op;
  std::shared_ptr<const Expr> lhs;
  std::shared_ptr<const Expr> rhs;
};
struct Power {
  std::shared_ptr<const Expr> base;
  double exponent;
};

// Immutable expression tree. Constants are stored non-negative; a negative
// literal is a negation of its magnitude, which keeps format/parse a bijection.
class Expr {
 public:
  using Node = std::variant<Constant, Variable, Unary, Binary, Power>;

  static Expr constant(double value);
  static Expr covariate(int index);
  static Expr treatment();
  static Expr outcome();
  static Expr log(Expr arg);
  static Expr exp(Expr arg);
  static Expr negate(Expr arg);
  static Expr add(Expr lhs, Expr rhs);
  static Expr multiply(Expr lhs, Expr rhs);
  static Expr power(Expr base, double exponent);

  const Node& node() const { return *node_; }
  // Largest covariate index referenced plus one, 0 when none.
  int covariate_extent() const;

  friend bool operator==(const Expr& lhs, const Expr& rhs);

 private:
  explicit Expr(Node node) : node_(std::make_shared<const Node>(std::move(node))) {}
  std::shared_ptr<const Node> node_;
};

Expr parse(std::string_view text, int dim);
std::string format(const Expr& e);
double evaluate(const Expr& e, const Point& p);

// Shortest decimal string that reads back to the same double.
std::string format_number(double v);

class BasisVector {
 public:
  BasisVector() = default;
  // Throws if empty, if any two terms coincide, or a term exceeds `dim`.
  BasisVector(std::vector<Expr> terms, int dim);
  static BasisVector parse(const std::vector<std::string>& texts, int dim);

  int size() const { return static_cast<int>(terms_.size()); }
  bool empty() const { return terms_.empty(); }
  int dim() const { return dim_; }
  const std::vector<Expr>& terms() const { return terms_; }
  std::vector<std::string> to_strings() const;

  void evaluate(const Point& p, std::span<double> out) const;
  Eigen::VectorXd evaluate(const Point& p) const;

 private:
  std::vector<Expr> terms_;
  int dim_ = 0;
};

// Splits "t1; t2, t3" style lists used on the command line.
std::vector<std::string> split_list(std::string_view text);

}  // namespace ecoate::expr
