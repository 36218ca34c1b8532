#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace ecoate {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SyntaxError : public Error {
 public:
  SyntaxError(const std::string& what, std::size_t position)
      : Error(what + " (at position " + std::to_string(position) + ")"), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

class UnknownVariable : public Error { public: using Error::Error; };
class DomainError : public Error { public: using Error::Error; };
class NonFinite : public Error { public: using Error::Error; };
class DimensionMismatch : public Error { public: using Error::Error; };
class SeparationError : public Error { public: using Error::Error; };
class EmptyStratum : public Error { public: using Error::Error; };
class EmptyArm : public Error { public: using Error::Error; };
class SchemaVersionMismatch : public Error { public: using Error::Error; };
class SchemaError : public Error { public: using Error::Error; };
class TimeoutError : public Error { public: using Error::Error; };
class ZeroVariance : public Error { public: using Error::Error; };
class InsufficientRows : public Error { public: using Error::Error; };
class InvalidShape : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class UsageError : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };

class NoConvergence : public Error {
 public:
  NoConvergence(const std::string& what, Eigen::VectorXd best, double residual, int iterations)
      : Error(what), best_(std::move(best)), residual_(residual), iterations_(iterations) {}
  const Eigen::VectorXd& best() const { return best_; }
  double residual() const { return residual_; }
  int iterations() const { return iterations_; }

 private:
  Eigen::VectorXd best_;
  double residual_;
  int iterations_;
};

}  // namespace ecoate
