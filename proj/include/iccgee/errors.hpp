#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace iccgee {

// Root of every error raised by the library. Each subclass maps to one
// failure family so callers (the CLI, the replicate harness) can classify.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Equicorrelation parameter at or beyond the positive-definite boundary.
class SingularityError : public Error {
 public:
  SingularityError(double rho, long n)
      : Error("equicorrelated matrix is singular or indefinite: rho=" +
              std::to_string(rho) + ", n=" + std::to_string(n)),
        rho_(rho), n_(n) {}
  double rho() const { return rho_; }
  long n() const { return n_; }

 private:
  double rho_;
  long n_;
};

class OverflowError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class SeparationError : public Error {
 public:
  using Error::Error;
};

class PositivityError : public Error {
 public:
  PositivityError(const std::string& what, std::vector<long> subjects)
      : Error(what), subjects_(std::move(subjects)) {}
  const std::vector<long>& subjects() const { return subjects_; }

 private:
  std::vector<long> subjects_;
};

class InfeasibleCorrelationError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class InferenceError : public Error {
 public:
  InferenceError(const std::string& what, double condition)
      : Error(what), condition_(condition) {}
  double condition() const { return condition_; }

 private:
  double condition_;
};

class FeasibilityError : public Error {
 public:
  using Error::Error;
};

class AccuracyError : public Error {
 public:
  AccuracyError(const std::string& what, double achieved)
      : Error(what), achieved_(achieved) {}
  double achieved() const { return achieved_; }

 private:
  double achieved_;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class Stage { psm, om, tm };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::psm: return "PSM";
    case Stage::om: return "OM";
    case Stage::tm: return "TM";
  }
  return "?";
}

// A fitting failure tagged with the pipeline stage it happened in.
class StageError : public Error {
 public:
  StageError(Stage stage, const std::string& what)
      : Error(std::string(stage_name(stage)) + " stage: " + what), stage_(stage) {}
  Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

}  // namespace iccgee
