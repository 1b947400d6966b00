#pragma once

#include <stdexcept>
#include <string>

namespace gensfc {

// Argument outside the mathematical domain of an operation (non-positive
// budget, negative loss, log of a non-positive number, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A queue with traffic intensity >= 1. Carries the offending agent when known.
class StabilityError : public std::runtime_error {
 public:
  explicit StabilityError(const std::string& what, int agent_id = -1)
      : std::runtime_error(what), agent_id_(agent_id) {}
  int agent_id() const noexcept { return agent_id_; }

 private:
  int agent_id_;
};

// Malformed graph, chain or matrix shape.
class StructuralError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A collection is too small for the requested operation.
class SizeError : public std::length_error {
 public:
  using std::length_error::length_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or diverging optimizer.
class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& what, int epoch = -1)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

// Caller broke an operation's precondition (e.g. acting on a masked action).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace gensfc
