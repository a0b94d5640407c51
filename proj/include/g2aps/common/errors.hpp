#pragma once

#include <stdexcept>
#include <string>

namespace g2aps {

// Malformed annotation / protocol / config content.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Duplicate keys, corrupt checkpoints, inconsistent files.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Infeasible or contradictory configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace g2aps
