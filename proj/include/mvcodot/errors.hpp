#pragma once

#include <stdexcept>
#include <string>

namespace mvcodot {

// Error categories surfaced by the command-line tool as distinct exit codes.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mvcodot
