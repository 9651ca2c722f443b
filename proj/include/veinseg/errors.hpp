#pragma once

#include <stdexcept>
#include <string>

namespace veinseg {

// Error taxonomy maps onto CLI exit codes: config 2, numeric 3, io 4.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr const char* kVersionString = "veinseg 1.0.0";

}  // namespace veinseg
