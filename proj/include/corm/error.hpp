// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace corm {

/// Contract violation or runtime failure. The message is prefixed with the
/// name of the operation that failed so CLI users can see where it happened.
class Error : public std::runtime_error {
 public:
  Error(std::string operation, const std::string& message)
      : std::runtime_error(operation + ": " + message), operation_(std::move(operation)) {}

  const std::string& operation() const noexcept { return operation_; }

 private:
  std::string operation_;
};

}  // namespace corm
