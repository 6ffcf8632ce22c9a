#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace roadforge {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  NotScalarLoss,
  FrontierOverflow,
  EmptyTile,
  EmptyDataset,
  NoEdges,
  SizeMismatch,
  LengthMismatch,
  EmptyGrid,
  Parse,
  Io,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace roadforge
