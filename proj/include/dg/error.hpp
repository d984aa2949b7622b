#pragma once

#include <stdexcept>
#include <string>

namespace dg {

/// Bad caller input: shape mismatch, out-of-range token, violated precondition.
class InputError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// On-disk format problems (bad magic, truncated payload, inconsistent table).
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Two checkpoints (or a checkpoint and a delta) that do not share a layout.
class MismatchError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Optimisation produced a non-finite loss.
class DivergenceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

} // namespace dg
