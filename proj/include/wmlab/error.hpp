#pragma once

#include <stdexcept>
#include <string>

namespace wmlab {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or dimension disagreement between tensors.
struct DimensionError : Error {
  using Error::Error;
};

// Out-of-range class index, action id or token id.
struct IndexError : Error {
  using Error::Error;
};

// API misuse: stepping a terminated environment, empty imagination
// context, overlong token stream and the like.
struct ContractError : Error {
  using Error::Error;
};

// Training produced a non-finite loss or gradient.
struct DivergenceError : Error {
  using Error::Error;
};

// Dataset / checkpoint / config file problems.
struct IoError : Error {
  using Error::Error;
};

// Undefined statistic (degenerate normalization denominator,
// zero rank variance).
struct UndefinedStatError : Error {
  using Error::Error;
};

}  // namespace wmlab
