#ifndef CARPET_ERROR_HPP
#define CARPET_ERROR_HPP

#include <stdexcept>
#include <string>

namespace carpet {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed inputs: bad shapes, out-of-range values, invalid configs.
/// The CLI maps these to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A placement rectangle that does not fit inside its image.
class PlacementError : public ValidationError {
 public:
  PlacementError(const std::string& edge, const std::string& what)
      : ValidationError(what), edge_(edge) {}

  /// "top", "left", "bottom", "right", or "area" for degenerate rectangles.
  const std::string& edge() const noexcept { return edge_; }

 private:
  std::string edge_;
};

/// Failures that happen while running a valid computation (non-finite
/// losses, I/O trouble). The CLI maps these to exit code 3.
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

/// A gradient or activation went non-finite inside a model.
class NonFiniteError : public RuntimeFailure {
 public:
  NonFiniteError(const std::string& layer, const std::string& what)
      : RuntimeFailure(what), layer_(layer) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

}  // namespace carpet

#endif  // CARPET_ERROR_HPP
