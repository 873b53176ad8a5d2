#pragma once

#include <stdexcept>
#include <string>

namespace clk {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class FamilyMismatch : public Error {
public:
  using Error::Error;
};

class HomographyDivideByZero : public Error {
public:
  using Error::Error;
};

class SingularWarp : public Error {
public:
  using Error::Error;
};

class DegenerateConfiguration : public Error {
public:
  using Error::Error;
};

class WrongChannelCount : public Error {
public:
  using Error::Error;
};

class ShapeMismatch : public Error {
public:
  using Error::Error;
};

/// Thrown when a steepest-descent matrix W does not have full column rank
/// (texture-less template, aperture problem).
class RankDeficient : public Error {
public:
  using Error::Error;
};

class SingularSystem : public Error {
public:
  using Error::Error;
};

class UnderdeterminedSite : public Error {
public:
  UnderdeterminedSite(const std::string& msg, std::size_t site)
      : Error(msg), site_index(site) {}
  std::size_t site_index;
};

class SingularHessian : public Error {
public:
  using Error::Error;
};

class EmptyIntersection : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

}  // namespace clk
