// Error types shared by all lmreloc modules.
#pragma once

#include <stdexcept>
#include <string>

namespace lmreloc {

// Base of every error raised by the library. Catch this to handle all of them.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidDepthError : public Error {
 public:
  using Error::Error;
};

class BehindCameraError : public Error {
 public:
  using Error::Error;
};

class NearSingularError : public Error {
 public:
  using Error::Error;
};

class OutOfBoundsError : public Error {
 public:
  using Error::Error;
};

// Malformed files: pose text, FMAP feature maps, configs, manifests, reports.
class FormatError : public Error {
 public:
  using Error::Error;
};

class InsufficientOverlapError : public Error {
 public:
  using Error::Error;
};

class DegenerateSystemError : public Error {
 public:
  using Error::Error;
};

class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};

// Raised by warp_scene when the sampled pose leaves too little overlap; the
// caller is expected to draw another pose.
class RegeneratePoseError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace lmreloc
