#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lowsup {

// Row-major so that one row is one frame (or one token position).
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vec = Eigen::VectorXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: malformed files, violated invariants, inconsistent configuration.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A pipeline stage or external process failed after its inputs validated.
class StageError : public Error {
 public:
  using Error::Error;
};

/// 64-bit FNV-1a, used for config hashes and provenance ids.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

/// Decode UTF-8 into one string per code point. Throws ValidationError on bad bytes.
std::vector<std::string> utf8_chars(std::string_view text);

std::vector<std::string> split_ws(std::string_view text);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
std::string trim(std::string_view s);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace lowsup
