#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace emcomm {

// Bad or inconsistent configuration (CLI exit code 2).
class config_error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// File system failures (CLI exit code 3).
class io_error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Malformed binary container or wire buffer.
class format_error : public io_error {
  public:
    using io_error::io_error;
};

// Training produced a non-finite or runaway loss (CLI exit code 4).
class divergence_error : public std::runtime_error {
  public:
    divergence_error(std::string term, const std::string& what)
        : std::runtime_error(what), term_(std::move(term)) {}

    const std::string& term() const noexcept { return term_; }

  private:
    std::string term_;
};

} // namespace emcomm
