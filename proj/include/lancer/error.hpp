#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lancer {

/// Machine-readable failure class; the CLI prints it as the first field of
/// its one-line error message.
enum class ErrorKind {
  dimension,
  index,
  empty,
  budget,
  numeric,
  io,
  parse,
  data,
  config,
  corruption,
  version,
  hash_mismatch,
  locked,
  degenerate,
  state,
};

inline std::string_view kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::index: return "index";
    case ErrorKind::empty: return "empty";
    case ErrorKind::budget: return "budget";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::io: return "io";
    case ErrorKind::parse: return "parse";
    case ErrorKind::data: return "data";
    case ErrorKind::config: return "config";
    case ErrorKind::corruption: return "corruption";
    case ErrorKind::version: return "version";
    case ErrorKind::hash_mismatch: return "hash-mismatch";
    case ErrorKind::locked: return "locked";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::state: return "state";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace lancer
