#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace musekit {

// Error categories surfaced by the CLI as distinct exit codes.
enum class error_kind {
    config,
    checkpoint,
    shape,
    numeric,
    vocab,
    render,
    token,
    format,
    contract,
    graph,
    stat,
    io,
};

struct error : std::runtime_error {
    error_kind kind;
    error(error_kind k, const std::string & msg) : std::runtime_error(msg), kind(k) {}
};

inline const char * error_kind_name(error_kind k) {
    switch (k) {
        case error_kind::config:     return "config";
        case error_kind::checkpoint: return "checkpoint";
        case error_kind::shape:      return "shape";
        case error_kind::numeric:    return "numeric";
        case error_kind::vocab:      return "vocab";
        case error_kind::render:     return "render";
        case error_kind::token:      return "token";
        case error_kind::format:     return "format";
        case error_kind::contract:   return "contract";
        case error_kind::graph:      return "graph";
        case error_kind::stat:       return "stat";
        case error_kind::io:         return "io";
    }
    return "unknown";
}

[[noreturn]] inline void fail(error_kind k, const std::string & msg) {
    throw error(k, msg);
}

inline void require(bool cond, error_kind k, const std::string & msg) {
    if (!cond) {
        fail(k, msg);
    }
}

constexpr double kPi = 3.14159265358979323846;

} // namespace musekit
