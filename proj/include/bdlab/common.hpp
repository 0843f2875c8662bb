#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bdlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raised for malformed or inconsistent experiment configuration. Carries the source
/// location when the offending value can be traced back to a file.
class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string &msg, std::string file = {}, int line = 0, int column = 0)
        : Error(msg), message_(msg), file_(std::move(file)), line_(line), column_(column) {}

    const std::string &message() const { return message_; }
    const std::string &file() const { return file_; }
    int line() const { return line_; }
    int column() const { return column_; }

  private:
    std::string message_;
    std::string file_;
    int line_;
    int column_;
};

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent per-sample streams.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t hash_string(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view id) {
    return derive_seed(seed, hash_string(id));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(derive_seed(seed, stream)); }

inline Rng make_rng(std::uint64_t seed, std::string_view id) { return Rng(derive_seed(seed, id)); }

/// Uniform index in [0, n). n must be positive.
inline std::size_t uniform_index(Rng &rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

} // namespace bdlab
