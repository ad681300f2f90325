#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace txnfm {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorCategory {
  kConfig = 2,       // bad config value, unknown key, invalid argument
  kMissingArtifact,  // required input file absent
  kHashMismatch,     // artifact fingerprint does not match its consumer
  kData,             // malformed record, degenerate dataset
  kInternal,         // invariant violation, numerical divergence
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg)
      : std::runtime_error(msg), category_(cat) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kMissingArtifact: return "missing-artifact";
    case ErrorCategory::kHashMismatch: return "hash-mismatch";
    case ErrorCategory::kData: return "data";
    case ErrorCategory::kInternal: return "internal";
  }
  return "unknown";
}

// FNV-1a, used for vocabulary hashes, dataset fingerprints and config
// fingerprints. Not cryptographic; collisions are not a threat model here.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a64_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);

// Writes via a temp file in the same directory followed by a rename, so an
// interrupted run never leaves a partial artifact at the final path.
void atomic_write_file(const std::filesystem::path& path, std::string_view content);

std::string hex64(uint64_t v);

}  // namespace txnfm
