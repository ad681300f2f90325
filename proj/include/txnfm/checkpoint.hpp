#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "txnfm/tensor.hpp"

namespace txnfm::ckpt {

// Binary container for named float32 tensors plus string metadata.
// Layout: magic, format version, metadata pairs, tensors (name, dtype,
// dims, little-endian payload), then a checksum of everything before it.
// Writes are deterministic: metadata is sorted, tensors keep insertion order.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, tensor::DenseF>> tensors;

  void add(const std::string& name, const tensor::DenseF& t);
  const tensor::DenseF* find(const std::string& name) const;
  const tensor::DenseF& require(const std::string& name) const;

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes, const std::string& origin);

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace txnfm::ckpt
