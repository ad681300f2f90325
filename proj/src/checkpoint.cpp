#include "txnfm/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "txnfm/common.hpp"

namespace txnfm::ckpt {

namespace {

constexpr char kMagic[8] = {'T', 'X', 'N', 'F', 'M', 'C', 'K', '\0'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

void put_u32(std::string& s, uint32_t x) { s.append(reinterpret_cast<const char*>(&x), 4); }
void put_u64(std::string& s, uint64_t x) { s.append(reinterpret_cast<const char*>(&x), 8); }
void put_str(std::string& s, const std::string& x) {
  put_u32(s, uint32_t(x.size()));
  s.append(x);
}

struct Reader {
  const std::string& s;
  size_t pos = 0;
  std::string origin;

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorCategory::kData, origin + ": " + what);
  }
  void need(size_t n) const {
    if (pos + n > s.size()) fail("truncated checkpoint");
  }
  uint32_t u32() {
    need(4);
    uint32_t x;
    std::memcpy(&x, s.data() + pos, 4);
    pos += 4;
    return x;
  }
  uint64_t u64() {
    need(8);
    uint64_t x;
    std::memcpy(&x, s.data() + pos, 8);
    pos += 8;
    return x;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string out = s.substr(pos, n);
    pos += n;
    return out;
  }
};

}  // namespace

void Checkpoint::add(const std::string& name, const tensor::DenseF& t) {
  for (const auto& [n, _] : tensors) {
    if (n == name) {
      throw Error(ErrorCategory::kInternal, "duplicate checkpoint tensor name: " + name);
    }
  }
  tensors.emplace_back(name, t);
}

const tensor::DenseF* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

const tensor::DenseF& Checkpoint::require(const std::string& name) const {
  const tensor::DenseF* t = find(name);
  if (t == nullptr) {
    throw Error(ErrorCategory::kData, "checkpoint is missing tensor: " + name);
  }
  return *t;
}

std::string Checkpoint::serialize() const {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, uint32_t(metadata.size()));
  for (const auto& [k, v] : metadata) {
    put_str(out, k);
    put_str(out, v);
  }
  put_u32(out, uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_str(out, name);
    out.push_back(char(0));  // dtype: float32
    put_u32(out, uint32_t(t.shape.size()));
    for (int d : t.shape) put_u32(out, uint32_t(d));
    put_u64(out, uint64_t(t.v.size()) * 4);
    out.append(reinterpret_cast<const char*>(t.v.data()), t.v.size() * 4);
  }
  put_u64(out, fnv1a64(out));
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes, const std::string& origin) {
  Reader r{bytes, 0, origin};
  if (bytes.size() < 8 + 4 + 8) r.fail("file too small to be a checkpoint");
  uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  uint64_t actual = fnv1a64(std::string_view(bytes.data(), bytes.size() - 8));
  if (stored != actual) {
    throw Error(ErrorCategory::kHashMismatch, origin + ": checkpoint checksum mismatch");
  }
  r.need(8);
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) r.fail("bad checkpoint magic");
  r.pos = 8;
  uint32_t version = r.u32();
  if (version != kVersion) {
    r.fail("unsupported checkpoint format version " + std::to_string(version));
  }
  Checkpoint ck;
  uint32_t n_meta = r.u32();
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    ck.metadata[k] = v;
  }
  uint32_t n_tensors = r.u32();
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    r.need(1);
    char dtype = bytes[r.pos++];
    if (dtype != 0) r.fail("unsupported tensor dtype in " + name);
    uint32_t ndim = r.u32();
    if (ndim > 4) r.fail("implausible rank in " + name);
    std::vector<int> shape(ndim);
    size_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      shape[d] = int(r.u32());
      if (shape[d] <= 0) r.fail("non-positive dimension in " + name);
      numel *= size_t(shape[d]);
    }
    uint64_t nbytes = r.u64();
    if (nbytes != numel * 4) r.fail("payload size does not match shape in " + name);
    r.need(nbytes);
    tensor::DenseF t;
    t.shape = std::move(shape);
    t.v.resize(numel);
    std::memcpy(t.v.data(), bytes.data() + r.pos, nbytes);
    r.pos += nbytes;
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  atomic_write_file(path, serialize());
}

Checkpoint Checkpoint::load(const std::string& path) {
  return deserialize(read_text_file(path), path);
}

}  // namespace txnfm::ckpt
