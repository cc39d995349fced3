// SPDX-License-Identifier: Apache-2.0

#include "cinr/checkpoint.hpp"

#include "cinr/data.hpp"
#include "cinr/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cinr {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'I', 'N', 'R', 'C', 'K', 'P', 'T'};

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& msg) const {
    throw DataError(source_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated checkpoint reading ") + what);
  }

  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string serialize(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string header = ckpt.header.dump();
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    std::uint64_t count = 1;
    for (auto d : t.shape) count *= d;
    if (count != t.data.size())
      throw DimensionError("checkpoint tensor '" + t.name + "' declares " + std::to_string(count) + " values, holds " +
                           std::to_string(t.data.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  return out;
}

Checkpoint deserialize(std::string_view bytes, const std::string& source) {
  Reader in(bytes, source);
  if (in.take(sizeof(kMagic), "magic") != std::string_view(kMagic, sizeof(kMagic))) {
    throw DataError(source + ": not a checkpoint (bad magic) at byte offset 0");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) in.fail("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = in.get<std::uint64_t>("header length");
  const std::size_t header_at = in.pos();
  const auto header_text = in.take(header_len, "header");
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(source + ": malformed checkpoint header at byte offset " +
                    std::to_string(header_at + e.byte - (e.byte > 0 ? 1 : 0)));
  }
  const auto count = in.get<std::uint32_t>("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    const auto name_len = in.get<std::uint32_t>("tensor name length");
    t.name = std::string(in.take(name_len, "tensor name"));
    const auto ndim = in.get<std::uint32_t>("tensor rank");
    if (ndim > 8) in.fail("tensor '" + t.name + "' has implausible rank " + std::to_string(ndim));
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(in.get<std::uint64_t>("tensor extent"));
      n *= t.shape.back();
    }
    if (n > (bytes.size() - in.pos()) / sizeof(float)) in.fail("truncated data of tensor '" + t.name + "'");
    const auto raw = in.take(n * sizeof(float), "tensor data");
    t.data.resize(n);
    std::memcpy(t.data.data(), raw.data(), raw.size());
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.done()) in.fail("trailing bytes after last tensor");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path.string());
}

template <typename T>
NamedTensor to_named(const Parameter<T>& p) {
  NamedTensor t{p.name,
                {static_cast<std::uint64_t>(p.value.rows()), static_cast<std::uint64_t>(p.value.cols())},
                {}};
  t.data.resize(static_cast<std::size_t>(p.value.size()));
  for (Index i = 0; i < p.value.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(p.value.data()[i]);
  return t;
}

template <typename T>
void append(Checkpoint& ckpt, const ParamRefs<T>& params) {
  for (const auto* p : params) ckpt.tensors.push_back(to_named(*p));
}

template <typename T>
void restore(const Checkpoint& ckpt, const ParamRefs<T>& params) {
  for (auto* p : params) {
    const auto* t = ckpt.find(p->name);
    if (t == nullptr) throw DataError("checkpoint is missing tensor '" + p->name + "'");
    if (t->shape.size() != 2 || t->shape[0] != static_cast<std::uint64_t>(p->value.rows()) ||
        t->shape[1] != static_cast<std::uint64_t>(p->value.cols()))
      throw DataError("checkpoint tensor '" + p->name + "' does not match the configured shape " +
                      shape_string(p->value.rows(), p->value.cols()));
    for (Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = static_cast<T>(t->data[static_cast<std::size_t>(i)]);
  }
}

std::string checkpoint_id(const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  return sha256_hex(bytes.data(), bytes.size()).substr(0, 16);
}

template NamedTensor to_named(const Parameter<float>&);
template NamedTensor to_named(const Parameter<double>&);
template void append(Checkpoint&, const ParamRefs<float>&);
template void append(Checkpoint&, const ParamRefs<double>&);
template void restore(const Checkpoint&, const ParamRefs<float>&);
template void restore(const Checkpoint&, const ParamRefs<double>&);

}  // namespace cinr
