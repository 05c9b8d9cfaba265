#include "mca/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mca/errors.hpp"

namespace mca {

namespace {

constexpr char kMagic[4] = {'M', 'C', 'A', 'W'};
constexpr const char* kMetaName = "__meta__";

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::byte*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFFu));
    }
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::byte> take() { return std::move(out_); }

 private:
  std::vector<std::byte> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::byte>& in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw TruncatedError("checkpoint truncated while reading " + std::string(what) + " at byte " +
                           std::to_string(pos_) + " of " + std::to_string(in_.size()));
    }
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(std::to_integer<unsigned>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string str(std::size_t n) {
    need(n, "tensor name");
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::byte>& in_;
  std::size_t pos_ = 0;
};

void put_u64_chunks(std::vector<float>& out, std::uint64_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<float>((v >> (16 * i)) & 0xFFFFu));
}

std::uint64_t get_u64_chunks(std::span<const float> v) {
  std::uint64_t r = 0;
  for (int i = 0; i < 4; ++i) {
    const float f = v[static_cast<std::size_t>(i)];
    if (!(f >= 0.0f && f <= 65535.0f) || f != static_cast<float>(static_cast<std::uint32_t>(f))) {
      throw FormatError("checkpoint metadata chunk is not a 16-bit integer");
    }
    r |= static_cast<std::uint64_t>(f) << (16 * i);
  }
  return r;
}

}  // namespace

const NamedTensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<float> meta;
  put_u64_chunks(meta, ckpt.step);
  put_u64_chunks(meta, ckpt.seed);

  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size() + 1));
  auto write_tensor = [&w](const std::string& name, const Shape& shape, std::span<const float> values) {
    if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name.substr(0, 32) + "...");
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : values) w.f32(v);
  };
  for (const auto& t : ckpt.tensors) {
    if (t.name == kMetaName) throw FormatError("tensor name __meta__ is reserved");
    write_tensor(t.name, t.tensor.shape(), t.tensor.values());
  }
  write_tensor(kMetaName, Shape{meta.size()}, meta);
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::byte>& bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint: bad magic bytes");
  (void)r.str(4);
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.le<std::uint32_t>("tensor count");
  Checkpoint ckpt;
  bool have_meta = false;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = r.le<std::uint16_t>("name length");
    std::string name = r.str(name_len);
    const auto rank = r.le<std::uint8_t>("rank");
    if (rank < 1 || rank > 4) throw FormatError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    Shape shape;
    std::size_t elements = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      shape.push_back(r.le<std::uint32_t>("dimension"));
      elements *= shape.back();
      if (elements > bytes.size()) {
        throw TruncatedError("tensor '" + name + "' declares more values than the file holds");
      }
    }
    r.need(elements * 4, "tensor values");
    std::vector<float> values(elements);
    for (auto& v : values) v = std::bit_cast<float>(r.le<std::uint32_t>("value"));
    if (name == kMetaName) {
      if (values.size() != 8) throw FormatError("checkpoint metadata has wrong size");
      ckpt.step = get_u64_chunks(std::span<const float>(values).subspan(0, 4));
      ckpt.seed = get_u64_chunks(std::span<const float>(values).subspan(4, 4));
      have_meta = true;
      continue;
    }
    ckpt.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (!r.done()) throw FormatError("trailing bytes after the last checkpoint tensor");
  if (!have_meta) throw FormatError("checkpoint has no __meta__ record");
  return ckpt;
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("failed reading " + path.string());
  return bytes;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace mca
