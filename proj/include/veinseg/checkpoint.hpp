#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "veinseg/errors.hpp"
#include "veinseg/unet.hpp"

namespace veinseg {

// On-disk model snapshot. Binary layout: magic "UNET" + "CKP1", then a
// little-endian u32 entry count; per entry a u32 name byte-length, the
// UTF-8 name, a u8 rank, rank x u32 dims and dim-product x f32 little-endian
// values. Round trip through bytes is bit-exact.
struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint32_t version = 1;
  std::vector<CheckpointEntry> entries;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}

  void read(void* dst, std::size_t n) {
    if (pos_ + n > size_) throw io_error("truncated checkpoint stream");
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint8_t b[4];
    read(b, 4);
    return static_cast<std::uint32_t>(b[0]) |
           (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::uint8_t u8() {
    std::uint8_t b;
    read(&b, 1);
    return b;
  }
  bool at_end() const { return pos_ == size_; }

 private:
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out;
  out += "UNET";
  out += "CKP1";
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(e.dims.size()));
    std::size_t count = 1;
    for (const std::uint32_t d : e.dims) {
      detail::put_u32(out, d);
      count *= d;
    }
    for (std::size_t i = 0; i < count; ++i) {
      detail::put_u32(out, std::bit_cast<std::uint32_t>(e.values[i]));
    }
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes.data(), bytes.size());
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, "UNET", 4) != 0) {
    throw io_error("not a checkpoint: bad magic");
  }
  char ver[4];
  r.read(ver, 4);
  if (std::memcmp(ver, "CKP1", 4) != 0) {
    throw io_error("checkpoint version mismatch: expected CKP1, got " +
                   std::string(ver, 4));
  }
  Checkpoint ckpt;
  const std::uint32_t count = r.u32();
  ckpt.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t name_len = r.u32();
    e.name.resize(name_len);
    r.read(e.name.data(), name_len);
    const std::uint8_t rank = r.u8();
    std::size_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      e.dims.push_back(r.u32());
      n *= e.dims.back();
    }
    e.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      e.values[k] = std::bit_cast<float>(r.u32());
    }
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.at_end()) throw io_error("trailing bytes after checkpoint payload");
  return ckpt;
}

// Snapshots every registered parameter (trainables plus batch-norm running
// statistics) in registration order. Values are stored as f32.
template <typename T>
Checkpoint snapshot(UNet<T>& model) {
  Checkpoint ckpt;
  for (const auto* p : model.parameters()) {
    CheckpointEntry e;
    e.name = p->name;
    for (const int d : p->dims) e.dims.push_back(static_cast<std::uint32_t>(d));
    e.values.reserve(p->size());
    for (const T v : p->value) e.values.push_back(static_cast<float>(v));
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

// Restores a snapshot into a model of the same architecture. Validates the
// whole checkpoint first so the model is unmodified on any error; unknown
// names, missing tensors and shape mismatches are reported distinctly, each
// naming the offending tensor.
template <typename T>
void restore(UNet<T>& model, const Checkpoint& ckpt) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ckpt.entries) by_name[e.name] = &e;
  auto& params = model.parameters();
  for (const auto* p : params) {
    const auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      throw config_error("checkpoint is missing tensor " + p->name);
    }
    const CheckpointEntry& e = *it->second;
    bool same = e.dims.size() == p->dims.size();
    if (same) {
      for (std::size_t i = 0; i < e.dims.size(); ++i) {
        if (static_cast<int>(e.dims[i]) != p->dims[i]) same = false;
      }
    }
    if (!same) {
      std::string got, want;
      for (const auto d : e.dims) got += std::to_string(d) + " ";
      for (const auto d : p->dims) want += std::to_string(d) + " ";
      throw config_error("shape mismatch for tensor " + p->name +
                         ": checkpoint has [ " + got + "], model expects [ " +
                         want + "]");
    }
  }
  if (by_name.size() != params.size()) {
    for (const auto& e : ckpt.entries) {
      bool known = false;
      for (const auto* p : params) {
        if (p->name == e.name) {
          known = true;
          break;
        }
      }
      if (!known) throw config_error("unknown tensor name " + e.name);
    }
  }
  for (auto* p : params) {
    const CheckpointEntry& e = *by_name.at(p->name);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      p->value[i] = static_cast<T>(e.values[i]);
    }
  }
}

inline void write_checkpoint_file(const std::string& path,
                                  const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw io_error("failed writing " + path);
}

inline Checkpoint read_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace veinseg
