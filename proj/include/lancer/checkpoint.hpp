#pragma once

// Versioned binary container: magic, version, text manifest, raw tensor
// bytes, trailing FNV-1a checksum. Layout is described in docs/checkpoint.md.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lancer/hash.hpp"
#include "lancer/tensor.hpp"

namespace lancer {

inline constexpr char checkpoint_magic[8] = {'L', 'N', 'C', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t checkpoint_version = 1;

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

class Checkpoint {
 public:
  struct Entry {
    std::string name;
    std::string dtype;
    Shape shape;
    std::string bytes;
  };

  void set_meta(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta_)
      if (k == key) {
        v = value;
        return;
      }
    meta_.emplace_back(key, value);
  }
  bool has_meta(const std::string& key) const {
    for (const auto& kv : meta_)
      if (kv.first == key) return true;
    return false;
  }
  const std::string& meta(const std::string& key) const {
    for (const auto& kv : meta_)
      if (kv.first == key) return kv.second;
    fail(ErrorKind::corruption, "checkpoint has no '" + key + "' entry");
  }
  const std::vector<std::pair<std::string, std::string>>& meta_entries() const { return meta_; }
  const std::vector<Entry>& entries() const { return tensors_; }

  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    for (const auto& e : tensors_)
      if (e.name == name) fail(ErrorKind::state, "duplicate checkpoint tensor " + name);
    auto v = t.values();
    tensors_.push_back({name, dtype_name<T>(), t.shape(),
                        std::string(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T))});
  }

  bool contains(const std::string& name) const {
    for (const auto& e : tensors_)
      if (e.name == name) return true;
    return false;
  }

  template <class T>
  Tensor<T> get(const std::string& name, bool requires_grad = false) const {
    for (const auto& e : tensors_) {
      if (e.name != name) continue;
      if (e.dtype != dtype_name<T>())
        fail(ErrorKind::config, "tensor " + name + " stored as " + e.dtype + ", requested " + dtype_name<T>());
      std::vector<T> v(numel(e.shape));
      std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
      return Tensor<T>(e.shape, std::move(v), requires_grad);
    }
    fail(ErrorKind::corruption, "checkpoint has no tensor " + name);
  }

  /// Overwrites every tensor `visit` names, checking shapes.
  template <class T, class Model>
  void load_into(Model& model, const std::string& prefix = "") const {
    model.visit([&](const std::string& n, Tensor<T>& t) {
      Tensor<T> src = get<T>(prefix + n, true);
      if (!t.node_ptr()) {
        t = src;
        return;
      }
      if (src.shape() != t.shape())
        fail(ErrorKind::corruption, "tensor " + prefix + n + " has shape " + shape_str(src.shape()) + ", expected " +
                                        shape_str(t.shape()));
      t = src;
    });
  }

  template <class T, class Model>
  void store(const Model& model, const std::string& prefix = "") {
    model.visit([&](const std::string& n, const Tensor<T>& t) { put(prefix + n, t); });
  }

  std::string serialize() const {
    std::ostringstream man;
    for (const auto& [k, v] : meta_) man << "meta\t" << k << '\t' << v << '\n';
    std::uint64_t offset = 0;
    for (const auto& e : tensors_) {
      man << "tensor\t" << e.name << '\t' << e.dtype << '\t' << shape_str(e.shape) << '\t' << offset << '\t'
          << e.bytes.size() << '\n';
      offset += e.bytes.size();
    }
    const std::string manifest = man.str();
    std::string out(checkpoint_magic, 8);
    append_u32(out, checkpoint_version);
    append_u64(out, manifest.size());
    out += manifest;
    append_u64(out, offset);
    for (const auto& e : tensors_) out += e.bytes;
    append_u64(out, fnv1a(out));
    return out;
  }

  static Checkpoint parse(const std::string& buf) {
    if (buf.size() < 8 + 4 || std::memcmp(buf.data(), checkpoint_magic, 8) != 0)
      fail(ErrorKind::corruption, "not a checkpoint (bad magic)");
    std::size_t pos = 8;
    const std::uint32_t version = read_u32(buf, pos);
    if (version != checkpoint_version)
      fail(ErrorKind::version, "unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                                   std::to_string(checkpoint_version) + ")");
    if (buf.size() < 8) fail(ErrorKind::corruption, "checkpoint truncated");
    const std::uint64_t stored = read_tail(buf);
    if (stored != fnv1a(std::string_view(buf.data(), buf.size() - 8)))
      fail(ErrorKind::corruption, "checkpoint checksum mismatch (file truncated or modified)");
    const std::uint64_t man_len = read_u64(buf, pos);
    if (man_len > buf.size() - pos) fail(ErrorKind::corruption, "checkpoint manifest overruns the file");
    const std::string manifest = buf.substr(pos, man_len);
    pos += man_len;
    const std::uint64_t data_len = read_u64(buf, pos);
    if (data_len != buf.size() - 8 - pos) fail(ErrorKind::corruption, "checkpoint data length disagrees with the file");
    const std::size_t data_start = pos;

    Checkpoint c;
    std::istringstream is(manifest);
    std::string line;
    while (std::getline(is, line)) {
      std::vector<std::string> f;
      std::string cell;
      std::istringstream ls(line);
      while (std::getline(ls, cell, '\t')) f.push_back(cell);
      if (f.size() >= 2 && f[0] == "meta") {
        c.meta_.emplace_back(f[1], f.size() > 2 ? f[2] : "");
      } else if (f.size() == 6 && f[0] == "tensor") {
        Entry e{f[1], f[2], parse_shape(f[3]), {}};
        const std::uint64_t off = std::stoull(f[4]), len = std::stoull(f[5]);
        const std::size_t width = e.dtype == "f32" ? 4 : e.dtype == "f64" ? 8 : 0;
        if (width == 0) fail(ErrorKind::corruption, "unknown dtype " + e.dtype);
        if (off + len > data_len || len != numel(e.shape) * width)
          fail(ErrorKind::corruption, "tensor " + e.name + " extent is inconsistent");
        e.bytes = buf.substr(data_start + off, len);
        c.tensors_.push_back(std::move(e));
      } else {
        fail(ErrorKind::corruption, "bad manifest line '" + line + "'");
      }
    }
    return c;
  }

  void save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) fail(ErrorKind::io, "cannot write " + tmp);
      const std::string s = serialize();
      f.write(s.data(), static_cast<std::streamsize>(s.size()));
      if (!f) fail(ErrorKind::io, "failed writing " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) fail(ErrorKind::io, "cannot move checkpoint into " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::io, "cannot open checkpoint " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  /// Checksum of the serialized form; identifies the checkpoint downstream.
  std::string hash() const { return hex64(fnv1a(serialize())); }

 private:
  static void append_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static void append_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static std::uint64_t read_le(const std::string& s, std::size_t pos, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
    return v;
  }
  static std::uint32_t read_u32(const std::string& s, std::size_t& pos) {
    if (pos + 4 > s.size()) fail(ErrorKind::corruption, "checkpoint truncated");
    auto v = static_cast<std::uint32_t>(read_le(s, pos, 4));
    pos += 4;
    return v;
  }
  static std::uint64_t read_u64(const std::string& s, std::size_t& pos) {
    if (pos + 8 > s.size()) fail(ErrorKind::corruption, "checkpoint truncated");
    auto v = read_le(s, pos, 8);
    pos += 8;
    return v;
  }
  static std::uint64_t read_tail(const std::string& s) { return read_le(s, s.size() - 8, 8); }

  static Shape parse_shape(const std::string& s) {
    Shape out;
    std::string part;
    std::string body = s;
    if (!body.empty() && body.front() == '[') body = body.substr(1, body.size() - 2);
    std::istringstream is(body);
    while (std::getline(is, part, 'x')) {
      try {
        out.push_back(std::stoul(part));
      } catch (const std::logic_error&) {
        fail(ErrorKind::corruption, "bad tensor shape '" + s + "'");
      }
    }
    if (out.empty()) fail(ErrorKind::corruption, "bad tensor shape '" + s + "'");
    return out;
  }

  std::vector<std::pair<std::string, std::string>> meta_;
  std::vector<Entry> tensors_;
};

}  // namespace lancer
