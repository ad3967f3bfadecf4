#pragma once

#include <bit>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "ipdr/geometry.hpp"
#include "ipdr/nn.hpp"

namespace ipdr::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temporary and renames over the target, so readers never
/// observe a partial file.
inline void atomic_write(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw FormatError("short write to " + tmp.string());
    }
  }
  fs::rename(tmp, p);
}

// ---------------------------------------------------------------------------
// Little-endian binary helpers

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }
  void raw(const std::string& s) { buf_ += s; }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& s) : s_(s) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > s_.size()) throw FormatError("unexpected end of binary data");
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string raw(std::size_t n) {
    if (pos_ + n > s_.size()) throw FormatError("unexpected end of binary data");
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_fixed(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// ---------------------------------------------------------------------------
// PLY

inline std::string ply_string(const geom::TriangleMesh& m, bool binary = false) {
  std::ostringstream os;
  os << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n"
     << "element vertex " << m.vertices.size() << "\nproperty float x\nproperty float y\nproperty float z\n"
     << "element face " << m.faces.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
  if (!binary) {
    char buf[128];
    for (const auto& v : m.vertices) {
      std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", static_cast<double>(static_cast<float>(v.x())),
                    static_cast<double>(static_cast<float>(v.y())), static_cast<double>(static_cast<float>(v.z())));
      os << buf;
    }
    for (const auto& f : m.faces) os << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
    return os.str();
  }
  ByteWriter w;
  for (const auto& v : m.vertices)
    for (int k = 0; k < 3; ++k) w.put(static_cast<float>(v[k]));
  for (const auto& f : m.faces) {
    w.put(std::uint8_t{3});
    for (int k = 0; k < 3; ++k) w.put(static_cast<std::int32_t>(f[k]));
  }
  return os.str() + w.str();
}

inline void write_ply(const fs::path& p, const geom::TriangleMesh& m, bool binary = false) {
  atomic_write(p, ply_string(m, binary));
}

namespace detail {

inline double ply_read_binary(ByteReader& r, const std::string& t) {
  if (t == "char" || t == "int8") return r.get<std::int8_t>();
  if (t == "uchar" || t == "uint8") return r.get<std::uint8_t>();
  if (t == "short" || t == "int16") return r.get<std::int16_t>();
  if (t == "ushort" || t == "uint16") return r.get<std::uint16_t>();
  if (t == "int" || t == "int32") return r.get<std::int32_t>();
  if (t == "uint" || t == "uint32") return r.get<std::uint32_t>();
  if (t == "float" || t == "float32") return r.get<float>();
  if (t == "double" || t == "float64") return r.get<double>();
  throw FormatError("ply: unknown property type " + t);
}

}  // namespace detail

/// Reads `vertex` (x, y, z) and triangular `face` lists from ASCII or
/// little-endian binary PLY. Other elements and properties are skipped.
inline geom::TriangleMesh parse_ply(const std::string& data) {
  struct Prop {
    std::string name, type, count_type;
    bool list = false;
  };
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<Prop> props;
  };
  const std::size_t hdr_end = data.find("end_header");
  if (data.rfind("ply", 0) != 0 || hdr_end == std::string::npos) throw FormatError("ply: missing header");
  std::size_t body = data.find('\n', hdr_end);
  if (body == std::string::npos) throw FormatError("ply: truncated header");
  ++body;
  std::istringstream hs(data.substr(0, hdr_end));
  std::string line, format;
  std::vector<Element> elems;
  while (std::getline(hs, line)) {
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      ls >> format;
    } else if (kw == "element") {
      Element e;
      ls >> e.name >> e.count;
      elems.push_back(e);
    } else if (kw == "property") {
      if (elems.empty()) throw FormatError("ply: property before element");
      Prop p;
      std::string t;
      ls >> t;
      if (t == "list") {
        p.list = true;
        ls >> p.count_type >> p.type >> p.name;
      } else {
        p.type = t;
        ls >> p.name;
      }
      elems.back().props.push_back(p);
    }
  }
  if (format != "ascii" && format != "binary_little_endian") throw FormatError("ply: unsupported format " + format);

  geom::TriangleMesh m;
  auto take_face = [&](const std::vector<double>& idx) {
    if (idx.size() < 3) throw FormatError("ply: face with fewer than 3 vertices");
    for (std::size_t k = 1; k + 1 < idx.size(); ++k)
      m.faces.push_back({static_cast<int>(idx[0]), static_cast<int>(idx[k]), static_cast<int>(idx[k + 1])});
  };

  if (format == "ascii") {
    std::istringstream bs(data.substr(body));
    for (const auto& e : elems)
      for (std::size_t i = 0; i < e.count; ++i) {
        geom::Vec3 v = geom::Vec3::Zero();
        for (const auto& p : e.props) {
          if (p.list) {
            std::size_t n = 0;
            if (!(bs >> n)) throw FormatError("ply: truncated body");
            std::vector<double> idx(n);
            for (auto& x : idx)
              if (!(bs >> x)) throw FormatError("ply: truncated body");
            if (e.name == "face" && p.name == "vertex_indices") take_face(idx);
          } else {
            double x = 0;
            if (!(bs >> x)) throw FormatError("ply: truncated body");
            if (p.name == "x") v.x() = x;
            if (p.name == "y") v.y() = x;
            if (p.name == "z") v.z() = x;
          }
        }
        if (e.name == "vertex") m.vertices.push_back(v);
      }
  } else {
    const std::string payload = data.substr(body);
    ByteReader r(payload);
    for (const auto& e : elems)
      for (std::size_t i = 0; i < e.count; ++i) {
        geom::Vec3 v = geom::Vec3::Zero();
        for (const auto& p : e.props) {
          if (p.list) {
            const auto n = static_cast<std::size_t>(detail::ply_read_binary(r, p.count_type));
            std::vector<double> idx(n);
            for (auto& x : idx) x = detail::ply_read_binary(r, p.type);
            if (e.name == "face" && p.name == "vertex_indices") take_face(idx);
          } else {
            const double x = detail::ply_read_binary(r, p.type);
            if (p.name == "x") v.x() = x;
            if (p.name == "y") v.y() = x;
            if (p.name == "z") v.z() = x;
          }
        }
        if (e.name == "vertex") m.vertices.push_back(v);
      }
  }
  for (const auto& f : m.faces)
    for (int k : f)
      if (k < 0 || k >= static_cast<int>(m.vertices.size())) throw FormatError("ply: face index out of range");
  return m;
}

inline geom::TriangleMesh read_ply(const fs::path& p) { return parse_ply(read_file(p)); }

// ---------------------------------------------------------------------------
// PPM (P6, 8-bit)

/// Image tensor 3 x H x W with values in [0, 1] (clamped on write).
inline std::string ppm_string(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("ppm: expected a 3 x H x W image");
  const std::size_t H = img.dim(1), W = img.dim(2);
  std::string s = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  s.reserve(s.size() + 3 * H * W);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img(c, i, j), 0.0, 1.0);
        s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  return s;
}

inline Tensor parse_ppm(const std::string& data) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t b = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    return data.substr(b, pos - b);
  };
  if (token() != "P6") throw FormatError("ppm: only binary P6 is supported");
  std::size_t W = 0, H = 0, maxv = 0;
  try {
    W = std::stoul(token());
    H = std::stoul(token());
    maxv = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError("ppm: malformed header");
  }
  if (W == 0 || H == 0 || maxv != 255) throw FormatError("ppm: unsupported size or depth");
  ++pos;  // single whitespace after maxval
  if (data.size() < pos + 3 * W * H) throw FormatError("ppm: truncated pixel data");
  Tensor img({3, H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < 3; ++c)
        img(c, i, j) = static_cast<unsigned char>(data[pos + (i * W + j) * 3 + c]) / 255.0;
  return img;
}

inline Tensor read_ppm(const fs::path& p) { return parse_ppm(read_file(p)); }

// ---------------------------------------------------------------------------
// Poses and intrinsics

inline std::string poses_string(const std::vector<geom::Mat4>& poses) {
  std::string s;
  for (const auto& P : poses) {
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) s += (j ? " " : "") + fmt_double(P(i, j));
      s += '\n';
    }
    s += '\n';
  }
  return s;
}

inline std::vector<double> parse_numbers(const std::string& text, const std::string& what) {
  std::vector<double> v;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw FormatError(what + ": not a number: " + tok);
    }
  }
  return v;
}

inline std::vector<geom::Mat4> parse_poses(const std::string& text) {
  const auto v = parse_numbers(text, "poses");
  if (v.empty() || v.size() % 16 != 0) throw FormatError("poses: expected a multiple of 16 numbers");
  std::vector<geom::Mat4> out(v.size() / 16);
  for (std::size_t f = 0; f < out.size(); ++f)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) out[f](i, j) = v[f * 16 + static_cast<std::size_t>(i * 4 + j)];
  return out;
}

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  std::size_t W = 0, H = 0;
};

inline std::string intrinsics_string(const Intrinsics& k) {
  return fmt_double(k.fx) + " " + fmt_double(k.fy) + " " + fmt_double(k.cx) + " " + fmt_double(k.cy) + " " +
         std::to_string(k.W) + " " + std::to_string(k.H) + "\n";
}

inline Intrinsics parse_intrinsics(const std::string& text) {
  const auto v = parse_numbers(text, "intrinsics");
  if (v.size() != 6) throw FormatError("intrinsics: expected `fx fy cx cy W H`");
  if (v[4] < 1 || v[5] < 1 || v[4] != std::floor(v[4]) || v[5] != std::floor(v[5]))
    throw FormatError("intrinsics: image size must be positive integers");
  return {v[0], v[1], v[2], v[3], static_cast<std::size_t>(v[4]), static_cast<std::size_t>(v[5])};
}

// ---------------------------------------------------------------------------
// TSDF volume: "TSDF", u32 dims[3], f64 origin[3], f64 voxel size, f32 payload

inline std::string tsdf_string(const geom::VoxelVolume& v) {
  ByteWriter w;
  w.raw("TSDF");
  for (auto d : v.grid.dims) w.put(static_cast<std::uint32_t>(d));
  for (int k = 0; k < 3; ++k) w.put(v.grid.origin[k]);
  w.put(v.grid.voxel_size);
  for (double x : v.values) w.put(static_cast<float>(x));
  return w.str();
}

inline geom::VoxelVolume parse_tsdf(const std::string& data) {
  ByteReader r(data);
  if (r.raw(4) != "TSDF") throw FormatError("tsdf: bad magic");
  geom::GridSpec g;
  for (auto& d : g.dims) d = r.get<std::uint32_t>();
  for (int k = 0; k < 3; ++k) g.origin[k] = r.get<double>();
  g.voxel_size = r.get<double>();
  if (!(g.voxel_size > 0)) throw FormatError("tsdf: non-positive voxel size");
  geom::VoxelVolume v = geom::VoxelVolume::filled(g, 0.0);
  for (auto& x : v.values) x = r.get<float>();
  if (!r.done()) throw FormatError("tsdf: trailing bytes");
  return v;
}

// ---------------------------------------------------------------------------
// Checkpoint: "IPDR", u32 version, then per parameter
//   u32 name length, name bytes, u32 rank, u32 extents[rank], f64 payload.

constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string checkpoint_string(const nn::ParamSet& ps) {
  ByteWriter w;
  w.raw("IPDR");
  w.put(kCheckpointVersion);
  for (const auto& [name, v] : ps.items()) {
    w.put(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.put(static_cast<std::uint32_t>(v.shape().size()));
    for (auto e : v.shape()) w.put(static_cast<std::uint32_t>(e));
    for (double x : v.value().data()) w.put(x);
  }
  return w.str();
}

struct CheckpointRecord {
  std::string name;
  Tensor value;
};

inline std::vector<CheckpointRecord> parse_checkpoint(const std::string& data) {
  ByteReader r(data);
  if (data.size() < 8 || r.raw(4) != "IPDR") throw FormatError("checkpoint: bad magic");
  const auto ver = r.get<std::uint32_t>();
  if (ver != kCheckpointVersion)
    throw FormatError("checkpoint: format version " + std::to_string(ver) + ", expected " +
                      std::to_string(kCheckpointVersion));
  std::vector<CheckpointRecord> out;
  while (!r.done()) {
    CheckpointRecord rec;
    rec.name = r.raw(r.get<std::uint32_t>());
    Shape s(r.get<std::uint32_t>());
    for (auto& e : s) e = r.get<std::uint32_t>();
    std::vector<double> vals(shape_numel(s));
    for (auto& x : vals) x = r.get<double>();
    try {
      rec.value = Tensor(s, std::move(vals));
    } catch (const NumericError&) {
      throw FormatError("checkpoint: non-finite value in " + rec.name);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// Copies checkpoint values into a parameter set whose names and shapes must
/// match record for record.
inline void load_checkpoint(nn::ParamSet& ps, const std::string& data) {
  const auto recs = parse_checkpoint(data);
  auto& items = ps.items();
  for (std::size_t i = 0; i < std::max(recs.size(), items.size()); ++i) {
    if (i >= recs.size()) throw FormatError("checkpoint mismatch: missing record " + items[i].first);
    if (i >= items.size()) throw FormatError("checkpoint mismatch: unexpected record " + recs[i].name);
    if (recs[i].name != items[i].first)
      throw FormatError("checkpoint mismatch: record " + recs[i].name + " where " + items[i].first + " expected");
    if (recs[i].value.shape() != items[i].second.shape())
      throw FormatError("checkpoint mismatch: record " + recs[i].name + " has shape " +
                        shape_str(recs[i].value.shape()) + ", expected " + shape_str(items[i].second.shape()));
  }
  for (std::size_t i = 0; i < recs.size(); ++i) items[i].second.mutable_value() = recs[i].value;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string csv_row(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
  return s + "\n";
}

// ---------------------------------------------------------------------------
// Flat TOML subset: `key = value` lines, `# comments`, optional `[section]`
// headers that prefix keys as `section.key`. Values are numbers, booleans,
// quoted strings, or flat arrays of numbers.

class Config {
 public:
  static Config parse(const std::string& text) {
    Config c;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string t = strip(cut_comment(line));
      if (t.empty()) continue;
      const std::string where = "config line " + std::to_string(lineno);
      if (t.front() == '[') {
        if (t.back() != ']') throw FormatError(where + ": unterminated section header");
        section = strip(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw FormatError(where + ": expected key = value");
      std::string key = strip(t.substr(0, eq));
      std::string val = strip(t.substr(eq + 1));
      if (key.empty() || val.empty()) throw FormatError(where + ": empty key or value");
      if (!section.empty()) key = section + "." + key;
      if (val.front() == '"') {
        if (val.size() < 2 || val.back() != '"') throw FormatError(where + ": unterminated string");
        val = val.substr(1, val.size() - 2);
      }
      c.values_[key] = val;
      c.order_.push_back(key);
    }
    return c;
  }

  static Config load(const fs::path& p) { return parse(read_file(p)); }

  bool has(const std::string& k) const { return values_.count(k) != 0; }
  void set(const std::string& k, const std::string& v) {
    if (!has(k)) order_.push_back(k);
    values_[k] = v;
  }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& k, const std::string& def) const {
    auto it = values_.find(k);
    return it == values_.end() ? def : it->second;
  }

  double get_double(const std::string& k, double def) const {
    auto it = values_.find(k);
    if (it == values_.end()) return def;
    return to_double(k, it->second);
  }

  long get_int(const std::string& k, long def) const {
    const double v = get_double(k, static_cast<double>(def));
    if (v != std::floor(v)) throw FormatError("config: " + k + " must be an integer");
    return static_cast<long>(v);
  }

  bool get_bool(const std::string& k, bool def) const {
    auto it = values_.find(k);
    if (it == values_.end()) return def;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw FormatError("config: " + k + " must be true or false");
  }

  std::vector<double> get_array(const std::string& k, std::vector<double> def) const {
    auto it = values_.find(k);
    if (it == values_.end()) return def;
    std::string s = it->second;
    if (s.size() < 2 || s.front() != '[' || s.back() != ']') throw FormatError("config: " + k + " must be an array");
    s = s.substr(1, s.size() - 2);
    std::vector<double> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      tok = strip(tok);
      if (!tok.empty()) out.push_back(to_double(k, tok));
    }
    return out;
  }

  /// Canonical text, keys in first-seen order.
  std::string to_string() const {
    std::string s;
    for (const auto& k : order_) {
      const std::string& v = values_.at(k);
      const bool bare = v == "true" || v == "false" || (!v.empty() && v.front() == '[') || is_number(v);
      s += k + " = " + (bare ? v : "\"" + v + "\"") + "\n";
    }
    return s;
  }

 private:
  static std::string cut_comment(const std::string& l) {
    bool q = false;
    for (std::size_t i = 0; i < l.size(); ++i) {
      if (l[i] == '"') q = !q;
      if (l[i] == '#' && !q) return l.substr(0, i);
    }
    return l;
  }
  static std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }
  static bool is_number(const std::string& v) {
    double x = 0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), x);
    return r.ec == std::errc() && r.ptr == v.data() + v.size();
  }
  static double to_double(const std::string& k, const std::string& v) {
    double x = 0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), x);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(x))
      throw FormatError("config: " + k + " is not a number: " + v);
    return x;
  }

  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

}  // namespace ipdr::io
