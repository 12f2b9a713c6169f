#pragma once

// Binary containers shared by checkpoints and prediction dumps. Every
// integer and float is little-endian regardless of host byte order.

#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "gep/bytes.hpp"
#include "gep/error.hpp"
#include "gep/events.hpp"
#include "gep/sequence.hpp"
#include "gep/tensor.hpp"

namespace gep {

struct NamedTensor {
  std::string name;
  Tensor value;
};

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write to " + path);
}

namespace detail {

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("truncated binary blob");
  }
  std::uint64_t u64() {
    need(8);
    const auto v = get_u64(reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline void put_tensor_body(std::string& buf, const Tensor& t) {
  put_u64(buf, t.rank());
  for (std::size_t d : t.shape()) put_u64(buf, d);
  for (double v : t.data()) put_f64(buf, v);
}

inline Tensor get_tensor_body(Reader& r) {
  const std::uint64_t rank = r.u64();
  if (rank > 8) throw IoError("implausible tensor rank in blob");
  Shape shape(rank);
  for (auto& d : shape) d = r.u64();
  const std::size_t n = shape_size(shape);
  r.need(n * 8);
  std::vector<double> data(n);
  for (double& v : data) v = r.f64();
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace detail

/// "GTEN", u64 rank, u64 dims..., float64 payload.
inline std::string encode_tensor(const Tensor& t) {
  std::string buf = "GTEN";
  detail::put_tensor_body(buf, t);
  return buf;
}

inline Tensor decode_tensor(std::string_view bytes) {
  if (bytes.substr(0, 4) != "GTEN") throw IoError("not a GTEN tensor blob");
  detail::Reader r(bytes.substr(4));
  Tensor t = detail::get_tensor_body(r);
  if (!r.done()) throw IoError("trailing bytes after tensor blob");
  return t;
}

/// "GLBL", u64 height, u64 width, one byte per pixel.
inline std::string encode_labels(const Grid<std::uint8_t>& labels) {
  std::string buf = "GLBL";
  detail::put_u64(buf, labels.height);
  detail::put_u64(buf, labels.width);
  buf.append(labels.data.begin(), labels.data.end());
  return buf;
}

inline Grid<std::uint8_t> decode_labels(std::string_view bytes) {
  if (bytes.substr(0, 4) != "GLBL") throw IoError("not a GLBL label blob");
  detail::Reader r(bytes.substr(4));
  Grid<std::uint8_t> g;
  g.height = r.u64();
  g.width = r.u64();
  const auto body = r.take(g.height * g.width);
  g.data.assign(body.begin(), body.end());
  if (!r.done()) throw IoError("trailing bytes after label blob");
  return g;
}

/// "GEPCKPT1", u64 header length, header text, u64 count, then per tensor:
/// u64 name length, name, shape-tagged float64 body.
inline std::string encode_bundle(std::string_view header, const std::vector<NamedTensor>& tensors) {
  std::string buf = "GEPCKPT1";
  detail::put_u64(buf, header.size());
  buf.append(header);
  detail::put_u64(buf, tensors.size());
  for (const NamedTensor& nt : tensors) {
    detail::put_u64(buf, nt.name.size());
    buf.append(nt.name);
    detail::put_tensor_body(buf, nt.value);
  }
  return buf;
}

struct Bundle {
  std::string header;
  std::vector<NamedTensor> tensors;

  const Tensor& at(std::string_view name) const {
    for (const NamedTensor& nt : tensors)
      if (nt.name == name) return nt.value;
    throw IoError("bundle has no tensor named " + std::string(name));
  }
};

inline Bundle decode_bundle(std::string_view bytes) {
  if (bytes.substr(0, 8) != "GEPCKPT1") throw IoError("not a GEPCKPT1 checkpoint");
  detail::Reader r(bytes.substr(8));
  Bundle b;
  b.header = std::string(r.take(r.u64()));
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name(r.take(r.u64()));
    b.tensors.push_back({std::move(name), detail::get_tensor_body(r)});
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint");
  return b;
}

}  // namespace gep
