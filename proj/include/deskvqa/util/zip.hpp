#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deskvqa/util/error.hpp"

namespace deskvqa::zip {

using Bytes = std::vector<std::uint8_t>;

struct Entry {
  std::string name;
  bool is_directory = false;
  std::uint16_t method = 0;
  std::uint32_t crc32 = 0;
  std::uint32_t compressed_size = 0;
  std::uint32_t uncompressed_size = 0;
  std::uint32_t local_header_offset = 0;
};

namespace detail {

inline std::uint16_t u16(std::span<const std::uint8_t> b, std::size_t at) {
  if (at + 2 > b.size()) throw Error(ErrorKind::MalformedArchive, "truncated archive");
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

inline std::uint32_t u32(std::span<const std::uint8_t> b, std::size_t at) {
  if (at + 4 > b.size()) throw Error(ErrorKind::MalformedArchive, "truncated archive");
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

inline void put16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;

}  // namespace detail

inline std::uint32_t crc32_of(std::span<const std::uint8_t> data) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large inputs.
  std::size_t off = 0;
  while (off < data.size()) {
    auto n = static_cast<uInt>(std::min<std::size_t>(data.size() - off, 1u << 30));
    crc = ::crc32(crc, data.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

/// Read-only view over an in-memory ZIP archive (no ZIP64, no encryption).
/// Supports stored and deflated members.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> archive) : data_(archive) { read_directory(); }

  const std::vector<Entry>& entries() const { return entries_; }

  Bytes read(const Entry& e) const {
    using namespace detail;
    std::size_t at = e.local_header_offset;
    if (u32(data_, at) != kLocalSig) throw Error(ErrorKind::MalformedArchive, "bad local header for " + e.name);
    std::size_t name_len = u16(data_, at + 26);
    std::size_t extra_len = u16(data_, at + 28);
    std::size_t start = at + 30 + name_len + extra_len;
    if (start + e.compressed_size > data_.size()) {
      throw Error(ErrorKind::MalformedArchive, "member data out of range: " + e.name);
    }
    auto payload = data_.subspan(start, e.compressed_size);

    Bytes out;
    if (e.method == 0) {
      out.assign(payload.begin(), payload.end());
    } else if (e.method == 8) {
      out = inflate_raw(payload, e.uncompressed_size, e.name);
    } else {
      throw Error(ErrorKind::MalformedArchive, "unsupported compression method for " + e.name);
    }
    if (out.size() != e.uncompressed_size || crc32_of(out) != e.crc32) {
      throw Error(ErrorKind::MalformedArchive, "checksum mismatch for " + e.name);
    }
    return out;
  }

 private:
  static Bytes inflate_raw(std::span<const std::uint8_t> in, std::size_t expected, const std::string& name) {
    Bytes out(expected);
    z_stream zs{};
    if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw Error(ErrorKind::MalformedArchive, "inflate init failed");
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    int rc = ::inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END) throw Error(ErrorKind::MalformedArchive, "corrupt deflate stream in " + name);
    out.resize(zs.total_out);
    return out;
  }

  void read_directory() {
    using namespace detail;
    if (data_.size() < 22) throw Error(ErrorKind::MalformedArchive, "archive too small");
    std::size_t lowest = data_.size() > 22 + 0xffff ? data_.size() - 22 - 0xffff : 0;
    std::size_t eocd = std::string::npos;
    for (std::size_t at = data_.size() - 22 + 1; at-- > lowest;) {
      if (u32(data_, at) == kEndSig) {
        eocd = at;
        break;
      }
    }
    if (eocd == std::string::npos) throw Error(ErrorKind::MalformedArchive, "end of central directory not found");

    std::size_t count = u16(data_, eocd + 10);
    std::size_t at = u32(data_, eocd + 16);
    entries_.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (u32(data_, at) != kCentralSig) throw Error(ErrorKind::MalformedArchive, "bad central directory record");
      Entry e;
      e.method = u16(data_, at + 10);
      e.crc32 = u32(data_, at + 16);
      e.compressed_size = u32(data_, at + 20);
      e.uncompressed_size = u32(data_, at + 24);
      std::size_t name_len = u16(data_, at + 28);
      std::size_t extra_len = u16(data_, at + 30);
      std::size_t comment_len = u16(data_, at + 32);
      e.local_header_offset = u32(data_, at + 42);
      if (at + 46 + name_len > data_.size()) throw Error(ErrorKind::MalformedArchive, "truncated file name");
      e.name.assign(reinterpret_cast<const char*>(data_.data() + at + 46), name_len);
      e.is_directory = !e.name.empty() && (e.name.back() == '/' || e.name.back() == '\\');
      entries_.push_back(std::move(e));
      at += 46 + name_len + extra_len + comment_len;
    }
  }

  std::span<const std::uint8_t> data_;
  std::vector<Entry> entries_;
};

/// Deterministic archive writer: fixed timestamps, members in insertion order.
class Writer {
 public:
  void add(std::string_view name, std::span<const std::uint8_t> content, bool compress = true) {
    using namespace detail;
    Entry e;
    e.name = std::string(name);
    e.crc32 = crc32_of(content);
    e.uncompressed_size = static_cast<std::uint32_t>(content.size());
    e.local_header_offset = static_cast<std::uint32_t>(out_.size());

    Bytes payload;
    if (compress && !content.empty()) {
      payload = deflate_raw(content);
      e.method = 8;
    }
    if (e.method == 0 || payload.size() >= content.size()) {
      payload.assign(content.begin(), content.end());
      e.method = 0;
    }
    e.compressed_size = static_cast<std::uint32_t>(payload.size());

    put32(out_, kLocalSig);
    put16(out_, 20);
    put16(out_, 0x0800);  // UTF-8 names
    put16(out_, e.method);
    put16(out_, 0);       // time
    put16(out_, 0x0021);  // 1980-01-01
    put32(out_, e.crc32);
    put32(out_, e.compressed_size);
    put32(out_, e.uncompressed_size);
    put16(out_, static_cast<std::uint16_t>(e.name.size()));
    put16(out_, 0);
    out_.insert(out_.end(), e.name.begin(), e.name.end());
    out_.insert(out_.end(), payload.begin(), payload.end());
    entries_.push_back(std::move(e));
  }

  void add(std::string_view name, std::string_view content, bool compress = true) {
    add(name, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(content.data()), content.size()),
        compress);
  }

  Bytes finish() && {
    using namespace detail;
    auto cd_start = static_cast<std::uint32_t>(out_.size());
    for (const auto& e : entries_) {
      put32(out_, kCentralSig);
      put16(out_, 20);
      put16(out_, 20);
      put16(out_, 0x0800);
      put16(out_, e.method);
      put16(out_, 0);
      put16(out_, 0x0021);
      put32(out_, e.crc32);
      put32(out_, e.compressed_size);
      put32(out_, e.uncompressed_size);
      put16(out_, static_cast<std::uint16_t>(e.name.size()));
      put16(out_, 0);
      put16(out_, 0);
      put16(out_, 0);
      put16(out_, 0);
      put32(out_, 0);
      put32(out_, e.local_header_offset);
      out_.insert(out_.end(), e.name.begin(), e.name.end());
    }
    auto cd_size = static_cast<std::uint32_t>(out_.size()) - cd_start;
    put32(out_, kEndSig);
    put16(out_, 0);
    put16(out_, 0);
    put16(out_, static_cast<std::uint16_t>(entries_.size()));
    put16(out_, static_cast<std::uint16_t>(entries_.size()));
    put32(out_, cd_size);
    put32(out_, cd_start);
    put16(out_, 0);
    return std::move(out_);
  }

 private:
  static Bytes deflate_raw(std::span<const std::uint8_t> in) {
    z_stream zs{};
    if (deflateInit2(&zs, 6, Z_DEFLATED, -MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
      throw Error(ErrorKind::Io, "deflate init failed");
    }
    Bytes out(deflateBound(&zs, static_cast<uLong>(in.size())));
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    int rc = ::deflate(&zs, Z_FINISH);
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) throw Error(ErrorKind::Io, "deflate failed");
    out.resize(zs.total_out);
    return out;
  }

  Bytes out_;
  std::vector<Entry> entries_;
};

}  // namespace deskvqa::zip
