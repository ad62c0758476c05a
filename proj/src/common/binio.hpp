// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "common/error.hpp"

namespace tdnnq {

// Little-endian binary writer/reader used by all on-disk formats.
// The reader carries a "section" label so truncation and corruption
// errors name the part of the file that failed.

class BinWriter {
public:
  explicit BinWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) raise(ErrorKind::io, "cannot open for writing: " + path);
  }

  void magic(const char tag[4]) { out_.write(tag, 4); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void i32(std::int32_t v) { raw(&v, 4); }
  void i64(std::int64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }

  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    if (!s.empty()) out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  template <typename T>
  void array(const std::vector<T>& v) {
    if (!v.empty()) out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  }

  void finish() {
    out_.flush();
    if (!out_) raise(ErrorKind::io, "write failed: " + path_);
  }

private:
  void raw(const void* p, std::size_t n) { out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n)); }

  std::string path_;
  std::ofstream out_;
};

class BinReader {
public:
  explicit BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) raise(ErrorKind::io, "cannot open for reading: " + path);
  }

  void section(const std::string& name) { section_ = name; }
  const std::string& section() const { return section_; }

  void expect_magic(const char tag[4], const std::string& what) {
    char buf[4] = {0, 0, 0, 0};
    raw(buf, 4);
    if (std::memcmp(buf, tag, 4) != 0) raise(ErrorKind::format, path_ + ": bad magic in " + what);
  }

  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::int32_t i32() { return get<std::int32_t>(); }
  std::int64_t i64() { return get<std::int64_t>(); }
  float f32() { return get<float>(); }
  double f64() { return get<double>(); }

  std::string str() {
    std::uint32_t n = u32();
    if (n > (1u << 24)) raise(ErrorKind::format, path_ + ": implausible string length in " + section_);
    std::string s(n, '\0');
    if (n) raw(s.data(), n);
    return s;
  }

  template <typename T>
  std::vector<T> array(std::size_t n) {
    std::vector<T> v(n);
    if (n) raw(v.data(), n * sizeof(T));
    return v;
  }

  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

private:
  template <typename T>
  T get() {
    T v{};
    raw(&v, sizeof(T));
    return v;
  }

  void raw(void* p, std::size_t n) {
    in_.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      raise(ErrorKind::format, path_ + ": truncated while reading " + (section_.empty() ? "header" : section_));
  }

  std::string path_;
  std::ifstream in_;
  std::string section_;
};

}  // namespace tdnnq
