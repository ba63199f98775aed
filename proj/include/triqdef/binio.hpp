#pragma once

// Little-endian binary encoding shared by the patch and checkpoint
// containers. Integers are fixed width, doubles are raw IEEE-754 bits and
// strings/blobs carry a u64 length prefix.

#include <cstdint>
#include <string>
#include <vector>

#include "triqdef/tensor.hpp"

namespace triqdef::binio {

class Writer {
public:
    void bytes(const void* data, std::size_t n);
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f64(double v);
    void str(const std::string& s);
    /// Shape (u64 rank, u64 dims) followed by the raw values.
    void tensor(const Tensor& t);

    const std::string& buffer() const { return buf_; }

private:
    std::string buf_;
};

/// Reads from an in-memory buffer. Errors are DataError naming the source
/// and byte offset.
class Reader {
public:
    Reader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

    void bytes(void* out, std::size_t n);
    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64();
    std::string str();
    Tensor tensor();
    /// Throws unless the next bytes equal `magic`.
    void expect_magic(const std::string& magic);

    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == data_.size(); }
    [[noreturn]] void fail(const std::string& what) const;

private:
    std::string data_;
    std::string source_;
    std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
/// Writes via a temporary file and rename so readers never see a partial file.
void write_file(const std::string& path, const std::string& data);

} // namespace triqdef::binio
