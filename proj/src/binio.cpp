#include "triqdef/binio.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "triqdef/error.hpp"

namespace triqdef::binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace {

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

// Guards tensor headers against corrupt ranks before any allocation.
constexpr std::uint64_t kMaxRank = 8;

} // namespace

void Writer::bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }

void Writer::u32(std::uint32_t v) {
    v = to_little(v);
    bytes(&v, sizeof v);
}

void Writer::u64(std::uint64_t v) {
    v = to_little(v);
    bytes(&v, sizeof v);
}

void Writer::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void Writer::str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
}

void Writer::tensor(const Tensor& t) {
    u64(t.rank());
    for (auto d : t.shape()) u64(d);
    for (double v : t.values()) f64(v);
}

void Reader::fail(const std::string& what) const {
    throw DataError(source_ + ": " + what + " at offset " + std::to_string(pos_));
}

void Reader::bytes(void* out, std::size_t n) {
    if (n > data_.size() - pos_) fail("unexpected end of data reading " + std::to_string(n) + " bytes");
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
}

std::uint8_t Reader::u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
}

std::uint32_t Reader::u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return to_little(v);
}

std::uint64_t Reader::u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return to_little(v);
}

double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::str() {
    const std::uint64_t n = u64();
    if (n > data_.size() - pos_) fail("string length " + std::to_string(n) + " exceeds remaining data");
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
}

Tensor Reader::tensor() {
    const std::uint64_t rank = u64();
    if (rank > kMaxRank) fail("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
        d = u64();
        if (d != 0 && n > (data_.size() - pos_) / 8 / d + 1) fail("tensor extent exceeds remaining data");
        n *= d;
    }
    if (n * 8 > data_.size() - pos_) fail("tensor payload of " + std::to_string(n) + " values truncated");
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return Tensor(std::move(shape), std::move(v));
}

void Reader::expect_magic(const std::string& magic) {
    std::string got(magic.size(), '\0');
    if (data_.size() - pos_ < magic.size()) fail("file too short for magic '" + magic + "'");
    bytes(got.data(), got.size());
    if (got != magic) {
        pos_ -= magic.size();
        fail("bad magic (expected '" + magic + "')");
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& data) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError(path + ": cannot open for writing");
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) throw DataError(path + ": write failed");
    }
    std::filesystem::rename(tmp, path);
}

} // namespace triqdef::binio
