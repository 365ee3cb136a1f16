#include "cadapt/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cadapt/errors.hpp"

namespace cadapt {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw DataError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void BinaryWriter::u32(std::uint32_t v) { buf_.append(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::u64(std::uint64_t v) { buf_.append(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::f64(double v) { buf_.append(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::f64s(std::span<const double> v) {
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
}
void BinaryWriter::bytes(std::string_view s) { buf_.append(s); }

BinaryReader::BinaryReader(const std::filesystem::path& path) : name_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + name_);
    std::ostringstream ss;
    ss << in.rdbuf();
    buf_ = ss.str();
}

void BinaryReader::need(std::size_t n) {
    if (buf_.size() - pos_ < n) throw DataError(name_ + ": truncated file");
}

std::uint32_t BinaryReader::u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
}

std::uint64_t BinaryReader::u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf_.data() + pos_, 8);
    pos_ += 8;
    return v;
}

double BinaryReader::f64() {
    need(8);
    double v;
    std::memcpy(&v, buf_.data() + pos_, 8);
    pos_ += 8;
    return v;
}

std::vector<double> BinaryReader::f64s(std::size_t count) {
    need(count * 8);
    std::vector<double> v(count);
    std::memcpy(v.data(), buf_.data() + pos_, count * 8);
    pos_ += count * 8;
    return v;
}

std::string BinaryReader::bytes(std::size_t count) {
    need(count);
    std::string s = buf_.substr(pos_, count);
    pos_ += count;
    return s;
}

}  // namespace cadapt
