#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cadapt {

/// Writes to `<path>.tmp` and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Little-endian flat binary helpers for checkpoint files.
class BinaryWriter {
public:
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void f64s(std::span<const double> v);
    void bytes(std::string_view s);
    const std::string& buffer() const { return buf_; }

private:
    std::string buf_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::filesystem::path& path);
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::vector<double> f64s(std::size_t count);
    std::string bytes(std::size_t count);
    bool at_end() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n);
    std::string buf_;
    std::size_t pos_ = 0;
    std::string name_;
};

}  // namespace cadapt
