#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "consisid/errors.hpp"

namespace csid::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class BinaryWriter {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void put_bytes(std::string_view bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
    template <typename T>
    void put_array(const T* data, std::size_t n) {
        const auto* p = reinterpret_cast<const char*>(data);
        buf_.insert(buf_.end(), p, p + n * sizeof(T));
    }
    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class BinaryReader {
public:
    explicit BinaryReader(std::vector<char> data) : data_(std::move(data)) {}

    template <typename T>
    T get() {
        T v;
        need(sizeof(T));
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    template <typename T>
    void get_array(T* out, std::size_t n) {
        need(n * sizeof(T));
        std::memcpy(out, data_.data() + pos_, n * sizeof(T));
        pos_ += n * sizeof(T);
    }
    bool at_end() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw CorruptFileError("truncated file");
    }
    std::vector<char> data_;
    std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::string& path);
// Writes to a temporary sibling and renames, so readers never see a partial file.
void write_file_atomic(const std::string& path, const std::vector<char>& bytes);
void write_text_atomic(const std::string& path, std::string_view text);

}  // namespace csid::io
