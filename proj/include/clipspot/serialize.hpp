#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace clipspot::io {

using json = nlohmann::ordered_json;

// Raw little-endian array files. x86 is little-endian; values are written
// verbatim so round-trips are bit-exact.
template <class T>
void write_array(const std::filesystem::path& path, const T* data, std::size_t n) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

template <class T>
std::vector<T> read_array(const std::filesystem::path& path, std::size_t expected) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("missing array file: " + path.string());
    f.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(f.tellg());
    f.seekg(0, std::ios::beg);
    if (bytes != expected * sizeof(T))
        throw std::runtime_error("truncated array file: " + path.string());
    std::vector<T> out(expected);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw std::runtime_error("truncated array file: " + path.string());
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline json parse_manifest(const std::filesystem::path& path, const char* what) {
    if (!std::filesystem::exists(path)) throw std::runtime_error(std::string("missing manifest"));
    json j = json::parse(read_text(path), nullptr, false);
    if (j.is_discarded())
        throw std::runtime_error(std::string("malformed manifest: ") + what);
    return j;
}

}  // namespace clipspot::io
