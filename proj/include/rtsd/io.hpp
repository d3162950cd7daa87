#ifndef RTSD_IO_HPP
#define RTSD_IO_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace rtsd::io {

// Raw little-endian float64 arrays; shapes live in the manifest only.
void write_f64(const std::filesystem::path& file, const std::vector<double>& data);
std::vector<double> read_f64(const std::filesystem::path& file, size_t expected_count);

nlohmann::json read_json(const std::filesystem::path& file);
void write_json(const std::filesystem::path& file, const nlohmann::json& j);

// Plain text (CSV, summaries).
void write_text(const std::filesystem::path& file, const std::string& text);

}  // namespace rtsd::io

#endif
