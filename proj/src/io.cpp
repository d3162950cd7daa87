#include "rtsd/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "rtsd/errors.hpp"

namespace rtsd::io {

static_assert(sizeof(double) == 8);

namespace {

// Storage is little-endian on disk regardless of host order.
void to_little_endian(std::vector<double>& data) {
  if constexpr (std::endian::native == std::endian::big) {
    for (double& d : data) {
      uint64_t u;
      std::memcpy(&u, &d, 8);
      u = __builtin_bswap64(u);
      std::memcpy(&d, &u, 8);
    }
  }
}

}  // namespace

void write_f64(const std::filesystem::path& file, const std::vector<double>& data) {
  std::vector<double> buf = data;
  to_little_endian(buf);
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + file.string());
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * 8));
  if (!os) throw IoError("write failed: " + file.string());
}

std::vector<double> read_f64(const std::filesystem::path& file, size_t expected_count) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(file, ec);
  if (ec) throw IoError("cannot stat: " + file.string());
  if (bytes != expected_count * 8)
    throw FormatError("array file " + file.string() + ": expected " +
                      std::to_string(expected_count * 8) + " bytes, found " +
                      std::to_string(bytes));
  std::vector<double> data(expected_count);
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot open: " + file.string());
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw IoError("read failed: " + file.string());
  to_little_endian(data);
  return data;
}

nlohmann::json read_json(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot open: " + file.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("invalid JSON in " + file.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& file, const nlohmann::json& j) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + file.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed: " + file.string());
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + file.string());
  os << text;
  if (!os) throw IoError("write failed: " + file.string());
}

}  // namespace rtsd::io
