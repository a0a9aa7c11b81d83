#pragma once

// Small CSV helpers. Reals are written with shortest round-trip formatting so
// a re-parse reproduces every value bit-exactly.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace flexi {

std::string format_double_exact(double x);
/// Throws std::invalid_argument unless the whole string is a real number.
double parse_double_exact(std::string_view s);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const;
};

void write_csv(const CsvTable& table, const std::filesystem::path& path);
CsvTable read_csv(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace flexi
