#include "flexi/report_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <system_error>

namespace flexi {

std::string format_double_exact(double x) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
    if (ec != std::errc()) throw std::runtime_error("format_double_exact: to_chars failed");
    return std::string(buf, ptr);
}

double parse_double_exact(std::string_view s) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw std::invalid_argument("not a real number: '" + std::string(s) + "'");
    }
    return v;
}

std::size_t CsvTable::column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    throw std::out_of_range("csv: no column '" + std::string(name) + "'");
}

namespace {

std::string join(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += fields[i];
    }
    return out;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

void write_csv(const CsvTable& table, const std::filesystem::path& path) {
    std::string text = join(table.header) + "\n";
    for (const auto& r : table.rows) text += join(r) + "\n";
    write_text(path, text);
}

CsvTable read_csv(const std::filesystem::path& path) {
    std::istringstream is(read_text(path));
    CsvTable t;
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": empty csv");
    t.header = split(line);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        t.rows.push_back(split(line));
    }
    return t;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace flexi
