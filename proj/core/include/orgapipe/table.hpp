#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace orgapipe {

/// Absent, numeric or text cell.
using Cell = std::variant<std::monostate, double, std::string>;

struct TabularData {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  std::optional<std::size_t> column_index(const std::string& name) const;
  friend bool operator==(const TabularData&, const TabularData&) = default;
};

/// Shortest general-format rendering with at most 9 significant digits; locale independent.
std::string format_number(double value);

/// Parses the full string as a floating-point number; nullopt on any trailing garbage.
std::optional<double> parse_number(std::string_view text);

/// RFC-4180 output with LF line endings. Fields holding a comma, quote, CR or LF are quoted.
void write_csv(const TabularData& table, std::ostream& out);
std::string to_csv(const TabularData& table);

/// Reads RFC-4180 text (LF or CRLF). The first record is the header. Empty fields become
/// absent cells, every other field is kept as text.
TabularData read_csv(std::istream& in);
TabularData read_csv_file(const std::filesystem::path& path);

}  // namespace orgapipe
