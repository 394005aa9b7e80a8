#include "orgapipe/table.hpp"

#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>

#include "orgapipe/error.hpp"

namespace orgapipe {

std::optional<std::size_t> TabularData::column_index(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return i;
  return std::nullopt;
}

std::string format_number(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::general, 9);
  return std::string(buf, res.ptr);
}

std::optional<double> parse_number(std::string_view text) {
  if (text.empty()) return std::nullopt;
  if (text.front() == '+') text.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) return std::nullopt;
  return v;
}

namespace {

void write_field(std::ostream& out, const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) {
    out << s;
    return;
  }
  out << '"';
  for (char c : s) {
    if (c == '"') out << '"';
    out << c;
  }
  out << '"';
}

void write_cell(std::ostream& out, const Cell& cell) {
  if (const auto* d = std::get_if<double>(&cell)) out << format_number(*d);
  else if (const auto* s = std::get_if<std::string>(&cell)) write_field(out, *s);
}

}  // namespace

void write_csv(const TabularData& table, std::ostream& out) {
  for (std::size_t i = 0; i < table.columns.size(); ++i) {
    if (i) out << ',';
    write_field(out, table.columns[i]);
  }
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      write_cell(out, row[i]);
    }
    out << '\n';
  }
}

std::string to_csv(const TabularData& table) {
  std::ostringstream out;
  write_csv(table, out);
  return out.str();
}

TabularData read_csv(std::istream& in) {
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  std::vector<std::vector<Cell>> records;
  std::vector<Cell> record;
  std::string field;
  bool quoted = false, was_quoted = false, field_started = false;

  auto end_field = [&] {
    if (field.empty() && !was_quoted) record.emplace_back(std::monostate{});
    else record.emplace_back(field);
    field.clear();
    was_quoted = false;
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"' && !field_started) {
      quoted = was_quoted = field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      end_record();
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) throw Error(ErrorKind::format, "unterminated quoted CSV field");
  if (field_started || !record.empty()) end_record();
  if (records.empty()) throw Error(ErrorKind::format, "CSV has no header row");

  TabularData table;
  for (auto& cell : records.front()) {
    const auto* s = std::get_if<std::string>(&cell);
    table.columns.push_back(s ? *s : std::string{});
  }
  for (std::size_t r = 1; r < records.size(); ++r) {
    auto& row = records[r];
    if (row.size() != table.columns.size())
      throw Error(ErrorKind::format, "CSV row " + std::to_string(r) + " has " + std::to_string(row.size()) +
                                         " fields, expected " + std::to_string(table.columns.size()));
    table.rows.push_back(std::move(row));
  }
  return table;
}

TabularData read_csv_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  return read_csv(in);
}

}  // namespace orgapipe
