#pragma once

#include <cstddef>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace memprobe::csv {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct Row {
  std::size_t line = 0;  // 1-based line where the row starts
  std::vector<std::string> fields;
};

// RFC 4180: comma separated, double-quoted fields may contain commas,
// quotes ("") and newlines. Blank lines are skipped.
std::vector<Row> parse(std::string_view text);

std::string escape(std::string_view field);
std::string format_row(const std::vector<std::string>& fields);
void write_row(std::ostream& os, const std::vector<std::string>& fields);

}  // namespace memprobe::csv
