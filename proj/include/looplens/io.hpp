#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace looplens {

// 17 significant digits: round-trip exact for 64-bit reals.
std::string format_g17(double v);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

/// CSV emitter that checks every row against the declared column schema
/// before writing.
class CsvWriter {
 public:
  CsvWriter(std::ostream& os, const std::vector<std::string>& columns);
  void row(const std::vector<std::string>& fields);

 private:
  std::ostream& os_;
  std::size_t arity_;
};

}  // namespace looplens
