// SPDX-License-Identifier: Apache-2.0
#include "corm/io.hpp"

#include "corm/error.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace corm {

std::string format_number(double value) {
  char buf[32];
  const auto result = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, result.ptr);
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("write(" + path.string() + ")", "cannot open for writing");
  out << text;
  if (!out) throw Error("write(" + path.string() + ")", "write failed");
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read(" + path.string() + ")", "cannot open");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace corm
