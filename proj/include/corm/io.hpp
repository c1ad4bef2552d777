// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

namespace corm {

/// Shortest decimal form that parses back to the same double.
std::string format_number(double value);

/// Replaces the file's contents; throws corm::Error on failure.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace corm
