#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace foamqc {

// Exit codes: 0 success, 1 usage or validation error, 2 anything else.
int cli_main(int argc, const char* const* argv);

// Built-in defaults of the flat configuration (every setting by name).
nlohmann::json default_settings();

// Git blob hash ("blob <size>\0" + bytes, SHA-1) of a file; for a directory,
// the SHA-1 of the sorted "<blob hash> <relative path>\n" listing of its files.
std::string content_hash(const std::filesystem::path& path);

}  // namespace foamqc
