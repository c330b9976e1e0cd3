// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace hcls {

std::string read_text_file(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

/// Throws UsageError naming the first key of `j` not in `known`.
void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                         const std::string& what);

}  // namespace hcls
