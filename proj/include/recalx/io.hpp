#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "recalx/core.hpp"

namespace recalx {

/// CSV with a header row; the column named `label` holds the class index and all
/// other columns are numeric features in header order. When `class_count` is not
/// given it is inferred as max(label) + 1 (at least 2).
Dataset read_dataset_csv(const std::filesystem::path& path,
                         std::optional<std::size_t> class_count = std::nullopt);
Dataset parse_dataset_csv(const std::string& text,
                          std::optional<std::size_t> class_count = std::nullopt);

/// Writes features as x0..x{d-1} followed by `label`.
std::string dataset_to_csv(const Dataset& data);
void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);

nlohmann::json read_json_file(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace recalx
