#pragma once

// CSV ingestion and output for datasets. Columns: z1..zp, a, m, y, and
// optionally u and a2; a header row is required and every value is 0 or 1.

#include "bdf/model_core.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>

namespace bdf {

Dataset read_dataset_csv(std::istream& in);
Dataset read_dataset_csv(const std::filesystem::path& path);
void write_dataset_csv(const Dataset& data, std::ostream& out);
void write_dataset_csv(const Dataset& data, const std::filesystem::path& path);

// Writes text to a file, creating parent directories; IoError on failure.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

} // namespace bdf
