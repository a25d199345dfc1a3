#pragma once

// Labeled dataset files.
//
// CSV: a header "label,f0,...,f{d-1}" followed by one row per item with an
// integer label and d real features.
// Binary: "MFT1", u32 count, u32 dim, count*dim little-endian f64 features,
// then count u32 labels.

#include <filesystem>
#include <iosfwd>

#include "metaforge/tasks.hpp"

namespace metaforge::tasks {

LabeledDataset read_csv_dataset(std::istream& in);
void write_csv_dataset(std::ostream& out, const LabeledDataset& data);

LabeledDataset read_binary_dataset(std::istream& in);
void write_binary_dataset(std::ostream& out, const LabeledDataset& data);

// Picks the format from the leading magic bytes.
LabeledDataset load_dataset(const std::filesystem::path& path);

}  // namespace metaforge::tasks
