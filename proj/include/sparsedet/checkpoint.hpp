// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file: a flat sequence of records, all integers little-endian
// u64 and all values little-endian IEEE-754 binary64:
//
//   name_len | name bytes | ndim | dim_0 .. dim_{ndim-1} | values...
//
// There is no header or trailer; the file ends after the last record.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sparsedet/tensor.hpp"

namespace sparsedet {

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

void write_records(std::ostream& os, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> read_records(std::istream& is);

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<Parameter>& params);
// Copies stored values into the matching parameters (by name). Every
// parameter must be present with an identical shape; throws InputError
// otherwise.
void load_checkpoint(const std::filesystem::path& path,
                     std::vector<Parameter>& params);

}  // namespace sparsedet
