// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/checkpoint.hpp"

#include <fstream>
#include <unordered_map>

#include "binary_io.hpp"
#include "sparsedet/errors.hpp"

namespace sparsedet {

namespace {
// Guards against reading garbage as an enormous allocation.
constexpr std::uint64_t kMaxNameLen = 1 << 16;
constexpr std::uint64_t kMaxRank = 16;
}  // namespace

void write_records(std::ostream& os, const std::vector<TensorRecord>& records) {
  for (const auto& r : records) {
    if (shape_numel(r.shape) != r.data.size()) {
      throw DimensionError("checkpoint record '" + r.name + "': shape " +
                           shape_str(r.shape) + " does not match data");
    }
    binary::write_u64(os, r.name.size());
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    binary::write_u64(os, r.shape.size());
    for (auto d : r.shape) binary::write_u64(os, d);
    for (double v : r.data) binary::write_f64(os, v);
  }
}

std::vector<TensorRecord> read_records(std::istream& is) {
  std::vector<TensorRecord> out;
  std::uint64_t name_len;
  while (binary::try_read_u64(is, name_len)) {
    if (name_len > kMaxNameLen) throw InputError("checkpoint: bad name length");
    TensorRecord r;
    r.name.resize(name_len);
    if (!is.read(r.name.data(), static_cast<std::streamsize>(name_len))) {
      throw InputError("checkpoint: truncated name");
    }
    const std::uint64_t rank = binary::read_u64(is);
    if (rank > kMaxRank) throw InputError("checkpoint: bad rank for " + r.name);
    for (std::uint64_t i = 0; i < rank; ++i) {
      r.shape.push_back(binary::read_u64(is));
    }
    r.data.resize(shape_numel(r.shape));
    for (auto& v : r.data) v = binary::read_f64(is);
    out.push_back(std::move(r));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<Parameter>& params) {
  std::vector<TensorRecord> records;
  records.reserve(params.size());
  for (const auto& p : params) {
    records.push_back({p.name, p.tensor.shape(),
                       {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write checkpoint " + path.string());
  write_records(os, records);
}

void load_checkpoint(const std::filesystem::path& path,
                     std::vector<Parameter>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot read checkpoint " + path.string());
  std::unordered_map<std::string, TensorRecord> by_name;
  for (auto& r : read_records(is)) by_name.emplace(r.name, std::move(r));
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      throw InputError("checkpoint is missing parameter " + p.name);
    }
    if (it->second.shape != p.tensor.shape()) {
      throw InputError("checkpoint shape mismatch for " + p.name + ": " +
                       shape_str(it->second.shape) + " vs " +
                       shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(it->second.data.begin(), it->second.data.end(), dst.begin());
  }
}

}  // namespace sparsedet
