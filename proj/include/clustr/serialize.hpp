#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "clustr/tensor.hpp"

namespace clustr {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// CTR1 layout: magic "CTR1", u32 rank, u32 dims[rank], then little-endian IEEE-754
// binary64 values in row-major order. All integers are little-endian.
void write_ctr1(std::ostream& out, const Tensor<double>& tensor);
Tensor<double> read_ctr1(std::istream& in);

void save_ctr1(const std::filesystem::path& path, const Tensor<double>& tensor);
Tensor<double> load_ctr1(const std::filesystem::path& path);

/// Numeric CSV, one token per line. Blank lines and lines starting with '#' are skipped.
Tensor<double> load_csv_matrix(const std::filesystem::path& path);

}  // namespace clustr
