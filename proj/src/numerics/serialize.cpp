#include "clustr/serialize.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace clustr {

namespace {

constexpr std::array<char, 4> kMagic = {'C', 'T', 'R', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b.data(), b.size());
}

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b.data(), b.size());
}

template <std::size_t N>
std::array<unsigned char, N> get_bytes(std::istream& in) {
  std::array<unsigned char, N> b{};
  in.read(reinterpret_cast<char*>(b.data()), N);
  if (!in) throw FormatError("CTR1: truncated stream");
  return b;
}

std::uint32_t get_u32(std::istream& in) {
  auto b = get_bytes<4>(in);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  auto b = get_bytes<8>(in);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_ctr1(std::ostream& out, const Tensor<double>& tensor) {
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

Tensor<double> read_ctr1(std::istream& in) {
  auto magic = get_bytes<4>(in);
  if (std::memcmp(magic.data(), kMagic.data(), 4) != 0) throw FormatError("CTR1: bad magic bytes");
  const std::uint32_t rank = get_u32(in);
  if (rank > 16) throw FormatError("CTR1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(in);
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = std::bit_cast<double>(get_u64(in));
  return Tensor<double>(std::move(shape), std::move(data));
}

void save_ctr1(const std::filesystem::path& path, const Tensor<double>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_ctr1(out, tensor);
}

Tensor<double> load_ctr1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_ctr1(in);
}

Tensor<double> load_csv_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<double> data;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        data.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError("CSV: not a number '" + cell + "' on row " + std::to_string(rows + 1));
      }
      ++n;
    }
    if (n == 0) continue;
    if (rows == 0) cols = n;
    if (n != cols) throw FormatError("CSV: ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  if (rows == 0) throw FormatError("CSV: no rows in " + path.string());
  return Tensor<double>({rows, cols}, std::move(data));
}

}  // namespace clustr
