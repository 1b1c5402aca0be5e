#pragma once

// File formats shared by the library and the CLI.
//
// Dataset binary (little-endian):
//   bytes 0..7   magic "RSDDATA1"
//   int64        d
//   int64        N
//   int64        dtype tag (1 = float64)
//   N*d float64  samples, row-major
//
// CSV: comma-separated, '\n' line ends, doubles printed with 17 significant
// digits so a value read back is bit-identical.

#include <string>
#include <vector>

#include "rsd/common.hpp"

namespace rsd {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kDatasetMagic[8] = {'R', 'S', 'D', 'D', 'A', 'T', 'A', '1'};

void write_dataset(const std::string& path, const Samples& samples);
Samples read_dataset(const std::string& path);

// Round-trip formatting of a double (shortest repr that reads back exactly).
std::string format_double(double value);

void write_matrix_csv(const std::string& path, const Matrix& m);
Matrix read_matrix_csv(const std::string& path);

// Header line plus rows of pre-formatted cells.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}
  void add_row(std::vector<std::string> cells);
  std::string str() const;
  void save(const std::string& path) const;
  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace rsd
