#include "rsd/io.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rsd {

namespace {

void write_i64(std::ofstream& out, std::int64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::int64_t read_i64(std::ifstream& in, const std::string& path) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw IoError("truncated dataset header in " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<std::int64_t>(v);
}

static_assert(sizeof(double) == 8);

}  // namespace

void write_dataset(const std::string& path, const Samples& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(kDatasetMagic, 8);
  write_i64(out, samples.cols());
  write_i64(out, samples.rows());
  write_i64(out, 1);
  out.write(reinterpret_cast<const char*>(samples.data()),
            static_cast<std::streamsize>(sizeof(double) * samples.size()));
  if (!out) throw IoError("write failed for " + path);
}

Samples read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("dataset file not found: " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kDatasetMagic, 8) != 0) throw IoError("bad dataset magic in " + path);
  const auto d = read_i64(in, path);
  const auto n = read_i64(in, path);
  const auto dtype = read_i64(in, path);
  if (dtype != 1) throw IoError("unsupported dataset dtype " + std::to_string(dtype) + " in " + path);
  if (d < 1 || n < 0) throw IoError("bad dataset shape in " + path);
  Samples s(n, d);
  if (!in.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(sizeof(double) * s.size()))) {
    throw IoError("truncated dataset body in " + path);
  }
  return s;
}

std::string format_double(double value) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

void write_matrix_csv(const std::string& path, const Matrix& m) {
  std::ostringstream os;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) os << ',';
      os << format_double(m(i, j));
    }
    os << '\n';
  }
  write_text_file(path, os.str());
}

Matrix read_matrix_csv(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (start <= line.size()) {
      auto end = line.find(',', start);
      if (end == std::string::npos) end = line.size();
      std::string cell = line.substr(start, end - start);
      while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\r')) cell.pop_back();
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size()) {
        throw IoError("bad number '" + cell + "' in " + path + " row " + std::to_string(rows.size() + 1));
      }
      row.push_back(v);
      start = end + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw IoError("ragged row " + std::to_string(rows.size() + 1) + " in " + path);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("empty matrix file " + path);
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

void CsvWriter::add_row(std::vector<std::string> cells) {
  RSD_REQUIRE(cells.size() == header_.size(), "csv row has ", cells.size(), " cells, header has ", header_.size());
  rows_.push_back(std::move(cells));
}

std::string CsvWriter::str() const {
  std::string out;
  auto emit = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  emit(header_);
  for (const auto& r : rows_) emit(r);
  return out;
}

void CsvWriter::save(const std::string& path) const { write_text_file(path, str()); }

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace rsd
