#include "metaforge/dataset_io.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

namespace metaforge::tasks {

namespace {

constexpr char kMagic[4] = {'M', 'F', 'T', '1'};

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <class T>
T parse_number(const std::string& cell, std::size_t line_no) {
  T value{};
  const char* end = cell.data() + cell.size();
  const auto [ptr, ec] = std::from_chars(cell.data(), end, value);
  if (ec != std::errc() || ptr != end)
    throw TaskError("csv line " + std::to_string(line_no) + ": cannot parse '" + cell + "'");
  return value;
}

std::uint32_t read_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw TaskError("binary dataset: truncated");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

void write_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max())
    throw TaskError(std::string("binary dataset: ") + what + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

LabeledDataset read_csv_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw TaskError("csv: missing header");
  const auto header = split_commas(line);
  if (header.size() < 2 || header[0] != "label")
    throw TaskError("csv: header must be label,f0,...");
  for (std::size_t j = 1; j < header.size(); ++j)
    if (header[j] != "f" + std::to_string(j - 1))
      throw TaskError("csv: header column " + std::to_string(j) + " should be f" +
                      std::to_string(j - 1) + ", got '" + header[j] + "'");
  LabeledDataset data;
  data.dim = header.size() - 1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_commas(line);
    if (cells.size() != header.size())
      throw TaskError("csv line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " columns, got " +
                      std::to_string(cells.size()));
    data.labels.push_back(parse_number<std::int64_t>(cells[0], line_no));
    for (std::size_t j = 1; j < cells.size(); ++j)
      data.features.push_back(parse_number<double>(cells[j], line_no));
  }
  return data;
}

void write_csv_dataset(std::ostream& out, const LabeledDataset& data) {
  out << "label";
  for (std::size_t j = 0; j < data.dim; ++j) out << ",f" << j;
  out << '\n';
  std::array<char, 64> buf{};
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.labels[i];
    for (double v : data.row(i)) {
      const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
      out << ',' << std::string_view(buf.data(), static_cast<std::size_t>(res.ptr - buf.data()));
    }
    out << '\n';
  }
}

LabeledDataset read_binary_dataset(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw TaskError("binary dataset: bad magic");
  const std::uint32_t count = read_u32(in);
  const std::uint32_t dim = read_u32(in);
  LabeledDataset data;
  data.dim = dim;
  data.features.resize(static_cast<std::size_t>(count) * dim);
  for (double& v : data.features) {
    const std::uint64_t lo = read_u32(in);
    const std::uint64_t hi = read_u32(in);
    v = std::bit_cast<double>(lo | hi << 32);
  }
  data.labels.resize(count);
  for (auto& label : data.labels) label = read_u32(in);
  return data;
}

void write_binary_dataset(std::ostream& out, const LabeledDataset& data) {
  out.write(kMagic, 4);
  write_u32(out, checked_u32(data.size(), "count"));
  write_u32(out, checked_u32(data.dim, "dim"));
  for (double v : data.features) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    write_u32(out, static_cast<std::uint32_t>(bits));
    write_u32(out, static_cast<std::uint32_t>(bits >> 32));
  }
  for (auto label : data.labels) {
    if (label < 0) throw TaskError("binary dataset: negative label");
    write_u32(out, checked_u32(static_cast<std::size_t>(label), "label"));
  }
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TaskError("cannot open dataset " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  const bool binary = in.gcount() == 4 && std::memcmp(magic, kMagic, 4) == 0;
  in.clear();
  in.seekg(0);
  return binary ? read_binary_dataset(in) : read_csv_dataset(in);
}

}  // namespace metaforge::tasks
