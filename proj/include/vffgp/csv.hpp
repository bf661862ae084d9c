#pragma once

#include <Eigen/Core>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "vffgp/errors.hpp"

namespace vffgp {

// Comma-separated values with '.' decimal separator and a mandatory header
// row.  All numeric IO in the project goes through here so files round-trip
// byte-identically.

struct CsvTable {
  std::vector<std::string> columns;
  Eigen::MatrixXd data;  // one row per record

  [[nodiscard]] Eigen::Index column_index(std::string_view name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return Eigen::Index(i);
    throw data_error("csv: no column named '" + std::string(name) + "'");
  }
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline double parse_double(std::string_view field, std::size_t line_no) {
  field = trim(field);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size())
    throw data_error("csv: bad numeric field '" + std::string(field) + "' on line " +
                     std::to_string(line_no));
  return value;
}

}  // namespace detail

[[nodiscard]] inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("csv: cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw data_error("csv: '" + path + "' is empty; header required");
  CsvTable table;
  for (auto f : detail::split_fields(line)) table.columns.emplace_back(detail::trim(f));
  if (table.columns.empty() || table.columns[0].empty())
    throw data_error("csv: '" + path + "' has an empty header");

  std::vector<double> values;
  std::size_t rows = 0, line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_fields(line);
    if (fields.size() != table.columns.size())
      throw data_error("csv: line " + std::to_string(line_no) + " has " +
                       std::to_string(fields.size()) + " fields, expected " +
                       std::to_string(table.columns.size()));
    for (auto f : fields) values.push_back(detail::parse_double(f, line_no));
    ++rows;
  }
  const Eigen::Index cols = Eigen::Index(table.columns.size());
  table.data.resize(Eigen::Index(rows), cols);
  for (Eigen::Index i = 0; i < table.data.rows(); ++i)
    for (Eigen::Index j = 0; j < cols; ++j) table.data(i, j) = values[std::size_t(i * cols + j)];
  return table;
}

// Shortest representation that round-trips a double exactly.
[[nodiscard]] inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    double back = 0.0;
    std::from_chars(buf, buf + std::strlen(buf), back);
    if (back == v) break;
  }
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns) : out_(path) {
    if (!out_) throw data_error("csv: cannot write '" + path + "'");
    n_cols_ = columns.size();
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (i) out_ << ',';
      out_ << columns[i];
    }
    out_ << '\n';
  }

  void write_row(const Eigen::VectorXd& row) {
    if (std::size_t(row.size()) != n_cols_) throw data_error("csv: row width mismatch");
    for (Eigen::Index i = 0; i < row.size(); ++i) {
      if (i) out_ << ',';
      out_ << format_double(row[i]);
    }
    out_ << '\n';
  }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  std::size_t n_cols_ = 0;
};

inline void write_csv(const std::string& path, const std::vector<std::string>& columns,
                      const Eigen::MatrixXd& data) {
  if (Eigen::Index(columns.size()) != data.cols())
    throw data_error("csv: column count mismatch");
  CsvWriter w(path, columns);
  for (Eigen::Index i = 0; i < data.rows(); ++i) w.write_row(data.row(i).transpose());
}

}  // namespace vffgp
