#include "ecoate/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include "ecoate/error.hpp"

namespace ecoate {

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

SiteDataset::SiteDataset(int id, RowMatrix x_, Eigen::VectorXi a_, Eigen::VectorXd y_)
    : site_id(id), x(std::move(x_)), a(std::move(a_)), y(std::move(y_)) {
  if (x.rows() != y.size() || a.size() != y.size())
    throw DimensionMismatch("site dataset columns have unequal lengths");
  for (int i = 0; i < a.size(); ++i)
    if (a[i] != 0 && a[i] != 1) throw DomainError("treatment must be 0 or 1");
}

int SiteDataset::arm_count(int arm) const { return static_cast<int>((a.array() == arm).count()); }

SiteDataset parse_csv(const std::string& text, int site_id, const std::string& origin) {
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw IoError(origin + ": empty table");
  auto header = split_row(trim(line));
  int iy = -1, ia = -1;
  std::vector<int> ix;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const auto& h = header[c];
    if (h == "y") {
      iy = c;
    } else if (h == "a") {
      ia = c;
    } else if (h.size() > 1 && h[0] == 'x') {
      int j = 0;
      auto [p, ec] = std::from_chars(h.data() + 1, h.data() + h.size(), j);
      if (ec != std::errc() || p != h.data() + h.size() || j < 1) throw IoError(origin + ": bad column '" + h + "'");
      if (static_cast<int>(ix.size()) < j) ix.resize(j, -1);
      ix[j - 1] = c;
    } else {
      throw IoError(origin + ": unexpected column '" + h + "'");
    }
  }
  if (iy < 0 || ia < 0) throw IoError(origin + ": header must contain y and a");
  for (std::size_t j = 0; j < ix.size(); ++j)
    if (ix[j] < 0) throw IoError(origin + ": missing column x" + std::to_string(j + 1));

  std::vector<double> xs, ys;
  std::vector<int> as;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    auto cells = split_row(line);
    if (cells.size() != header.size())
      throw IoError(origin + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) + " fields");
    auto number = [&](int c) {
      const auto& s = cells[c];
      double v = 0.0;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (s.empty() || ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
        throw IoError(origin + ":" + std::to_string(lineno) + ": missing or invalid value in column '" + header[c] + "'");
      return v;
    };
    ys.push_back(number(iy));
    double av = number(ia);
    if (av != 0.0 && av != 1.0) throw IoError(origin + ":" + std::to_string(lineno) + ": treatment must be 0 or 1");
    as.push_back(static_cast<int>(av));
    for (int c : ix) xs.push_back(number(c));
  }
  int n = static_cast<int>(ys.size());
  int d = static_cast<int>(ix.size());
  RowMatrix x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = xs[static_cast<std::size_t>(i) * d + j];
  return SiteDataset(site_id, std::move(x), Eigen::Map<Eigen::VectorXi>(as.data(), n),
                     Eigen::Map<Eigen::VectorXd>(ys.data(), n));
}

SiteDataset read_csv(const std::filesystem::path& path, int site_id) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), site_id, path.string());
}

void write_csv(const SiteDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "y,a";
  for (int j = 0; j < data.dim(); ++j) out << ",x" << j + 1;
  out << '\n';
  for (int i = 0; i < data.size(); ++i) {
    out << expr::format_number(data.y[i]) << ',' << data.a[i];
    for (int j = 0; j < data.dim(); ++j) out << ',' << expr::format_number(data.x(i, j));
    out << '\n';
  }
}

}  // namespace ecoate
