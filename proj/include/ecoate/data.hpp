#pragma once

#include <filesystem>
#include <span>
#include <string>

#include <Eigen/Dense>

#include "ecoate/expr.hpp"

namespace ecoate {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Individual-level records for one site. Row i of `x` holds the covariates of record i.
struct SiteDataset {
  int site_id = 0;
  RowMatrix x;
  Eigen::VectorXi a;
  Eigen::VectorXd y;

  SiteDataset() = default;
  SiteDataset(int id, RowMatrix x_, Eigen::VectorXi a_, Eigen::VectorXd y_);

  int size() const { return static_cast<int>(y.size()); }
  int dim() const { return static_cast<int>(x.cols()); }
  std::span<const double> row(int i) const { return {x.data() + static_cast<std::ptrdiff_t>(i) * x.cols(), static_cast<std::size_t>(x.cols())}; }
  expr::Point point(int i) const { return {row(i), static_cast<double>(a[i]), y[i]}; }
  int arm_count(int arm) const;
};

// Delimited table with header y, a, x1..xd (any column order, comma separated).
SiteDataset read_csv(const std::filesystem::path& path, int site_id);
SiteDataset parse_csv(const std::string& text, int site_id, const std::string& origin = "<memory>");
void write_csv(const SiteDataset& data, const std::filesystem::path& path);

}  // namespace ecoate
