#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "dmpanel/common.hpp"
#include "dmpanel/formula.hpp"

namespace dmp {

enum class ColumnType { numeric, integer, boolean, categorical };

/// One variable over the balanced (group, time) grid; cell (g, t) lives at
/// index g * T + t. Categorical cells store 0-based level indices.
struct Column {
  ColumnType type = ColumnType::numeric;
  std::vector<double> values;
  std::vector<uint8_t> missing;
  std::vector<std::string> levels; // categorical only, first-appearance order

  bool observed(size_t cell) const { return !missing[cell]; }
};

struct PanelData {
  std::string group_col; // empty when a single group was synthesized
  std::string time_col;
  bool group_is_numeric = true;
  std::vector<std::string> group_ids; // N labels
  std::vector<double> time_values;    // T original values, ascending
  std::vector<std::string> column_order;
  std::map<std::string, Column> columns;
  Warnings warnings;

  int N() const { return static_cast<int>(group_ids.size()); }
  int T() const { return static_cast<int>(time_values.size()); }
  size_t cell(int g, int t) const {
    return static_cast<size_t>(g) * time_values.size() + t;
  }
  bool has_column(const std::string& name) const {
    return columns.count(name) > 0;
  }
  const Column& column(const std::string& name) const;
  Column& column(const std::string& name);
  void add_column(const std::string& name, Column col);

  double value(const std::string& name, int g, int t) const {
    return column(name).values[cell(g, t)];
  }
  bool observed(const std::string& name, int g, int t) const {
    return !column(name).missing[cell(g, t)];
  }
};

/// Reads a long-format CSV into balanced storage. Character columns become
/// categorical, missing cells are empty fields or NA, and absent (group,
/// time) rows are inserted as all-missing.
PanelData load_panel(const std::string& path, const std::string& time,
                     const std::string& group);

/// Same as load_panel but from in-memory text (used by tests and bindings).
PanelData panel_from_csv(const std::string& text, const std::string& time,
                         const std::string& group);

void write_panel(const PanelData& d, std::ostream& out);
void write_panel_file(const PanelData& d, const std::string& path);

/// True where the channel's response and every predictor it needs are
/// observed; cells at the leading fixed time points are always false for
/// stochastic channels. Keyed by response name.
std::map<std::string, std::vector<uint8_t>> missingness_mask(
    const PanelData& d, const ModelFormula& f);

} // namespace dmp
