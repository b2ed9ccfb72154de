#include "dmpanel/panel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

namespace dmp {

namespace {

struct RawField {
  std::string text;
  bool quoted = false;
};

// minimal CSV tokenizer: comma separator, double-quote escaping, CR tolerant
std::vector<std::vector<RawField>> tokenize_csv(const std::string& text) {
  std::vector<std::vector<RawField>> rows;
  std::vector<RawField> row;
  RawField field;
  bool in_quotes = false;
  bool row_has_content = false;
  size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.text += '"';
          i += 2;
          continue;
        }
        in_quotes = false;
        ++i;
        continue;
      }
      field.text += c;
      ++i;
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        field.quoted = true;
        row_has_content = true;
        ++i;
        break;
      case ',':
        row.push_back(std::move(field));
        field = RawField{};
        row_has_content = true;
        ++i;
        break;
      case '\r':
        ++i;
        break;
      case '\n':
        if (row_has_content || !row.empty()) {
          row.push_back(std::move(field));
          rows.push_back(std::move(row));
        }
        row.clear();
        field = RawField{};
        row_has_content = false;
        ++i;
        break;
      default:
        field.text += c;
        row_has_content = true;
        ++i;
        break;
    }
  }
  if (in_quotes) throw io_error("unterminated quoted field in CSV input");
  if (row_has_content || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

bool is_missing_field(const RawField& f) {
  return !f.quoted && (f.text.empty() || f.text == "NA");
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

bool is_bool_literal(const std::string& s, bool& out) {
  if (s == "TRUE" || s == "true" || s == "T") {
    out = true;
    return true;
  }
  if (s == "FALSE" || s == "false" || s == "F") {
    out = false;
    return true;
  }
  return false;
}

std::string format_value(double v) {
  if (v == static_cast<long long>(v) && std::abs(v) < 1e15) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(v));
    return buf;
  }
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string quote_csv(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

} // namespace

const Column& PanelData::column(const std::string& name) const {
  auto it = columns.find(name);
  if (it == columns.end()) {
    throw spec_error("variable `" + name + "` not found in the data");
  }
  return it->second;
}

Column& PanelData::column(const std::string& name) {
  auto it = columns.find(name);
  if (it == columns.end()) {
    throw spec_error("variable `" + name + "` not found in the data");
  }
  return it->second;
}

void PanelData::add_column(const std::string& name, Column col) {
  if (!columns.count(name)) column_order.push_back(name);
  columns[name] = std::move(col);
}

PanelData panel_from_csv(const std::string& text, const std::string& time,
                         const std::string& group) {
  auto rows = tokenize_csv(text);
  if (rows.empty()) throw io_error("CSV input is empty");
  std::vector<std::string> header;
  for (const auto& f : rows[0]) header.push_back(f.text);
  const size_t ncol = header.size();
  for (size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != ncol) {
      throw io_error("CSV row " + std::to_string(i + 1) + " has " +
                     std::to_string(rows[i].size()) + " fields, expected " +
                     std::to_string(ncol));
    }
  }

  auto col_index = [&](const std::string& name) -> int {
    for (size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  };
  const int time_idx = col_index(time);
  if (time_idx < 0) throw spec_error("time column `" + time + "` not found");
  int group_idx = -1;
  if (!group.empty()) {
    group_idx = col_index(group);
    if (group_idx < 0) throw spec_error("group column `" + group + "` not found");
  }

  PanelData d;
  d.time_col = time;
  d.group_col = group;
  const size_t nrow = rows.size() - 1;

  // time values must order; non-numeric entries fall back to the ordering of
  // their sorted text form, mirroring factor-to-integer coercion
  std::vector<double> row_time(nrow);
  {
    bool all_numeric = true;
    for (size_t r = 0; r < nrow; ++r) {
      const RawField& f = rows[r + 1][time_idx];
      if (is_missing_field(f)) {
        throw spec_error("missing value in time column `" + time + "`");
      }
      double v;
      if (!parse_number(f.text, v)) {
        all_numeric = false;
        break;
      }
      row_time[r] = v;
    }
    if (!all_numeric) {
      std::vector<std::string> texts(nrow);
      for (size_t r = 0; r < nrow; ++r) texts[r] = rows[r + 1][time_idx].text;
      std::vector<std::string> sorted = texts;
      std::sort(sorted.begin(), sorted.end());
      sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
      for (size_t r = 0; r < nrow; ++r) {
        row_time[r] = 1.0 + static_cast<double>(
            std::lower_bound(sorted.begin(), sorted.end(), texts[r]) -
            sorted.begin());
      }
      d.warnings.push_back("time column `" + time +
                           "` is not numeric; values were ranked in sorted order");
    }
  }
  d.time_values = row_time;
  std::sort(d.time_values.begin(), d.time_values.end());
  d.time_values.erase(std::unique(d.time_values.begin(), d.time_values.end()),
                      d.time_values.end());
  if (d.time_values.empty()) throw spec_error("no rows in CSV input");
  bool consecutive = true;
  for (size_t t = 1; t < d.time_values.size(); ++t) {
    if (d.time_values[t] != d.time_values[t - 1] + 1.0) consecutive = false;
  }
  if (!consecutive) {
    d.warnings.push_back(
        "time values are not consecutive integers; re-indexed by rank");
  }

  // group labels: numeric sort when every label parses, else first appearance
  std::vector<std::string> row_group(nrow, "1");
  if (group_idx >= 0) {
    for (size_t r = 0; r < nrow; ++r) {
      const RawField& f = rows[r + 1][group_idx];
      if (is_missing_field(f)) {
        throw spec_error("missing value in group column `" + group + "`");
      }
      row_group[r] = f.text;
    }
  }
  {
    std::vector<std::string> seen;
    for (const auto& gname : row_group) {
      if (std::find(seen.begin(), seen.end(), gname) == seen.end()) {
        seen.push_back(gname);
      }
    }
    d.group_is_numeric = true;
    std::vector<std::pair<double, std::string>> numeric;
    for (const auto& gname : seen) {
      double v;
      if (!parse_number(gname, v)) {
        d.group_is_numeric = false;
        break;
      }
      numeric.push_back({v, gname});
    }
    if (d.group_is_numeric) {
      std::sort(numeric.begin(), numeric.end());
      for (const auto& [v, gname] : numeric) d.group_ids.push_back(gname);
    } else {
      d.group_ids = seen;
    }
  }

  const int N = d.N();
  const int T = d.T();
  auto group_of = [&](const std::string& gname) {
    return static_cast<int>(
        std::find(d.group_ids.begin(), d.group_ids.end(), gname) -
        d.group_ids.begin());
  };
  auto time_of = [&](double v) {
    return static_cast<int>(
        std::lower_bound(d.time_values.begin(), d.time_values.end(), v) -
        d.time_values.begin());
  };
  std::vector<long long> row_of_cell(static_cast<size_t>(N) * T, -1);
  for (size_t r = 0; r < nrow; ++r) {
    const size_t cell = d.cell(group_of(row_group[r]), time_of(row_time[r]));
    if (row_of_cell[cell] >= 0) {
      throw spec_error("duplicate row for group `" + row_group[r] +
                       "`, time " + format_value(row_time[r]));
    }
    row_of_cell[cell] = static_cast<long long>(r);
  }

  // type inference and cell assignment per value column
  for (size_t j = 0; j < ncol; ++j) {
    if (static_cast<int>(j) == time_idx || static_cast<int>(j) == group_idx) {
      continue;
    }
    const std::string& name = header[j];
    if (d.columns.count(name)) {
      throw io_error("duplicate column name `" + name + "` in CSV header");
    }
    bool any_quoted = false, all_numeric = true, all_bool = true,
         all_integer = true, any_value = false;
    for (size_t r = 0; r < nrow; ++r) {
      const RawField& f = rows[r + 1][j];
      if (is_missing_field(f)) continue;
      any_value = true;
      if (f.quoted) any_quoted = true;
      double v;
      bool bv;
      if (!parse_number(f.text, v)) {
        all_numeric = false;
      } else if (v != std::floor(v) || std::abs(v) >= 9e15) {
        all_integer = false;
      }
      if (!is_bool_literal(f.text, bv)) all_bool = false;
    }
    Column col;
    col.values.assign(static_cast<size_t>(N) * T, 0.0);
    col.missing.assign(static_cast<size_t>(N) * T, 1);
    if (!any_value) {
      col.type = ColumnType::numeric;
    } else if (!any_quoted && all_numeric) {
      col.type = all_integer ? ColumnType::integer : ColumnType::numeric;
    } else if (!any_quoted && all_bool) {
      col.type = ColumnType::boolean;
    } else {
      col.type = ColumnType::categorical;
    }
    for (size_t cell = 0; cell < row_of_cell.size(); ++cell) {
      if (row_of_cell[cell] < 0) continue;
      const RawField& f = rows[row_of_cell[cell] + 1][j];
      if (is_missing_field(f)) continue;
      double v = 0.0;
      switch (col.type) {
        case ColumnType::numeric:
        case ColumnType::integer:
          parse_number(f.text, v);
          if (!std::isfinite(v)) {
            throw spec_error("non-finite value in column `" + name +
                             "`; only finite numbers and NA are supported");
          }
          break;
        case ColumnType::boolean: {
          bool bv = false;
          is_bool_literal(f.text, bv);
          v = bv ? 1.0 : 0.0;
          break;
        }
        case ColumnType::categorical: {
          auto it = std::find(col.levels.begin(), col.levels.end(), f.text);
          if (it == col.levels.end()) {
            col.levels.push_back(f.text);
            v = static_cast<double>(col.levels.size() - 1);
          } else {
            v = static_cast<double>(it - col.levels.begin());
          }
          break;
        }
      }
      col.values[cell] = v;
      col.missing[cell] = 0;
    }
    // level order must follow file appearance, not grid order
    if (col.type == ColumnType::categorical) {
      std::vector<std::string> by_file;
      for (size_t r = 0; r < nrow; ++r) {
        const RawField& f = rows[r + 1][j];
        if (is_missing_field(f)) continue;
        if (std::find(by_file.begin(), by_file.end(), f.text) == by_file.end()) {
          by_file.push_back(f.text);
        }
      }
      std::vector<double> remap(col.levels.size());
      for (size_t l = 0; l < col.levels.size(); ++l) {
        remap[l] = static_cast<double>(
            std::find(by_file.begin(), by_file.end(), col.levels[l]) -
            by_file.begin());
      }
      for (size_t cell = 0; cell < col.values.size(); ++cell) {
        if (!col.missing[cell]) {
          col.values[cell] = remap[static_cast<size_t>(col.values[cell])];
        }
      }
      col.levels = by_file;
    }
    d.add_column(name, std::move(col));
  }
  return d;
}

PanelData load_panel(const std::string& path, const std::string& time,
                     const std::string& group) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open data file `" + path + "`");
  std::ostringstream buf;
  buf << in.rdbuf();
  return panel_from_csv(buf.str(), time, group);
}

void write_panel(const PanelData& d, std::ostream& out) {
  if (!d.group_col.empty()) out << d.group_col << ",";
  out << d.time_col;
  for (const auto& name : d.column_order) out << "," << name;
  out << "\n";
  for (int g = 0; g < d.N(); ++g) {
    for (int t = 0; t < d.T(); ++t) {
      if (!d.group_col.empty()) {
        out << (d.group_is_numeric ? d.group_ids[g] : quote_csv(d.group_ids[g]))
            << ",";
      }
      out << format_value(d.time_values[t]);
      for (const auto& name : d.column_order) {
        const Column& col = d.columns.at(name);
        const size_t cell = d.cell(g, t);
        out << ",";
        if (col.missing[cell]) continue;
        switch (col.type) {
          case ColumnType::numeric:
          case ColumnType::integer:
            out << format_value(col.values[cell]);
            break;
          case ColumnType::boolean:
            out << (col.values[cell] != 0.0 ? "TRUE" : "FALSE");
            break;
          case ColumnType::categorical:
            out << quote_csv(col.levels[static_cast<size_t>(col.values[cell])]);
            break;
        }
      }
      out << "\n";
    }
  }
}

void write_panel_file(const PanelData& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write data file `" + path + "`");
  write_panel(d, out);
}

namespace {

// a lag of a deterministic channel whose starting values are declared does
// not push the mask back at the panel start
bool lag_defined_before_start(const ModelFormula& f, const std::string& var,
                              int shift) {
  const ChannelSpec* c = f.find_channel(var);
  if (!c || c->is_stochastic()) return false;
  if (c->aux_past) return true;
  return static_cast<int>(c->aux_init.size()) >= shift;
}

void term_observed(const PanelData& d, const ModelFormula& f, const Term& term,
                   int g, int t, bool& ok) {
  if (!ok) return;
  switch (term.kind) {
    case TermKind::intercept:
      return;
    case TermKind::covariate:
      if (!d.observed(term.variable, g, t)) ok = false;
      return;
    case TermKind::lag: {
      const int ts = t - term.shift;
      if (ts < 0) {
        if (!lag_defined_before_start(f, term.variable, term.shift)) ok = false;
        return;
      }
      if (!d.observed(term.variable, g, ts)) ok = false;
      return;
    }
    case TermKind::interaction:
      for (const auto& p : term.parts) term_observed(d, f, p, g, t, ok);
      return;
  }
}

} // namespace

std::map<std::string, std::vector<uint8_t>> missingness_mask(
    const PanelData& d, const ModelFormula& f) {
  const int fixed = fixed_timepoints(f);
  std::map<std::string, std::vector<uint8_t>> masks;
  for (const auto& c : f.channels) {
    if (!c.is_stochastic()) continue;
    std::vector<uint8_t> mask(static_cast<size_t>(d.N()) * d.T(), 0);
    for (int g = 0; g < d.N(); ++g) {
      for (int t = fixed; t < d.T(); ++t) {
        bool ok = d.observed(c.response, g, t);
        for (const auto& term : c.terms) term_observed(d, f, term, g, t, ok);
        if (ok && c.offset && !d.observed(*c.offset, g, t)) ok = false;
        if (ok && c.trials && !d.observed(*c.trials, g, t)) ok = false;
        mask[d.cell(g, t)] = ok ? 1 : 0;
      }
    }
    masks[c.response] = std::move(mask);
  }
  return masks;
}

} // namespace dmp
