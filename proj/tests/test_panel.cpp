#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "dmpanel/panel.hpp"

using namespace dmp;

namespace {

const char* kSmall =
    "id,time,y,x,grp,flag\n"
    "1,1,0.5,2,\"a\",TRUE\n"
    "1,2,1.5,3,\"b\",FALSE\n"
    "2,1,2.5,4,\"b\",TRUE\n"
    "2,2,,5,\"a\",FALSE\n";

} // namespace

TEST_CASE("loads a complete panel with inferred types") {
  auto d = panel_from_csv(kSmall, "time", "id");
  CHECK(d.N() == 2);
  CHECK(d.T() == 2);
  CHECK(d.group_ids == std::vector<std::string>{"1", "2"});
  CHECK(d.column_order == std::vector<std::string>{"y", "x", "grp", "flag"});
  CHECK(d.columns.at("y").type == ColumnType::numeric);
  CHECK(d.columns.at("x").type == ColumnType::integer);
  CHECK(d.columns.at("grp").type == ColumnType::categorical);
  CHECK(d.columns.at("flag").type == ColumnType::boolean);
  CHECK(d.value("y", 1, 0) == 2.5);
  CHECK(!d.observed("y", 1, 1));
  CHECK(d.observed("x", 1, 1));
  CHECK(d.columns.at("grp").levels == std::vector<std::string>{"a", "b"});
  CHECK(d.value("grp", 0, 1) == 1.0); // "b"
  CHECK(d.warnings.empty());
}

TEST_CASE("group order is numeric when labels parse as numbers") {
  auto d = panel_from_csv("id,time,y\n10,1,1\n2,1,2\n", "time", "id");
  CHECK(d.group_ids == std::vector<std::string>{"2", "10"});
  auto e = panel_from_csv("id,time,y\nzeta,1,1\nalpha,1,2\n", "time", "id");
  CHECK(e.group_ids == std::vector<std::string>{"zeta", "alpha"});
  CHECK(!e.group_is_numeric);
}

TEST_CASE("omitted group column means one group") {
  auto d = panel_from_csv("time,y\n1,0.1\n2,0.2\n3,0.3\n", "time", "");
  CHECK(d.N() == 1);
  CHECK(d.T() == 3);
  CHECK(d.group_col.empty());
}

TEST_CASE("missing grid rows are inserted as all-missing") {
  auto d = panel_from_csv("id,time,y\n1,1,1\n1,3,3\n2,1,4\n2,2,5\n2,3,6\n",
                          "time", "id");
  CHECK(d.N() == 2);
  CHECK(d.T() == 3);
  CHECK(!d.observed("y", 0, 1)); // id=1, time=2 was absent
  CHECK(d.observed("y", 1, 1));
  // grid completeness over every column
  for (const auto& name : d.column_order) {
    CHECK(d.columns.at(name).values.size() == 6);
  }
}

TEST_CASE("non-consecutive times warn and re-index by rank") {
  auto d = panel_from_csv("id,time,y\n1,2,1\n1,4,2\n1,8,3\n", "time", "id");
  CHECK(d.T() == 3);
  REQUIRE(d.warnings.size() == 1);
  CHECK(d.warnings[0].find("not consecutive") != std::string::npos);
  CHECK(d.value("y", 0, 2) == 3.0);
  // shifted but consecutive times pass silently
  auto e = panel_from_csv("id,time,y\n1,2000,1\n1,2001,2\n", "time", "id");
  CHECK(e.warnings.empty());
}

TEST_CASE("duplicate group-time rows are rejected") {
  CHECK_THROWS_WITH_AS(
      panel_from_csv("id,time,y\n1,1,1\n1,1,2\n", "time", "id"),
      doctest::Contains("duplicate row"), Error);
}

TEST_CASE("bad inputs raise io or spec errors") {
  CHECK_THROWS_AS(panel_from_csv("", "time", "id"), Error);
  CHECK_THROWS_WITH_AS(panel_from_csv("a,b\n1,2\n", "time", ""),
                       doctest::Contains("time column"), Error);
  CHECK_THROWS_WITH_AS(panel_from_csv("time,y\n1,2\n", "time", "id"),
                       doctest::Contains("group column"), Error);
  CHECK_THROWS_WITH_AS(panel_from_csv("time,y\n1,2,3\n", "time", ""),
                       doctest::Contains("fields"), Error);
  CHECK_THROWS_WITH_AS(panel_from_csv("time,y\n1,Inf\n", "time", ""),
                       doctest::Contains("non-finite"), Error);
  CHECK_THROWS_AS(load_panel("/nonexistent/definitely.csv", "time", ""), Error);
}

TEST_CASE("quoted fields force categorical even when numeric-looking") {
  auto d = panel_from_csv("time,v\n1,\"3.5\"\n2,\"1\"\n", "time", "");
  CHECK(d.columns.at("v").type == ColumnType::categorical);
  CHECK(d.columns.at("v").levels == std::vector<std::string>{"3.5", "1"});
}

TEST_CASE("writer round trip reproduces typed columns exactly") {
  auto d = panel_from_csv(kSmall, "time", "id");
  std::ostringstream out;
  write_panel(d, out);
  auto d2 = panel_from_csv(out.str(), "time", "id");
  CHECK(d2.group_ids == d.group_ids);
  CHECK(d2.time_values == d.time_values);
  CHECK(d2.column_order == d.column_order);
  for (const auto& name : d.column_order) {
    CAPTURE(name);
    const Column& a = d.columns.at(name);
    const Column& b = d2.columns.at(name);
    CHECK(a.type == b.type);
    CHECK(a.values == b.values);
    CHECK(a.missing == b.missing);
    CHECK(a.levels == b.levels);
  }
}

TEST_CASE("csv quoting survives embedded separators and quotes") {
  auto d = panel_from_csv("time,s\n1,\"a,b\"\n2,\"say \"\"hi\"\"\"\n", "time", "");
  CHECK(d.columns.at("s").levels ==
        std::vector<std::string>{"a,b", "say \"hi\""});
  std::ostringstream out;
  write_panel(d, out);
  auto d2 = panel_from_csv(out.str(), "time", "");
  CHECK(d2.columns.at("s").levels == d.columns.at("s").levels);
}

TEST_CASE("mask is all true beyond fixed time points on complete data") {
  auto d = panel_from_csv(
      "id,time,y,x\n1,1,1,1\n1,2,2,2\n1,3,3,3\n2,1,4,4\n2,2,5,5\n2,3,6,6\n",
      "time", "id");
  auto f = parse_formula("obs(y ~ x + lag(y), family = \"gaussian\")");
  auto masks = missingness_mask(d, f);
  const auto& m = masks.at("y");
  for (int g = 0; g < 2; ++g) {
    CHECK(m[d.cell(g, 0)] == 0); // fixed time point
    CHECK(m[d.cell(g, 1)] == 1);
    CHECK(m[d.cell(g, 2)] == 1);
  }
}

TEST_CASE("missing responses propagate through their lags") {
  // one group, four times, y missing at t=2
  auto d = panel_from_csv("time,y,x\n1,1,1\n2,,2\n3,3,3\n4,4,4\n", "time", "");
  auto f = parse_formula(
      "obs(y ~ x + lag(y), family = \"gaussian\")");
  auto m = missingness_mask(d, f).at("y");
  CHECK(m[0] == 0); // fixed
  CHECK(m[1] == 0); // response missing
  CHECK(m[2] == 0); // lag(y) missing
  CHECK(m[3] == 1);
}

TEST_CASE("missing exogenous predictors only hit their own cell") {
  auto d = panel_from_csv("time,y,z\n1,1,1\n2,2,\n3,3,3\n", "time", "");
  auto f = parse_formula("obs(y ~ z, family = \"gaussian\")");
  auto m = missingness_mask(d, f).at("y");
  CHECK(m[0] == 1);
  CHECK(m[1] == 0);
  CHECK(m[2] == 1);
}

TEST_CASE("likelihood terms equal true mask cells summed over channels") {
  auto d = panel_from_csv(
      "id,time,y,x\n1,1,1,1\n1,2,2,\n1,3,3,3\n2,1,,4\n2,2,5,5\n2,3,6,6\n",
      "time", "id");
  auto f = parse_formula(
      "obs(y ~ lag(y), family = \"gaussian\") + "
      "obs(x ~ y, family = \"gaussian\")");
  auto masks = missingness_mask(d, f);
  int total = 0;
  for (const auto& [resp, m] : masks) {
    for (uint8_t v : m) total += v;
  }
  // y: t=2 needs y_t and y_{t-1}: g1 t2 ok, g1 t3 ok, g2 t2 no (y1 missing),
  //    g2 t3 ok -> 3
  // x: t=2,3 need x_t and y_t: g1 t2 x missing, g1 t3 ok, g2 t2 ok, g2 t3 ok -> 3
  CHECK(total == 6);
}

TEST_CASE("aux channels with init do not lose the panel start") {
  auto d = panel_from_csv("time,y,q\n1,1,0.5\n2,2,0.6\n3,3,0.7\n", "time", "");
  auto f = parse_formula(
      "obs(y ~ lag(q), family = \"gaussian\") + "
      "aux(numeric(q) ~ y + 1 | init(0))");
  auto m = missingness_mask(d, f).at("y");
  CHECK(m[0] == 1); // lag(q) at t=1 comes from init
  CHECK(m[1] == 1);
  CHECK(m[2] == 1);
  auto g = parse_formula(
      "obs(y ~ lag(q), family = \"gaussian\") + "
      "aux(numeric(q) ~ y + 1)");
  auto m2 = missingness_mask(d, g).at("y");
  CHECK(m2[0] == 0); // no init: first lag undefined
  CHECK(m2[1] == 1);
}
