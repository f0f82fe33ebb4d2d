#include "smvit/view.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "smvit/error.hpp"

namespace smvit::view {

using nlohmann::json;

void FeatureBatch::push_back(std::span<const double> values, SampleKey key) {
  if (values.size() != feat_dim)
    fail(ErrorKind::Shape, "feature row of width " + std::to_string(values.size()) + " pushed into a batch of width " +
                               std::to_string(feat_dim));
  rows.insert(rows.end(), values.begin(), values.end());
  keys.push_back(std::move(key));
}

void FeatureBatch::validate() const {
  if (rows.size() != keys.size() * feat_dim)
    fail(ErrorKind::Shape, "feature batch holds " + std::to_string(rows.size()) + " values for " +
                               std::to_string(keys.size()) + " rows of width " + std::to_string(feat_dim));
}

namespace {

using Group = std::tuple<std::string, Condition, std::uint32_t>;

std::map<Group, std::vector<std::pair<std::uint32_t, std::size_t>>> group_rows(const FeatureBatch& b) {
  std::map<Group, std::vector<std::pair<std::uint32_t, std::size_t>>> groups;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto& k = b.keys[i];
    groups[{k.subject, k.condition, k.sequence}].emplace_back(k.frame, i);
  }
  for (auto& [_, rows] : groups) std::sort(rows.begin(), rows.end());
  return groups;
}

std::vector<std::pair<std::size_t, std::size_t>> pair_rows(const FeatureBatch& x, const FeatureBatch& y,
                                                           Pairing pairing) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (pairing == Pairing::ByIndex) {
    for (std::size_t i = 0; i < std::min(x.size(), y.size()); ++i) pairs.emplace_back(i, i);
    return pairs;
  }
  const auto gx = group_rows(x), gy = group_rows(y);
  for (const auto& [key, rx] : gx) {
    const auto it = gy.find(key);
    if (it == gy.end()) continue;
    const auto& ry = it->second;
    for (std::size_t j = 0; j < std::min(rx.size(), ry.size()); ++j) pairs.emplace_back(rx[j].second, ry[j].second);
  }
  return pairs;
}

}  // namespace

ViewConversionFactor compute_pfc(const FeatureBatch& x, const FeatureBatch& y, Pairing pairing) {
  x.validate();
  y.validate();
  if (x.feat_dim != y.feat_dim)
    fail(ErrorKind::Shape, "compute_pfc: feature widths " + std::to_string(x.feat_dim) + " and " +
                               std::to_string(y.feat_dim) + " differ");
  const auto pairs = pair_rows(x, y, pairing);
  if (pairs.empty())
    fail(ErrorKind::InsufficientPairs, "compute_pfc: no aligned pairs between views " + std::to_string(x.view) +
                                           " and " + std::to_string(y.view));
  ViewConversionFactor f;
  f.source = x.view;
  f.target = y.view;
  f.sample_count = pairs.size();
  f.factor.assign(x.feat_dim, 0.0);
  for (const auto& [i, j] : pairs) {
    const auto a = x.row(i), b = y.row(j);
    for (std::size_t c = 0; c < x.feat_dim; ++c) f.factor[c] += a[c] - b[c];
  }
  for (auto& v : f.factor) v /= static_cast<double>(pairs.size());
  return f;
}

std::vector<double> apply_it(std::span<const double> x_row, const ViewConversionFactor& factor) {
  if (x_row.size() != factor.factor.size())
    fail(ErrorKind::Shape, "apply_it: row width " + std::to_string(x_row.size()) + " vs factor width " +
                               std::to_string(factor.factor.size()));
  std::vector<double> out(x_row.begin(), x_row.end());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] += factor.factor[c];
  return out;
}

const ViewConversionFactor& FactorRegistry::at(int source) const {
  const auto it = entries.find(source);
  if (it == entries.end())
    fail(ErrorKind::MissingFactor, "no conversion factor from view " + std::to_string(source) + " to " +
                                       std::to_string(standard_view));
  return it->second;
}

bool FactorRegistry::complete() const {
  for (int v : kAllViews)
    if (v != standard_view && !contains(v)) return false;
  return entries.size() == kAllViews.size() - 1;
}

FeatureBatch convert_to_standard(const FeatureBatch& batch, const FactorRegistry& registry) {
  batch.validate();
  if (batch.view == registry.standard_view) return batch;
  FeatureBatch out;
  out.view = registry.standard_view;
  out.feat_dim = batch.feat_dim;
  if (batch.empty()) return out;
  const auto& f = registry.at(batch.view);
  out.rows.reserve(batch.rows.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto key = batch.keys[i];
    if (key.original_view < 0) key.original_view = batch.view;
    out.push_back(apply_it(batch.row(i), f), std::move(key));
  }
  return out;
}

FactorRegistry build_registry(const std::map<int, FeatureBatch>& by_view, int standard_view, Pairing pairing) {
  check_view_angle(standard_view);
  const auto std_it = by_view.find(standard_view);
  if (std_it == by_view.end() || std_it->second.empty())
    fail(ErrorKind::Protocol, "factor registry needs standard-view (" + std::to_string(standard_view) + ") data");
  if (by_view.size() < 2)
    fail(ErrorKind::Protocol, "factor registry needs at least one view besides the standard view");
  FactorRegistry reg;
  reg.standard_view = standard_view;
  reg.feat_dim = std_it->second.feat_dim;
  for (const auto& [v, batch] : by_view) {
    if (v == standard_view) continue;
    check_view_angle(v);
    try {
      // apply_it adds the factor, so the stored direction is standard - source.
      auto f = compute_pfc(std_it->second, batch, pairing);
      f.source = v;
      f.target = standard_view;
      reg.entries.emplace(v, std::move(f));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::InsufficientPairs) throw;
      fail(ErrorKind::InsufficientPairs, "view " + std::to_string(v) + " has no samples pairable with view " +
                                             std::to_string(standard_view));
    }
  }
  return reg;
}

double round_significant(double value, int digits) {
  if (!std::isfinite(value) || value == 0.0) return value;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, value);
  return std::strtod(buf, nullptr);
}

void FactorRegistry::round_to_persisted_precision() {
  for (auto& [_, f] : entries)
    for (auto& v : f.factor) v = round_significant(v);
}

std::string FactorRegistry::to_json() const {
  json doc;
  doc["standard_view"] = standard_view;
  doc["feat_dim"] = feat_dim;
  doc["entries"] = json::array();
  for (const auto& [_, f] : entries) {
    json values = json::array();
    for (double v : f.factor) values.push_back(round_significant(v));
    doc["entries"].push_back(
        {{"source", f.source}, {"target", f.target}, {"sample_count", f.sample_count}, {"factor", values}});
  }
  return doc.dump(1);
}

FactorRegistry FactorRegistry::from_json(const std::string& text) {
  FactorRegistry reg;
  try {
    const json doc = json::parse(text);
    reg.standard_view = doc.at("standard_view").get<int>();
    reg.feat_dim = doc.at("feat_dim").get<std::size_t>();
    for (const auto& e : doc.at("entries")) {
      ViewConversionFactor f;
      f.source = e.at("source").get<int>();
      f.target = e.at("target").get<int>();
      f.sample_count = e.at("sample_count").get<std::size_t>();
      f.factor = e.at("factor").get<std::vector<double>>();
      if (!is_view_angle(f.source) || f.target != reg.standard_view)
        fail(ErrorKind::Load, "registry entry " + std::to_string(f.source) + "->" + std::to_string(f.target) +
                                  " does not target the standard view");
      if (f.sample_count < 1) fail(ErrorKind::Load, "registry entry with zero samples");
      if (f.factor.size() != reg.feat_dim) fail(ErrorKind::Load, "registry factor width mismatch");
      for (double v : f.factor)
        if (!std::isfinite(v)) fail(ErrorKind::Load, "registry factor is not finite");
      if (!reg.entries.emplace(f.source, std::move(f)).second) fail(ErrorKind::Load, "duplicate registry entry");
    }
    if (!is_view_angle(reg.standard_view)) fail(ErrorKind::Load, "invalid standard view");
  } catch (const json::exception& e) {
    fail(ErrorKind::Load, std::string("malformed registry: ") + e.what());
  }
  return reg;
}

void FactorRegistry::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  out << to_json() << '\n';
  if (!out) fail(ErrorKind::Io, "write failed: " + path);
}

FactorRegistry FactorRegistry::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

}  // namespace smvit::view
