#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace countocc {

/// MAE = (1/N) Σ |ŷ - y|.
inline double mae(const std::vector<double>& preds, const std::vector<double>& gts) {
  if (preds.empty() || preds.size() != gts.size())
    throw std::invalid_argument("mae: needs equal-length nonempty sequences");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - gts[i]);
  return s / static_cast<double>(preds.size());
}

/// RMSE = sqrt((1/N) Σ (ŷ - y)²).
inline double rmse(const std::vector<double>& preds, const std::vector<double>& gts) {
  if (preds.empty() || preds.size() != gts.size())
    throw std::invalid_argument("rmse: needs equal-length nonempty sequences");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    s += (preds[i] - gts[i]) * (preds[i] - gts[i]);
  return std::sqrt(s / static_cast<double>(preds.size()));
}

struct PerImageRecord {
  int id = 0;
  double y = 0, y_hat = 0;
  double y_vis = 0, y_hat_vis = 0;
  double y_occ = 0, y_hat_occ = 0;
};

struct MetricsReport {
  double mae = 0, rmse = 0;
  double mae_vis = 0, mae_occ = 0;
  std::size_t n_images = 0;
  std::vector<PerImageRecord> records;          // sorted by image id
  std::vector<std::string> errors;              // per-image failures, run continues

  bool clean() const { return errors.empty(); }
};

/// Aggregate per-image records into the report; deterministic ordering by id.
inline MetricsReport build_report(std::vector<PerImageRecord> records,
                                  std::vector<std::string> errors = {}) {
  if (records.empty()) throw std::invalid_argument("build_report: no evaluated images");
  std::sort(records.begin(), records.end(),
            [](const PerImageRecord& a, const PerImageRecord& b) { return a.id < b.id; });
  MetricsReport r;
  r.records = std::move(records);
  r.errors = std::move(errors);
  r.n_images = r.records.size();
  std::vector<double> p, g, pv, gv, po, go;
  for (const auto& rec : r.records) {
    p.push_back(rec.y_hat);
    g.push_back(rec.y);
    pv.push_back(rec.y_hat_vis);
    gv.push_back(rec.y_vis);
    po.push_back(rec.y_hat_occ);
    go.push_back(rec.y_occ);
  }
  r.mae = mae(p, g);
  r.rmse = rmse(p, g);
  r.mae_vis = mae(pv, gv);
  r.mae_occ = mae(po, go);
  return r;
}

inline nlohmann::ordered_json report_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["mae"] = r.mae;
  j["rmse"] = r.rmse;
  j["mae_visible"] = r.mae_vis;
  j["mae_occluded"] = r.mae_occ;
  j["n_images"] = r.n_images;
  j["per_image"] = nlohmann::ordered_json::array();
  for (const auto& rec : r.records) {
    nlohmann::ordered_json e;
    e["id"] = rec.id;
    e["y"] = rec.y;
    e["y_hat"] = rec.y_hat;
    e["y_vis"] = rec.y_vis;
    e["y_hat_vis"] = rec.y_hat_vis;
    e["y_occ"] = rec.y_occ;
    e["y_hat_occ"] = rec.y_hat_occ;
    j["per_image"].push_back(e);
  }
  j["errors"] = r.errors;
  return j;
}

}  // namespace countocc
