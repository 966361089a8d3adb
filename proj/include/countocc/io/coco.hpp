#pragma once

#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "countocc/occlusion.hpp"
#include "json.hpp"

namespace countocc {

/// COCO-style dataset document extended with per-image exemplar boxes and an
/// "occlusion" record ({rectangles, occluded_ids, flags}) once a split has
/// been occlusion-augmented.
struct CocoImageEntry {
  int id = 0;
  int width = 0, height = 0;
  std::string file_name;
  std::string occ_file_name;   // set by the occlusion generator
  std::string mask_file_name;  // set by the occlusion generator
  int category_id = 0;
  std::vector<BoxAnnotation> exemplars;
  bool has_occlusion = false;
  std::vector<OccluderRect> occ_rectangles;
  std::vector<std::size_t> occluded_ids;
  bool occ_fallback = false;
  bool occ_window_infeasible = false;
};

struct CocoAnnotation {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  BoxAnnotation box;
};

struct CocoCategory {
  int id = 0;
  std::string name;
};

struct CocoDataset {
  std::vector<CocoImageEntry> images;
  std::vector<CocoAnnotation> annotations;
  std::vector<CocoCategory> categories;

  std::vector<BoxAnnotation> boxes_for(int image_id) const {
    std::vector<BoxAnnotation> out;
    for (const auto& a : annotations)
      if (a.image_id == image_id) out.push_back(a.box);
    return out;
  }

  std::string category_name(int id) const {
    for (const auto& c : categories)
      if (c.id == id) return c.name;
    return "category_" + std::to_string(id);
  }
};

namespace coco_detail {

inline nlohmann::ordered_json box_to_xywh(const BoxAnnotation& b) {
  return nlohmann::ordered_json::array({b.x_min, b.y_min, b.width(), b.height()});
}

inline BoxAnnotation box_from_xywh(const nlohmann::json& j) {
  const double x = j.at(0), y = j.at(1), w = j.at(2), h = j.at(3);
  return {x, y, x + w, y + h};
}

}  // namespace coco_detail

inline nlohmann::ordered_json dataset_to_json(const CocoDataset& ds) {
  nlohmann::ordered_json j;
  j["images"] = nlohmann::ordered_json::array();
  for (const auto& img : ds.images) {
    nlohmann::ordered_json e;
    e["id"] = img.id;
    e["width"] = img.width;
    e["height"] = img.height;
    e["file_name"] = img.file_name;
    if (!img.occ_file_name.empty()) e["occ_file_name"] = img.occ_file_name;
    if (!img.mask_file_name.empty()) e["mask_file_name"] = img.mask_file_name;
    e["category_id"] = img.category_id;
    e["exemplars"] = nlohmann::ordered_json::array();
    for (const auto& b : img.exemplars) e["exemplars"].push_back(coco_detail::box_to_xywh(b));
    if (img.has_occlusion) {
      nlohmann::ordered_json occ;
      occ["rectangles"] = nlohmann::ordered_json::array();
      for (const auto& r : img.occ_rectangles)
        occ["rectangles"].push_back(nlohmann::ordered_json::array({r.x, r.y, r.w, r.h}));
      occ["occluded_ids"] = img.occluded_ids;
      occ["fallback"] = img.occ_fallback;
      occ["window_infeasible"] = img.occ_window_infeasible;
      e["occlusion"] = occ;
    }
    j["images"].push_back(e);
  }
  j["annotations"] = nlohmann::ordered_json::array();
  for (const auto& a : ds.annotations) {
    nlohmann::ordered_json e;
    e["id"] = a.id;
    e["image_id"] = a.image_id;
    e["category_id"] = a.category_id;
    e["bbox"] = coco_detail::box_to_xywh(a.box);
    j["annotations"].push_back(e);
  }
  j["categories"] = nlohmann::ordered_json::array();
  for (const auto& c : ds.categories) {
    nlohmann::ordered_json e;
    e["id"] = c.id;
    e["name"] = c.name;
    j["categories"].push_back(e);
  }
  return j;
}

inline CocoDataset dataset_from_json(const nlohmann::json& j) {
  CocoDataset ds;
  for (const auto& e : j.at("images")) {
    CocoImageEntry img;
    img.id = e.at("id");
    img.width = e.at("width");
    img.height = e.at("height");
    img.file_name = e.at("file_name");
    img.occ_file_name = e.value("occ_file_name", std::string{});
    img.mask_file_name = e.value("mask_file_name", std::string{});
    img.category_id = e.value("category_id", 0);
    if (e.contains("exemplars"))
      for (const auto& b : e.at("exemplars")) img.exemplars.push_back(coco_detail::box_from_xywh(b));
    if (e.contains("occlusion")) {
      img.has_occlusion = true;
      const auto& occ = e.at("occlusion");
      for (const auto& r : occ.at("rectangles"))
        img.occ_rectangles.push_back({r.at(0), r.at(1), r.at(2), r.at(3)});
      for (const auto& id : occ.at("occluded_ids"))
        img.occluded_ids.push_back(id.get<std::size_t>());
      img.occ_fallback = occ.value("fallback", false);
      img.occ_window_infeasible = occ.value("window_infeasible", false);
    }
    ds.images.push_back(std::move(img));
  }
  for (const auto& e : j.at("annotations")) {
    CocoAnnotation a;
    a.id = e.at("id");
    a.image_id = e.at("image_id");
    a.category_id = e.value("category_id", 0);
    a.box = coco_detail::box_from_xywh(e.at("bbox"));
    ds.annotations.push_back(a);
  }
  if (j.contains("categories"))
    for (const auto& e : j.at("categories"))
      ds.categories.push_back({e.at("id"), e.at("name")});
  return ds;
}

inline void save_dataset(const CocoDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << dataset_to_json(ds).dump(2) << "\n";
}

inline CocoDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  nlohmann::json j;
  in >> j;
  return dataset_from_json(j);
}

/// Ingestion view of one dataset entry.
inline AnnotatedScene to_scene(const CocoDataset& ds, const CocoImageEntry& img) {
  AnnotatedScene s;
  s.width = img.width;
  s.height = img.height;
  s.boxes = ds.boxes_for(img.id);
  s.label = ds.category_name(img.category_id);
  s.class_id = img.category_id;
  s.exemplars = img.exemplars;
  return s;
}

/// Rebuild the binary mask raster from an image entry's occlusion record.
inline OcclusionMask mask_from_entry(const CocoImageEntry& img) {
  OcclusionMask m = OcclusionMask::empty(img.width, img.height);
  for (const auto& r : img.occ_rectangles) occ_detail::paint(m, r);
  m.fallback = img.occ_fallback;
  m.window_infeasible = img.occ_window_infeasible;
  m.occluded_instance_ids = img.occluded_ids;
  return m;
}

}  // namespace countocc
