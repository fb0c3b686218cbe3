#ifndef CARPET_EXPERIMENT_MANIFEST_HPP
#define CARPET_EXPERIMENT_MANIFEST_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "carpet/core/box.hpp"
#include "carpet/core/patch_io.hpp"
#include "carpet/model/model.hpp"

namespace carpet {

/// One JSON line of a dataset manifest. Paths are resolved against the
/// manifest's directory.
struct ManifestEntry {
  std::filesystem::path image;
  int label = -1;                   // classification
  std::vector<Box> boxes;           // detection
  std::filesystem::path mask;       // segmentation
  std::string split;                // empty when the manifest has no splits
  std::size_t line = 0;
};

/// A validated JSON-lines manifest. An optional first line
/// {"meta": {"task", "num_classes", "resize": [h, w], "splits": {name: size}}}
/// declares the task, label range, resize rule and split sizes.
struct DatasetManifest {
  std::filesystem::path path;
  TaskKind task = TaskKind::none;
  std::optional<std::size_t> num_classes;
  std::optional<Shape2> resize;
  std::map<std::string, std::size_t> declared_splits;
  std::vector<ManifestEntry> entries;

  /// Entries of one split, in file order; an empty name selects all.
  std::vector<const ManifestEntry*> select(const std::string& split = {}, std::size_t limit = 0) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries) {
      if (!split.empty() && e.split != split) continue;
      out.push_back(&e);
      if (limit && out.size() == limit) break;
    }
    if (out.empty()) {
      throw ValidationError("manifest " + path.string() + " has no entries" +
                            (split.empty() ? std::string() : " in split '" + split + "'"));
    }
    return out;
  }
};

namespace detail {

[[noreturn]] inline void manifest_error(const std::filesystem::path& path, std::size_t line, const std::string& what) {
  throw ValidationError(path.string() + ":" + std::to_string(line) + ": " + what);
}

inline TaskKind entry_task(const nlohmann::json& j) {
  const int kinds = j.contains("label") + j.contains("boxes") + j.contains("mask");
  if (kinds != 1) return TaskKind::none;
  if (j.contains("label")) return TaskKind::classification;
  if (j.contains("boxes")) return TaskKind::detection;
  return TaskKind::segmentation;
}

}  // namespace detail

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.path = path;
  const auto base = path.parent_path();
  std::map<std::string, std::string> split_of_image;
  std::string text;
  std::size_t line_no = 0;
  bool seen_entry = false;
  while (std::getline(in, text)) {
    ++line_no;
    if (std::all_of(text.begin(), text.end(), [](unsigned char ch) { return std::isspace(ch); })) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      detail::manifest_error(path, line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) detail::manifest_error(path, line_no, "expected a JSON object");
    try {
      if (j.contains("meta")) {
        if (seen_entry) detail::manifest_error(path, line_no, "meta line must come first");
        const auto& meta = j.at("meta");
        if (meta.contains("task")) m.task = parse_task_kind(meta.at("task").get<std::string>());
        if (meta.contains("num_classes")) m.num_classes = meta.at("num_classes").get<std::size_t>();
        if (meta.contains("resize")) {
          const auto r = meta.at("resize").get<std::vector<std::size_t>>();
          if (r.size() != 2 || r[0] == 0 || r[1] == 0) detail::manifest_error(path, line_no, "resize must be [h, w]");
          m.resize = Shape2{r[0], r[1]};
        }
        if (meta.contains("splits")) m.declared_splits = meta.at("splits").get<std::map<std::string, std::size_t>>();
        continue;
      }
      seen_entry = true;
      if (!j.contains("image")) detail::manifest_error(path, line_no, "missing \"image\"");
      const TaskKind kind = detail::entry_task(j);
      if (kind == TaskKind::none) {
        detail::manifest_error(path, line_no, "entry needs exactly one of \"label\", \"boxes\", \"mask\"");
      }
      if (m.task == TaskKind::none) m.task = kind;
      if (kind != m.task) detail::manifest_error(path, line_no, "entry kind differs from manifest task " + to_string(m.task));

      ManifestEntry e;
      e.line = line_no;
      e.image = base / j.at("image").get<std::string>();
      if (j.contains("split")) e.split = j.at("split").get<std::string>();
      if (kind == TaskKind::classification) {
        e.label = j.at("label").get<int>();
        if (e.label < 0 || (m.num_classes && static_cast<std::size_t>(e.label) >= *m.num_classes)) {
          detail::manifest_error(path, line_no, "label " + std::to_string(e.label) + " out of range");
        }
      } else if (kind == TaskKind::detection) {
        for (const auto& b : j.at("boxes")) {
          const auto v = b.get<std::vector<double>>();
          if (v.size() != 5) detail::manifest_error(path, line_no, "box needs [xmin, ymin, xmax, ymax, class]");
          Box box{v[0], v[1], v[2], v[3], static_cast<int>(v[4]), 1.0};
          if (!box.valid()) detail::manifest_error(path, line_no, "box requires xmin < xmax and ymin < ymax");
          if (v[4] < 0 || v[4] != std::floor(v[4]) ||
              (m.num_classes && static_cast<std::size_t>(v[4]) >= *m.num_classes)) {
            detail::manifest_error(path, line_no, "box class out of range");
          }
          e.boxes.push_back(box);
        }
      } else {
        e.mask = base / j.at("mask").get<std::string>();
        if (!std::filesystem::exists(e.mask)) detail::manifest_error(path, line_no, "missing file " + e.mask.string());
      }
      if (!std::filesystem::exists(e.image)) detail::manifest_error(path, line_no, "missing file " + e.image.string());
      const std::string key = std::filesystem::weakly_canonical(e.image).string();
      if (const auto it = split_of_image.find(key); it != split_of_image.end() && it->second != e.split) {
        detail::manifest_error(path, line_no, "image appears in splits '" + it->second + "' and '" + e.split + "'");
      }
      split_of_image[key] = e.split;
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      detail::manifest_error(path, line_no, std::string("schema error: ") + e.what());
    }
  }
  if (m.entries.empty()) throw ValidationError("manifest has no entries");
  for (const auto& [name, size] : m.declared_splits) {
    const auto n = static_cast<std::size_t>(
        std::count_if(m.entries.begin(), m.entries.end(), [&](const ManifestEntry& e) { return e.split == name; }));
    if (n != size) {
      throw ValidationError(path.string() + ": split '" + name + "' declares " + std::to_string(size) +
                            " entries but has " + std::to_string(n));
    }
  }
  return m;
}

namespace detail {

/// Bilinear resample with half-pixel centers.
inline Tensor3 resize_bilinear(const Tensor3& src, Shape2 to) {
  Tensor3 out(src.channels(), to.height, to.width);
  const double sy = static_cast<double>(src.height()) / static_cast<double>(to.height);
  const double sx = static_cast<double>(src.width()) / static_cast<double>(to.width);
  for (std::size_t y = 0; y < to.height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height() - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < to.width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width() - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels(); ++c) {
        const double top = src(c, y0, x0) * (1 - wx) + src(c, y0, x1) * wx;
        const double bot = src(c, y1, x0) * (1 - wx) + src(c, y1, x1) * wx;
        out(c, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Decoded images and labels of one manifest selection.
struct LoadedSet {
  TaskKind task = TaskKind::none;
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::vector<Box>> boxes;
  std::vector<std::vector<int>> masks;
};

inline LoadedSet load_entries(const DatasetManifest& m, const std::string& split = {}, std::size_t limit = 0) {
  LoadedSet out;
  out.task = m.task;
  for (const ManifestEntry* e : m.select(split, limit)) {
    Image img = read_png(e->image);
    const Shape2 native = img.shape();
    if (m.resize && (native.height != m.resize->height || native.width != m.resize->width)) {
      img = Image(detail::resize_bilinear(img.tensor(), *m.resize),
                  img.id() + "@" + std::to_string(m.resize->height) + "x" + std::to_string(m.resize->width));
    }
    const Shape2 shape = img.shape();
    switch (m.task) {
      case TaskKind::classification: out.labels.push_back(e->label); break;
      case TaskKind::detection: {
        const double kx = static_cast<double>(shape.width) / static_cast<double>(native.width);
        const double ky = static_cast<double>(shape.height) / static_cast<double>(native.height);
        std::vector<Box> bs;
        for (Box b : e->boxes) {
          b.xmin *= kx;
          b.xmax *= kx;
          b.ymin *= ky;
          b.ymax *= ky;
          bs.push_back(b);
        }
        out.boxes.push_back(std::move(bs));
        break;
      }
      case TaskKind::segmentation: {
        std::size_t h = 0, w = 0;
        std::vector<int> labels = read_label_png(e->mask, h, w);
        if (h != native.height || w != native.width) {
          throw ValidationError(m.path.string() + ":" + std::to_string(e->line) + ": mask size differs from image");
        }
        if (shape.height != h || shape.width != w) {
          std::vector<int> resized(shape.height * shape.width);
          for (std::size_t y = 0; y < shape.height; ++y) {
            for (std::size_t x = 0; x < shape.width; ++x) {
              resized[y * shape.width + x] = labels[(y * h / shape.height) * w + x * w / shape.width];
            }
          }
          labels = std::move(resized);
        }
        out.masks.push_back(std::move(labels));
        break;
      }
      case TaskKind::none: break;
    }
    out.images.push_back(std::move(img));
  }
  return out;
}

}  // namespace carpet

#endif  // CARPET_EXPERIMENT_MANIFEST_HPP
