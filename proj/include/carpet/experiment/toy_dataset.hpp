#ifndef CARPET_EXPERIMENT_TOY_DATASET_HPP
#define CARPET_EXPERIMENT_TOY_DATASET_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <tuple>

#include <nlohmann/json.hpp>

#include "carpet/core/patch_io.hpp"
#include "carpet/model/toy_data.hpp"

namespace carpet::toy {

namespace detail {

inline void write_line(std::ofstream& out, const nlohmann::json& j) { out << j.dump() << "\n"; }

}  // namespace detail

/// PNG dataset plus classification, detection and segmentation manifests.
inline void write_toy_dataset(const std::filesystem::path& out, std::size_t n_train, std::size_t n_eval,
                              std::uint64_t seed, DomainShift shift = DomainShift::none) {
  std::filesystem::create_directories(out / "images");
  std::filesystem::create_directories(out / "masks");
  std::ofstream cls(out / "classification.jsonl"), det(out / "detection.jsonl"), seg(out / "segmentation.jsonl");
  const nlohmann::json splits{{"train_attack", n_train}, {"eval", n_eval}};
  detail::write_line(cls, {{"meta", {{"task", "classification"}, {"num_classes", kToyClasses}, {"splits", splits}}}});
  detail::write_line(det, {{"meta", {{"task", "detection"}, {"num_classes", kToyClasses}, {"splits", splits}}}});
  detail::write_line(seg, {{"meta", {{"task", "segmentation"}, {"num_classes", 2}, {"splits", splits}}}});
  for (const auto& [split, n, s] :
       {std::tuple{"train_attack", n_train, seed}, std::tuple{"eval", n_eval, seed + 1}}) {
    ToyDataConfig dc;
    dc.seed = s;
    dc.shift = shift;
    const auto data = make_toy_dataset(n, dc);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::string stem = std::string(split) + "_" + std::to_string(i);
      const std::string img = "images/" + stem + ".png", mask = "masks/" + stem + ".png";
      write_png(out / img, data[i].image.tensor());
      write_label_png(out / mask, data[i].mask, dc.size, dc.size);
      const Box& b = data[i].box;
      detail::write_line(cls, {{"image", img}, {"label", data[i].label}, {"split", split}});
      detail::write_line(det, {{"image", img}, {"boxes", {{b.xmin, b.ymin, b.xmax, b.ymax, b.class_id}}}, {"split", split}});
      detail::write_line(seg, {{"image", img}, {"mask", mask}, {"split", split}});
    }
  }
}

}  // namespace carpet::toy

#endif  // CARPET_EXPERIMENT_TOY_DATASET_HPP
