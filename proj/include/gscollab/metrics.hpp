#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gscollab/core.hpp"
#include "gscollab/voxel_grid.hpp"

namespace gscollab {

inline constexpr std::size_t kNumSemanticClasses = kNumClasses - 1;

/// Display names of the 13 classes (index 12 is empty).
const std::array<const char*, kNumClasses>& class_names();

enum class BevCategory : std::uint8_t { Vehicle = 0, Road = 1, Others = 2 };
inline constexpr std::size_t kNumBevCategories = 3;
const char* to_string(BevCategory c);

/// Assignment of every semantic class to a BEV category. Entries left unset
/// make bev_iou throw ConfigError.
struct CategoryMap {
  std::array<std::optional<BevCategory>, kNumSemanticClasses> of_class{};

  /// Vehicle = {vehicle}, road = {road}, others = every other semantic class.
  static CategoryMap standard();
};

struct EvalReport {
  double iou = 0.0;  // class-agnostic occupied vs empty
  double miou = 0.0;
  std::array<std::optional<double>, kNumSemanticClasses> per_class_iou{};  // empty: absent from both grids
  std::array<std::optional<double>, kNumBevCategories> bev_iou{};
};

/// Intersection / union counts; summing counts over many grids gives the
/// dataset-level IoU rather than a mean of per-grid values.
struct IouCounts {
  std::uint64_t occ_inter = 0, occ_union = 0;
  std::array<std::uint64_t, kNumSemanticClasses> inter{}, uni{};
  std::array<std::uint64_t, kNumBevCategories> bev_inter{}, bev_union{};

  IouCounts& operator+=(const IouCounts& o);
  EvalReport report() const;
};

/// Throws InvalidArgument when the geometries differ.
IouCounts count_3d(const LabelGrid& pred, const LabelGrid& gt);
/// Column projection onto the ground plane. Throws ConfigError for
/// semantic classes the map leaves unassigned.
IouCounts count_bev(const LabelGrid& pred, const LabelGrid& gt, const CategoryMap& map);

/// iou, per-class IoU and mIoU (classes absent from both grids excluded).
EvalReport iou_3d(const LabelGrid& pred, const LabelGrid& gt);
std::array<std::optional<double>, kNumBevCategories> bev_iou(const LabelGrid& pred, const LabelGrid& gt,
                                                             const CategoryMap& map);

}  // namespace gscollab
