#include "gscollab/metrics.hpp"

namespace gscollab {

const std::array<const char*, kNumClasses>& class_names() {
  static const std::array<const char*, kNumClasses> names{
      "building", "fence",    "terrain",    "pole",       "road",  "sidewalk", "vegetation",
      "vehicle",  "wall",     "traffic_sign", "pedestrian", "other", "empty"};
  return names;
}

const char* to_string(BevCategory c) {
  switch (c) {
    case BevCategory::Vehicle: return "vehicle";
    case BevCategory::Road: return "road";
    case BevCategory::Others: return "others";
  }
  return "?";
}

CategoryMap CategoryMap::standard() {
  CategoryMap m;
  for (auto& c : m.of_class) c = BevCategory::Others;
  m.of_class[cls::kVehicle] = BevCategory::Vehicle;
  m.of_class[cls::kRoad] = BevCategory::Road;
  return m;
}

IouCounts& IouCounts::operator+=(const IouCounts& o) {
  occ_inter += o.occ_inter;
  occ_union += o.occ_union;
  for (std::size_t c = 0; c < kNumSemanticClasses; ++c) {
    inter[c] += o.inter[c];
    uni[c] += o.uni[c];
  }
  for (std::size_t c = 0; c < kNumBevCategories; ++c) {
    bev_inter[c] += o.bev_inter[c];
    bev_union[c] += o.bev_union[c];
  }
  return *this;
}

EvalReport IouCounts::report() const {
  EvalReport r;
  r.iou = occ_union == 0 ? 1.0 : static_cast<double>(occ_inter) / static_cast<double>(occ_union);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < kNumSemanticClasses; ++c) {
    if (uni[c] == 0) continue;
    r.per_class_iou[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    sum += *r.per_class_iou[c];
    ++n;
  }
  r.miou = n == 0 ? 1.0 : sum / static_cast<double>(n);
  for (std::size_t c = 0; c < kNumBevCategories; ++c) {
    if (bev_union[c] > 0) r.bev_iou[c] = static_cast<double>(bev_inter[c]) / static_cast<double>(bev_union[c]);
  }
  return r;
}

namespace {

void require_same_geometry(const LabelGrid& a, const LabelGrid& b) {
  if (!(a.geometry == b.geometry) || a.labels.size() != b.labels.size()) {
    throw InvalidArgument("metrics: prediction and ground-truth geometry differ");
  }
}

}  // namespace

IouCounts count_3d(const LabelGrid& pred, const LabelGrid& gt) {
  require_same_geometry(pred, gt);
  IouCounts k;
  for (std::size_t v = 0; v < gt.labels.size(); ++v) {
    const std::uint8_t p = pred.labels[v], g = gt.labels[v];
    if (p >= kNumClasses || g >= kNumClasses) throw Error(ErrorCode::InvalidLabel, "metrics: label out of range");
    const bool po = p != kEmptyClass, go = g != kEmptyClass;
    k.occ_inter += po && go;
    k.occ_union += po || go;
    if (po) ++k.uni[p];
    if (go && g != p) ++k.uni[g];
    if (po && p == g) ++k.inter[p];
  }
  return k;
}

IouCounts count_bev(const LabelGrid& pred, const LabelGrid& gt, const CategoryMap& map) {
  require_same_geometry(pred, gt);
  for (std::size_t c = 0; c < kNumSemanticClasses; ++c) {
    if (!map.of_class[c]) {
      throw Error(ErrorCode::ConfigError, std::string("bev: class ") + class_names()[c] + " has no category");
    }
  }
  IouCounts k;
  const auto& d = gt.geometry.dims;
  for (std::uint32_t ix = 0; ix < d[0]; ++ix) {
    for (std::uint32_t iy = 0; iy < d[1]; ++iy) {
      std::array<bool, kNumBevCategories> pc{}, gc{};
      for (std::uint32_t iz = 0; iz < d[2]; ++iz) {
        const std::size_t v = gt.geometry.index(ix, iy, iz);
        if (pred.labels[v] < kNumSemanticClasses) pc[static_cast<std::size_t>(*map.of_class[pred.labels[v]])] = true;
        if (gt.labels[v] < kNumSemanticClasses) gc[static_cast<std::size_t>(*map.of_class[gt.labels[v]])] = true;
      }
      for (std::size_t c = 0; c < kNumBevCategories; ++c) {
        k.bev_inter[c] += pc[c] && gc[c];
        k.bev_union[c] += pc[c] || gc[c];
      }
    }
  }
  return k;
}

EvalReport iou_3d(const LabelGrid& pred, const LabelGrid& gt) {
  EvalReport r = count_3d(pred, gt).report();
  r.bev_iou = {};
  return r;
}

std::array<std::optional<double>, kNumBevCategories> bev_iou(const LabelGrid& pred, const LabelGrid& gt,
                                                             const CategoryMap& map) {
  return count_bev(pred, gt, map).report().bev_iou;
}

}  // namespace gscollab
