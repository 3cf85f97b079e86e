#pragma once

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "glotran/geometry.hpp"
#include "glotran/imaging.hpp"

namespace glotran::regions {

struct RegionSet {
  std::vector<BoundingBox> boxes;
  int source_width = 0;
  int source_height = 0;

  std::size_t size() const { return boxes.size(); }
  bool empty() const { return boxes.empty(); }
  friend bool operator==(const RegionSet&, const RegionSet&) = default;
};

struct LineCluster {
  std::vector<std::size_t> members;  // indices into the region set
  double baseline_y = 0.0;           // lowest bottom edge of the members
  double line_height = 0.0;          // median member height
  int top = 0;
};

struct SliceGroup {
  std::vector<BoundingBox> members;
  BoundingBox union_box;
  int order_index = 0;
};

struct GroupingParams {
  double alpha = 1.0;  // horizontal gap, in median line heights
  double beta = 0.5;   // same-line center offset, in median line heights
  double gamma = 1.5;  // vertical line gap, in median line heights
  /// Left-edge alignment tolerance in px; negative means 0.5 x median line height.
  double align_tol = -1.0;

  void validate() const;
};

/// Everything a detector gets to see about one image.
struct DetectionRequest {
  const imaging::Image& image;
  std::string image_id;
  std::filesystem::path source_path;  // empty when the image did not come from disk
};

class DetectionError : public std::runtime_error {
 public:
  DetectionError(std::string detector, const std::string& cause);
  const std::string& detector() const { return detector_; }

 private:
  std::string detector_;
};

/// Image in, axis-aligned boxes with confidences out.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::string name() const = 0;
  virtual std::vector<BoundingBox> detect(const DetectionRequest& request) = 0;
};

/// Returns a fixed list of boxes regardless of the image.
class StaticDetector : public Detector {
 public:
  explicit StaticDetector(std::vector<BoundingBox> boxes) : boxes_(std::move(boxes)) {}
  std::string name() const override { return "static"; }
  std::vector<BoundingBox> detect(const DetectionRequest&) override { return boxes_; }

 private:
  std::vector<BoundingBox> boxes_;
};

/// Reads ground-truth boxes from the `<image>.json` sidecar written by the
/// synthetic renderer (the "regions" array).
class SidecarDetector : public Detector {
 public:
  explicit SidecarDetector(int jitter_px = 0) : jitter_(jitter_px) {}
  std::string name() const override { return jitter_ ? "sidecar-jitter" : "sidecar"; }
  std::vector<BoundingBox> detect(const DetectionRequest& request) override;

 private:
  int jitter_;
};

/// Posts the PNG-encoded image to `url` and parses {"boxes":[{x_min,...}]}.
class HttpDetector : public Detector {
 public:
  HttpDetector(std::string url, double timeout_seconds = 30.0);
  std::string name() const override { return "http:" + url_; }
  std::vector<BoundingBox> detect(const DetectionRequest& request) override;

 private:
  std::string url_;
  double timeout_;
};

/// Boxes are clamped to the image and zero-area boxes dropped; order is kept.
RegionSet detect_regions(const DetectionRequest& request, Detector& detector);

/// Line clusters: connected components of the co-linearity relation (vertical
/// overlap >= 50% of the shorter box), sorted top to bottom.
std::vector<LineCluster> cluster_lines(const RegionSet& rs);

/// Reading order: lines top to bottom, boxes left to right within a line.
RegionSet order_regions(const RegionSet& rs);

/// Median box height; 0 for an empty set.
double median_line_height(const RegionSet& rs);

/// Merges an ordered region set into slice groups (connected components of the
/// pairwise mergeable relation), indexed 0..N_s-1 in reading order.
std::vector<SliceGroup> merge_regions(const RegionSet& ordered, const GroupingParams& params);

/// Pairwise mergeable relation over an ordered set; used by merge_regions.
class MergeRelation {
 public:
  MergeRelation(const RegionSet& ordered, const GroupingParams& params);
  bool mergeable(std::size_t a, std::size_t b) const;
  std::size_t line_of(std::size_t i) const { return line_of_[i]; }

 private:
  const RegionSet& rs_;
  GroupingParams params_;
  double unit_ = 0.0;
  double align_tol_ = 0.0;
  std::vector<std::size_t> line_of_;
};

struct Slice {
  SliceGroup group;
  imaging::SliceCrop crop;
};

std::vector<Slice> build_slices(const imaging::Image& img, const RegionSet& rs,
                                const GroupingParams& params,
                                int cap = imaging::kDefaultSliceCap);

}  // namespace glotran::regions
