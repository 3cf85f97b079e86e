#include "glotran/regions.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <tuple>

#include "glotran/http.hpp"
#include "glotran/synth.hpp"
#include "json.hpp"

namespace glotran::regions {

namespace {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

bool colinear(const BoundingBox& a, const BoundingBox& b) {
  const int overlap = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  return 2 * overlap >= std::min(a.height(), b.height());
}

// Full-value key so equal boxes are the only ones whose relative order depends
// on input position.
auto box_key(const BoundingBox& b) {
  return std::make_tuple(b.x_min, b.y_min, b.x_max, b.y_max, b.confidence);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int jitter_offset(const std::string& id, int coord, int amplitude) {
  std::uint32_t h = 2166136261u;
  for (char c : id) h = (h ^ static_cast<unsigned char>(c)) * 16777619u;
  h = (h ^ static_cast<std::uint32_t>(coord)) * 16777619u;
  return static_cast<int>(h % static_cast<std::uint32_t>(2 * amplitude + 1)) - amplitude;
}

}  // namespace

void GroupingParams::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) {
    throw std::invalid_argument("grouping factors must be non-negative");
  }
}

DetectionError::DetectionError(std::string detector, const std::string& cause)
    : std::runtime_error("detector '" + detector + "' failed: " + cause),
      detector_(std::move(detector)) {}

std::vector<BoundingBox> SidecarDetector::detect(const DetectionRequest& request) {
  if (request.source_path.empty()) throw std::runtime_error("no source path for sidecar lookup");
  const auto truth = synth::read_sidecar(synth::sidecar_path_for(request.source_path));
  std::vector<BoundingBox> out;
  for (const auto& r : truth.regions) {
    BoundingBox b = r.box;
    if (jitter_) {
      b.x_min += jitter_offset(r.id, 0, jitter_);
      b.y_min += jitter_offset(r.id, 1, jitter_);
      b.x_max += jitter_offset(r.id, 2, jitter_);
      b.y_max += jitter_offset(r.id, 3, jitter_);
      b.confidence = std::max(0.0, b.confidence - 0.02);
    }
    out.push_back(b);
  }
  return out;
}

HttpDetector::HttpDetector(std::string url, double timeout_seconds)
    : url_(std::move(url)), timeout_(timeout_seconds) {}

std::vector<BoundingBox> HttpDetector::detect(const DetectionRequest& request) {
  const auto png = imaging::encode_png(request.image);
  http::Headers headers;
  if (auto token = http::api_token_from_env(); !token.empty()) {
    headers.emplace_back("Authorization", "Bearer " + token);
  }
  const auto res = http::post(url_, std::string(png.begin(), png.end()), "image/png", headers,
                              timeout_);
  const auto body = nlohmann::json::parse(res.body);
  std::vector<BoundingBox> out;
  for (const auto& b : body.at("boxes")) {
    out.push_back({b.at("x_min").get<int>(), b.at("y_min").get<int>(), b.at("x_max").get<int>(),
                   b.at("y_max").get<int>(), b.value("confidence", 1.0)});
  }
  return out;
}

RegionSet detect_regions(const DetectionRequest& request, Detector& detector) {
  std::vector<BoundingBox> raw;
  try {
    raw = detector.detect(request);
  } catch (const std::exception& e) {
    throw DetectionError(detector.name(), e.what());
  }
  const int w = request.image.width();
  const int h = request.image.height();
  RegionSet rs{{}, w, h};
  for (BoundingBox b : raw) {
    b.x_min = std::clamp(b.x_min, 0, w);
    b.x_max = std::clamp(b.x_max, 0, w);
    b.y_min = std::clamp(b.y_min, 0, h);
    b.y_max = std::clamp(b.y_max, 0, h);
    b.confidence = std::clamp(b.confidence, 0.0, 1.0);
    if (b.width() > 0 && b.height() > 0) rs.boxes.push_back(b);
  }
  return rs;
}

double median_line_height(const RegionSet& rs) {
  std::vector<double> heights;
  heights.reserve(rs.size());
  for (const auto& b : rs.boxes) heights.push_back(b.height());
  return median(std::move(heights));
}

std::vector<LineCluster> cluster_lines(const RegionSet& rs) {
  const std::size_t n = rs.size();
  DisjointSets sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (colinear(rs.boxes[i], rs.boxes[j])) sets.unite(i, j);
    }
  }
  std::vector<LineCluster> lines;
  std::vector<std::ptrdiff_t> slot(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t root = sets.find(i);
    if (slot[root] < 0) {
      slot[root] = static_cast<std::ptrdiff_t>(lines.size());
      lines.emplace_back();
    }
    lines[static_cast<std::size_t>(slot[root])].members.push_back(i);
  }
  for (auto& line : lines) {
    std::vector<double> heights;
    line.top = rs.boxes[line.members.front()].y_min;
    for (auto m : line.members) {
      const auto& b = rs.boxes[m];
      heights.push_back(b.height());
      line.top = std::min(line.top, b.y_min);
      line.baseline_y = std::max(line.baseline_y, static_cast<double>(b.y_max));
    }
    line.line_height = median(std::move(heights));
    std::sort(line.members.begin(), line.members.end(), [&](std::size_t a, std::size_t b) {
      return std::tuple_cat(box_key(rs.boxes[a]), std::make_tuple(a)) <
             std::tuple_cat(box_key(rs.boxes[b]), std::make_tuple(b));
    });
  }
  // Distinct lines never share a top edge: two boxes starting at the same y
  // overlap by the shorter height and would be co-linear.
  std::sort(lines.begin(), lines.end(),
            [](const LineCluster& a, const LineCluster& b) { return a.top < b.top; });
  return lines;
}

RegionSet order_regions(const RegionSet& rs) {
  RegionSet out{{}, rs.source_width, rs.source_height};
  out.boxes.reserve(rs.size());
  for (const auto& line : cluster_lines(rs)) {
    for (auto m : line.members) out.boxes.push_back(rs.boxes[m]);
  }
  return out;
}

MergeRelation::MergeRelation(const RegionSet& ordered, const GroupingParams& params)
    : rs_(ordered), params_(params), line_of_(ordered.size()) {
  params.validate();
  unit_ = median_line_height(ordered);
  align_tol_ = params.align_tol < 0 ? 0.5 * unit_ : params.align_tol;
  const auto lines = cluster_lines(ordered);
  for (std::size_t l = 0; l < lines.size(); ++l) {
    for (auto m : lines[l].members) line_of_[m] = l;
  }
}

bool MergeRelation::mergeable(std::size_t a, std::size_t b) const {
  const BoundingBox& p = rs_.boxes[a];
  const BoundingBox& q = rs_.boxes[b];
  if (line_of_[a] == line_of_[b]) {
    if (params_.alpha <= 0) return false;
    const double h_gap = std::max(0, std::max(p.x_min, q.x_min) - std::min(p.x_max, q.x_max));
    const double dy = std::abs(p.center_y() - q.center_y());
    return h_gap <= params_.alpha * unit_ && dy <= params_.beta * unit_;
  }
  if (params_.gamma <= 0) return false;
  const int v_gap = std::max(p.y_min, q.y_min) - std::min(p.y_max, q.y_max);
  if (v_gap < 0) return false;  // vertically overlapping boxes on different lines
  return std::abs(p.x_min - q.x_min) <= align_tol_ && v_gap <= params_.gamma * unit_;
}

std::vector<SliceGroup> merge_regions(const RegionSet& ordered, const GroupingParams& params) {
  const std::size_t n = ordered.size();
  if (n == 0) return {};
  const MergeRelation relation(ordered, params);
  DisjointSets sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (relation.mergeable(i, j)) sets.unite(i, j);
    }
  }
  // Roots are the minimum member index, so iterating in order visits groups by
  // their first member.
  std::vector<SliceGroup> groups;
  std::vector<std::ptrdiff_t> slot(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t root = sets.find(i);
    if (slot[root] < 0) {
      slot[root] = static_cast<std::ptrdiff_t>(groups.size());
      SliceGroup g;
      g.union_box = ordered.boxes[i];
      g.order_index = static_cast<int>(groups.size());
      groups.push_back(std::move(g));
    }
    auto& g = groups[static_cast<std::size_t>(slot[root])];
    g.members.push_back(ordered.boxes[i]);
    g.union_box = box_union(g.union_box, ordered.boxes[i]);
  }
  return groups;
}

std::vector<Slice> build_slices(const imaging::Image& img, const RegionSet& rs,
                                const GroupingParams& params, int cap) {
  std::vector<Slice> out;
  for (auto& group : merge_regions(order_regions(rs), params)) {
    auto crop = imaging::crop_region(img, group.union_box, cap);
    out.push_back({std::move(group), std::move(crop)});
  }
  return out;
}

}  // namespace glotran::regions
