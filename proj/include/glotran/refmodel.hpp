#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "glotran/geometry.hpp"
#include "glotran/imaging.hpp"

// Desk-scale reference model: shared patch encoder, projector, and a pre-norm
// decoder whose selected layers let local visual tokens cross-attend to global
// ones through a learned (source, proximity) bias table.
namespace glotran::refmodel {

using Matrix = Eigen::MatrixXd;
using IndexMatrix = Eigen::MatrixXi;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kFirstCharToken = 4;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RefModelConfig {
  int d_v = 8;
  int d_t = 16;
  int patch = 16;
  int enc_layers = 2;
  int dec_layers = 4;
  std::vector<int> cross_layers = {0, 2};
  int heads = 2;
  int vocab = 32;
  int buckets = 8;  // K
  int replay = 4;   // eta
  std::uint64_t seed = 7;
  int max_positions = 128;
  int mlp_ratio = 2;
  /// Admit local-to-local keys (source type 1) in cross-attention.
  bool local_keys = false;
  double lr = 3e-3;

  void validate() const;
  bool is_cross_layer(int layer) const;
};

/// key=value lines, '#' comments; unknown keys are errors.
RefModelConfig parse_config(const std::string& text);
RefModelConfig load_config(const std::filesystem::path& path);
std::string to_text(const RefModelConfig& cfg);

/// Named parameter groups, flattened in insertion order.
class Parameters {
 public:
  void add(const std::string& name, Matrix value);
  Matrix& operator[](const std::string& name);
  const Matrix& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Matrix>& values() { return values_; }
  const std::vector<Matrix>& values() const { return values_; }
  std::size_t count() const;  // total scalar entries
  bool all_finite() const;
  Parameters zeros_like() const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::map<std::string, std::size_t> index_;
};

/// Seeded scaled-uniform initialization, +-1/sqrt(fan_in).
Parameters init_parameters(const RefModelConfig& cfg);

/// RGB image as doubles in [0, 1], row-major interleaved.
struct ImageTensor {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  static ImageTensor from_image(const imaging::Image& img);
  double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

enum class ViewSource { kGlobal, kLocal };

struct VisualFeatures {
  Matrix raw;        // n x d_v
  Matrix projected;  // n x d_t; empty until projected
  imaging::PatchGrid grid;
  ViewSource source = ViewSource::kGlobal;
  std::optional<BoundingBox> slice_box;
};

/// Rows are patches in raster order, columns the flattened p x p x 3 pixels.
Matrix patchify(const ImageTensor& img, int patch);

VisualFeatures encode_view(const ImageTensor& img, const RefModelConfig& cfg, const Parameters& theta,
                           ViewSource source = ViewSource::kGlobal,
                           std::optional<BoundingBox> slice_box = std::nullopt);
Matrix project(const Matrix& raw, const Parameters& theta);

/// Bucket for two points already in normalized source coordinates.
int proximity_bucket(double ax, double ay, double bx, double by, int buckets);
/// Local token (row, col) of a slice grid placed at `slice_box` versus global
/// token (row, col) of a grid spanning the whole source image.
int proximity_bucket(int local_row, int local_col, const imaging::PatchGrid& local_grid,
                     const BoundingBox& slice_box, int global_row, int global_col,
                     const imaging::PatchGrid& global_grid, int source_width, int source_height,
                     int buckets);

/// Per (query, key) source type and bucket indexing the 2 x K bias table.
struct CrossGeometry {
  IndexMatrix source;  // 0 = global key, 1 = local key
  IndexMatrix bucket;
};

CrossGeometry build_geometry(const imaging::PatchGrid& local_grid, const BoundingBox& slice_box,
                             const imaging::PatchGrid& global_grid, int source_width,
                             int source_height, int buckets, bool local_keys);

struct CrossAttention {
  Matrix output;                     // n_s x d_t
  std::vector<Matrix> probabilities;  // per head, n_s x n_keys
};

/// Q = V_local, K = V = V_global (plus V_local when geometry has local keys);
/// per-head logits q.k / sqrt(d_t) + bias, row softmax, residual add.
CrossAttention cross_attend(const Matrix& local, const Matrix& global, const Matrix& bias,
                            const CrossGeometry& geometry, int heads);

enum class ReplaySource { kGroundTruth, kModel };

struct SliceSample {
  ImageTensor image;
  BoundingBox box;
  std::vector<int> target;  // Y_i, character token ids
};

struct ToyRecord {
  ImageTensor global;
  int source_width = 0;
  int source_height = 0;
  std::vector<SliceSample> slices;
};

using ToyDataset = std::vector<ToyRecord>;

/// Synthetic records: random blocky source images, a downsampled global view,
/// and `slices_per_record` distinct quadrant crops with random targets.
ToyDataset make_toy_dataset(int records, const RefModelConfig& cfg, std::uint64_t seed,
                            int source_size = 64, int global_size = 32, int slices_per_record = 2);

/// Layout [E_g; V_g; E_l; V_i; text]. The text part is the replay entries
/// (each followed by SEP), then BOS and the current target.
struct DecoderInput {
  int n_global = 0;
  int n_local = 0;
  std::vector<int> text;              // token ids
  std::vector<int> targets;           // per text position, next-token id
  std::vector<bool> mask;             // per text position
  std::vector<std::vector<int>> replay;
  ReplaySource replay_source = ReplaySource::kGroundTruth;
  std::size_t record = 0;
  std::size_t slice = 0;

  int length() const { return 2 + n_global + n_local + static_cast<int>(text.size()); }
  int text_offset() const { return 2 + n_global + n_local; }
  /// Mask over all L positions.
  std::vector<bool> full_mask() const;
};

DecoderInput make_decoder_input(const ToyRecord& record, std::size_t slice,
                                const std::vector<std::vector<int>>& prior, ReplaySource source,
                                const RefModelConfig& cfg, const std::vector<int>& current,
                                bool with_eos_target = true);

/// Training-path inputs: replay filled with ground-truth Y_<i.
std::vector<DecoderInput> teacher_forced_inputs(const ToyRecord& record, const RefModelConfig& cfg);

/// Logits (L x vocab) over the whole sequence.
Matrix decode_step(const ToyRecord& record, const DecoderInput& input, const RefModelConfig& cfg,
                   const Parameters& theta);

struct Generation {
  std::vector<std::vector<int>> outputs;  // Y-hat per slice
  std::vector<DecoderInput> inputs;       // final input constructed per slice
};

/// Greedy inference; each slice's replay holds the model's own earlier outputs.
Generation generate(const ToyRecord& record, const RefModelConfig& cfg, const Parameters& theta,
                    int max_tokens = 8);

class EmptyMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossValue {
  double objective = 0.0;       // per-slice token means, summed over slices, averaged over records
  double per_token = 0.0;       // mean -log p over every masked token
  long long masked_tokens = 0;
};

struct LossOptions {
  bool teacher_forcing = true;
  /// Slices without masked tokens contribute 0 instead of raising.
  bool allow_empty_mask = false;
  /// Zero every mask (gradient-plumbing check).
  bool zero_mask = false;
};

LossValue loss(const ToyDataset& batch, const RefModelConfig& cfg, const Parameters& theta,
               const LossOptions& opts = {});
/// Loss and analytic gradients for every group.
LossValue loss_and_grad(const ToyDataset& batch, const RefModelConfig& cfg, const Parameters& theta,
                        Parameters& grad, const LossOptions& opts = {});

struct GroupError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GroupError> groups;
  Parameters analytic;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Entries checked per group; groups at most this size are checked fully,
  /// larger ones on a seeded sample.
  std::size_t max_entries_per_group = 96;
  double denominator_floor = 1e-5;
  std::uint64_t seed = 11;
  LossOptions loss;
};

/// Central differences against the analytic gradient. Relative error is
/// |a - n| / max(|a|, |n|, floor).
GradCheckReport grad_check(const RefModelConfig& cfg, const Parameters& theta,
                           const ToyDataset& probe, const GradCheckOptions& opts = {});

struct AdamState {
  Parameters m;
  Parameters v;
  long long step = 0;
};

struct TrainState {
  Parameters theta;
  AdamState adam;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(long long step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  long long step() const { return step_; }

 private:
  long long step_;
};

struct LossPoint {
  long long step = 0;
  double objective = 0.0;
  double per_token = 0.0;
};

struct TrainResult {
  TrainState state;
  std::vector<LossPoint> curve;  // entry k is the loss before update k; last is after training
};

/// Full-batch Adam (beta1 0.9, beta2 0.999, eps 1e-8, lr from cfg).
TrainResult train(const ToyDataset& dataset, const RefModelConfig& cfg, long long steps,
                  std::optional<Parameters> init = std::nullopt);

void save_checkpoint(const std::filesystem::path& path, const Parameters& theta);
Parameters load_checkpoint(const std::filesystem::path& path);
void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& curve);

}  // namespace glotran::refmodel
