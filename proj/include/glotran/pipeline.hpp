#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "glotran/imaging.hpp"
#include "glotran/metrics.hpp"
#include "glotran/prompt.hpp"
#include "glotran/regions.hpp"
#include "json.hpp"

// The regressive per-slice translation loop.
namespace glotran::pipeline {

struct RetryPolicy {
  int max_attempts = 3;
  double base_backoff = 0.5;  // seconds before the second attempt
  double multiplier = 2.0;

  void validate() const;
  /// Delay slept before attempt number `attempt` (1-based); 0 for the first.
  double delay_before(int attempt) const;
};

struct PipelineConfig {
  int global_resolution = 224;
  int slice_cap = imaging::kDefaultSliceCap;
  int replay = prompt::kDefaultReplay;
  int patch_size = 16;  // only used for Token^V accounting
  regions::GroupingParams grouping;
  RetryPolicy retry;
  std::string src_lang = "en";
  std::string tgt_lang = "zh";
  /// Text emitted for failed slices in the assembled document; nullopt omits them.
  std::optional<std::string> failed_placeholder;
  prompt::TemplateSet templates = prompt::TemplateSet::defaults();

  void validate() const;
};

struct GenerationParams {
  std::string model;
  int max_tokens = 512;
  double temperature = 0.0;
};

/// Which slice a request belongs to; adapters may ignore it.
struct SliceContext {
  std::string image_id;
  int order_index = 0;
  BoundingBox source_box;
};

struct BackendRequest {
  prompt::MessageSequence messages;
  GenerationParams params;
  SliceContext context;
};

struct BackendResponse {
  std::string text;
  /// Seconds from request start to the first response byte; negative if the
  /// adapter cannot tell, in which case the call latency is used.
  double first_byte_seconds = -1.0;
};

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Implementations must tolerate concurrent calls from different image workers.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string name() const = 0;
  virtual BackendResponse translate(const BackendRequest& request) = 0;
};

/// Deterministic mock answering from renderer sidecars: a slice's translation
/// is the space-joined translations of the ground-truth regions whose centers
/// fall inside the slice box, in reading order.
class LookupBackend : public Backend {
 public:
  LookupBackend() = default;
  /// Registers every `*.json` sidecar in `dir`.
  explicit LookupBackend(const std::filesystem::path& dir);

  void add_sidecar(const std::filesystem::path& sidecar_path);
  std::string name() const override { return "lookup"; }
  BackendResponse translate(const BackendRequest& request) override;

 private:
  struct Entry {
    BoundingBox box;
    std::string translation;
  };
  mutable std::mutex mutex_;
  std::unordered_map<std::string, std::vector<Entry>> table_;
};

/// Chat-completion style adapter: POST {base_url}/chat/completions with the
/// message sequence as multimodal content parts (PNG data URLs). The bearer
/// token comes from GLOTRAN_API_TOKEN.
class HttpChatBackend : public Backend {
 public:
  HttpChatBackend(std::string base_url, double timeout_seconds = 60.0);
  std::string name() const override { return "http:" + base_url_; }
  BackendResponse translate(const BackendRequest& request) override;

  /// Request body for `request`; exposed for tests.
  static nlohmann::json request_body(const BackendRequest& request);

 private:
  std::string base_url_;
  double timeout_;
};

enum class SliceStatus { kOk, kFailed };

struct SliceResult {
  int order_index = 0;
  BoundingBox source_box;
  std::string translation;
  SliceStatus status = SliceStatus::kFailed;
  int attempts = 0;
  double latency = 0.0;          // seconds across all attempts
  double first_byte_latency = 0.0;  // of the successful attempt
  double request_start = 0.0;    // seconds since the image started
  std::string error;
};

struct DocumentStats {
  int n_boxes = 0;
  int n_slices = 0;
  double total_latency = 0.0;
  double first_token_latency = 0.0;
  long long visual_tokens = 0;
};

struct DocumentResult {
  std::string image_id;
  std::vector<SliceResult> slices;
  std::string document;
  DocumentStats stats;

  int failed_slices() const;
};

struct ImageInput {
  imaging::Image image;
  std::string image_id;
  std::filesystem::path source_path;
};

std::string assemble_document(const std::vector<SliceResult>& slices,
                              const std::optional<std::string>& failed_placeholder = std::nullopt);

/// One slice: prompt, message sequence, backend call with retries.
SliceResult translate_slice(int slice_number, std::shared_ptr<const imaging::Image> global_image,
                            const imaging::SliceCrop& slice, const prompt::ReplayWindow& window,
                            const PipelineConfig& cfg, Backend& backend,
                            const SliceContext& context, const GenerationParams& params = {});

/// detect -> order -> merge -> crop/downsample -> sequential slice loop. Only
/// successful translations enter the replay window. Detector errors propagate.
DocumentResult translate_image(const ImageInput& input, const PipelineConfig& cfg,
                               regions::Detector& detector, Backend& backend,
                               const GenerationParams& params = {});

/// Line-delimited record; timing fields omitted when `with_timing` is false.
nlohmann::ordered_json to_json(const DocumentResult& result, bool with_timing = true);

struct BatchSkip {
  std::string file;
  std::string reason;
};

struct BatchReport {
  int records = 0;
  std::vector<BatchSkip> skipped;
  long long total_slices = 0;
  long long ok_slices = 0;
  double coverage = 0.0;  // ok slices / total slices; 1.0 when there are none
  metrics::EfficiencyReport efficiency;
  std::optional<double> bleu;  // when every image had a reference sidecar
  int failed_slices = 0;
};

nlohmann::ordered_json to_json(const BatchReport& report);

/// Images (*.png, *.jpg, *.jpeg) in `input_dir` sorted by name, processed by
/// `workers` threads; records written in input order to `out_path`.
BatchReport run_batch(const std::filesystem::path& input_dir, const PipelineConfig& cfg,
                      regions::Detector& detector, Backend& backend,
                      const std::filesystem::path& out_path, int workers = 1,
                      const GenerationParams& params = {});

/// Same as run_batch over an explicit file list (processed and written in the
/// given order).
BatchReport run_files(const std::vector<std::filesystem::path>& files, const PipelineConfig& cfg,
                      regions::Detector& detector, Backend& backend,
                      const std::filesystem::path& out_path, int workers = 1,
                      const GenerationParams& params = {});

struct SweepCell {
  int replay = 0;
  int resolution = 0;
  std::optional<double> bleu;
  double mean_visual_tokens = 0.0;
  double coverage = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // replay-major, resolutions in the given order
  /// Mean Token^V strictly increases along the resolution axis for every replay row.
  bool visual_tokens_monotone = true;
};

/// Runs the whole file list once per (replay, resolution) cell. Per-cell
/// records land in `work_dir`.
SweepResult run_sweep(const std::vector<std::filesystem::path>& files, const PipelineConfig& base,
                      const std::vector<int>& replays, const std::vector<int>& resolutions,
                      regions::Detector& detector, Backend& backend,
                      const std::filesystem::path& work_dir, int workers = 1);

void write_sweep_csv(const SweepResult& result, const std::filesystem::path& path);
/// Wide plot-ready table: one row per replay size, Token^V then BLEU per resolution.
std::string sweep_table(const SweepResult& result);
/// Reference optimum from the full-scale system, for comparison only.
std::string sweep_reference_note();

/// Image files (*.png, *.jpg, *.jpeg) directly inside `dir`, sorted by name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace glotran::pipeline
