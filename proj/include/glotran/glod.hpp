#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "glotran/imaging.hpp"
#include "glotran/regions.hpp"
#include "json.hpp"

// Curation of global-local image-text pairs: pre-filtering, dual-detector
// fusion, recognition fusion, back-translation fusion and quality control.
namespace glotran::glod {

struct QcThresholds {
  double ocr_confidence = 0.7;  // tau_ocr
  int min_regions = 3;
  int min_side = 448;
  double blur_floor = 50.0;  // Laplacian variance on grayscale
  double iou_min = 0.5;
  double embed = 0.75;      // tau_embed
  double roundtrip = 0.6;   // tau_roundtrip
  int rounds = 2;

  void validate() const;
};

struct RawSample {
  std::filesystem::path image_path;
  std::string image_id;
  std::string scene;
  bool license_permissive = false;
};

enum class RejectReason { kLowResolution, kBlur, kLowOcrConfidence, kLowTextRichness, kLicense };
std::string to_string(RejectReason reason);

struct FilterVerdict {
  bool accepted = true;
  std::vector<RejectReason> reasons;
};

/// Every failing check is reported; an empty detection set has mean confidence 0.
FilterVerdict prefilter(const RawSample& sample, const imaging::Image& img,
                        const regions::RegionSet& detections, const QcThresholds& t);

/// Greedy matching by descending IoU; matched pairs (IoU >= iou_min) become
/// their union with the larger confidence, unmatched boxes survive iff their
/// confidence >= ocr_floor. Output: a's boxes in order (fused where matched),
/// then b's unmatched survivors.
regions::RegionSet fuse_detections(const regions::RegionSet& a, const regions::RegionSet& b,
                                   double iou_min, double ocr_floor);

/// Marker for a token the local recognizer could not read.
inline const std::string kGapToken = "∅";

/// Local text is the backbone. Anchors are an LCS of the token sequences
/// (among ties, the one pairing the most gaps with context tokens). Between
/// anchors, gaps are filled from the context segment: wholesale when the local segment is all gaps, position by
/// position when the segments have equal length; otherwise left as is.
std::string fuse_recognition(const std::string& local_text, const std::string& context_text);

/// Character 3-gram count cosine (code points; texts shorter than 3 code
/// points count as one gram). 0 when either side is empty.
double ngram_cosine(const std::string& a, const std::string& b);
std::map<std::string, double> ngram_counts(const std::string& text);

class TranslationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Translator {
 public:
  virtual ~Translator() = default;
  virtual std::string name() const = 0;
  virtual std::string translate(const std::string& text, const std::string& src_lang,
                                const std::string& tgt_lang) = 0;
};

class IdentityTranslator : public Translator {
 public:
  std::string name() const override { return "identity"; }
  std::string translate(const std::string& text, const std::string&, const std::string&) override {
    return text;
  }
};

/// Word-level toy lexicon.
class LexiconTranslator : public Translator {
 public:
  explicit LexiconTranslator(std::string name = "lexicon") : name_(std::move(name)) {}
  std::string name() const override { return name_; }
  std::string translate(const std::string& text, const std::string& src_lang,
                        const std::string& tgt_lang) override;

 private:
  std::string name_;
};

/// Lexicon translator with exact-string overrides for the forward direction.
class ScriptedTranslator : public Translator {
 public:
  ScriptedTranslator(std::string name, std::map<std::string, std::string> overrides,
                     std::string src_lang = "en", std::string tgt_lang = "zh");
  /// Reads {"overrides": {...}} as written by the planted-corpus generator.
  static ScriptedTranslator from_file(std::string name, const std::filesystem::path& path);

  std::string name() const override { return name_; }
  std::string translate(const std::string& text, const std::string& src_lang,
                        const std::string& tgt_lang) override;

 private:
  std::string name_;
  std::map<std::string, std::string> overrides_;
  std::string src_lang_;
  std::string tgt_lang_;
};

/// POST {"text", "src_lang", "tgt_lang"} -> {"text"}.
class HttpTranslator : public Translator {
 public:
  HttpTranslator(std::string url, double timeout_seconds = 30.0);
  std::string name() const override { return "http:" + url_; }
  std::string translate(const std::string& text, const std::string& src_lang,
                        const std::string& tgt_lang) override;

 private:
  std::string url_;
  double timeout_;
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::string name() const = 0;
  virtual std::vector<double> embed(const std::string& text) = 0;
  /// Cosine of the embeddings, clamped to [0, 1].
  virtual double similarity(const std::string& a, const std::string& b);
};

/// Built-in deterministic embedder. similarity() is the exact n-gram cosine;
/// embed() is a hashed 1024-bucket view of the same counts.
class NgramEmbedder : public Embedder {
 public:
  std::string name() const override { return "char-3gram"; }
  std::vector<double> embed(const std::string& text) override;
  double similarity(const std::string& a, const std::string& b) override;
};

/// Mock cross-lingual embedder: maps target-language tokens into the source
/// language through the toy lexicon, then compares with the n-gram cosine.
class LexiconEmbedder : public Embedder {
 public:
  LexiconEmbedder(std::string pivot_lang = "en", std::string other_lang = "zh");
  std::string name() const override { return "lexicon-3gram"; }
  std::vector<double> embed(const std::string& text) override;
  double similarity(const std::string& a, const std::string& b) override;

 private:
  std::string pivot(const std::string& text) const;
  std::string pivot_lang_;
  std::string other_lang_;
};

/// POST {"text"} -> {"embedding": [...]}.
class HttpEmbedder : public Embedder {
 public:
  HttpEmbedder(std::string url, double timeout_seconds = 30.0);
  std::string name() const override { return "http:" + url_; }
  std::vector<double> embed(const std::string& text) override;

 private:
  std::string url_;
  double timeout_;
};

struct TranslationCandidate {
  int round = 0;
  std::string translator;  // producer
  std::string text;
  std::string best_back;   // best back-translation of `text`
  std::string back_by;
  double similarity = 0.0;  // ngram_cosine(src, best_back)
};

struct FusionResult {
  std::string fused;
  double similarity = 0.0;
  std::vector<TranslationCandidate> candidates;  // every round, in evaluation order
};

/// Round 1: every translator proposes a candidate; each candidate is
/// back-translated by every other translator (by itself when there is only
/// one) and scored by its best back-translation. Later rounds re-score the
/// prior winner together with each translator's translation of the winner's
/// best back-translation. Ties keep the earlier candidate (prior winner first).
FusionResult fuse_translation(const std::string& src, const std::vector<Translator*>& translators,
                              const std::string& src_lang, const std::string& tgt_lang,
                              int rounds = 2);

struct CurationSlice {
  BoundingBox box;
  std::string text_a;  // local recognition
  std::string text_b;  // context recognition
  std::string src_text;  // fused
  std::string translation;
  std::vector<TranslationCandidate> candidates;
  std::optional<double> region_sim;
  bool dropped = false;
};

struct QcScores {
  double embed_sim = 0.0;
  double roundtrip_sim = 0.0;
};

struct CurationRecord {
  std::string image_id;
  std::string scene;
  std::filesystem::path image_path;
  std::vector<CurationSlice> slices;
  std::string fused_source;
  std::vector<TranslationCandidate> candidates;
  std::string fused_translation;
  std::optional<QcScores> qc;
  std::string qc_note;  // e.g. embedder fallback provenance
};

struct QcVerdict {
  bool keep = false;
  QcScores scores;
  std::vector<std::size_t> dropped_slices;
  std::string note;
};

/// Scores `record` (filling record.qc and marking drifted slices) and decides
/// keep/drop. Slice k is compared against line k of the fused translation.
/// An embedder failure falls back to NgramEmbedder and records a note.
QcVerdict quality_control(CurationRecord& record, Embedder& embedder,
                          const std::vector<Translator*>& translators, const QcThresholds& t,
                          const std::string& src_lang = "en", const std::string& tgt_lang = "zh");

/// Emitted schema.
struct DatasetSlice {
  BoundingBox box;
  std::string src_text;
  std::string translation;
  friend bool operator==(const DatasetSlice&, const DatasetSlice&) = default;
};

struct DatasetRecord {
  std::string image_id;
  std::string scene;
  std::string global_image;  // relative to the dataset directory
  std::vector<DatasetSlice> slices;
  std::string fused_source;
  std::string fused_translation;
  double embed_sim = 0.0;
  double roundtrip_sim = 0.0;
  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

DatasetRecord to_dataset_record(const CurationRecord& record, const std::filesystem::path& out_dir);
nlohmann::ordered_json to_json(const DatasetRecord& record);
DatasetRecord dataset_record_from_json(const nlohmann::json& j);

/// Writes `dataset.jsonl` (sorted by image_id) and `manifest.json` (record
/// count and per-scene counts) into `out_dir`. Returns the records written.
std::size_t emit_dataset(std::vector<DatasetRecord> records, const std::filesystem::path& out_dir);
std::vector<DatasetRecord> read_dataset(const std::filesystem::path& jsonl_path);

/// Recognition contract: local (slice) and context (global) readings of a box.
struct Recognition {
  std::string local;
  std::string context;
};

class Recognizer {
 public:
  virtual ~Recognizer() = default;
  virtual std::string name() const = 0;
  virtual Recognition recognize(const RawSample& sample, const imaging::Image& img,
                                const BoundingBox& box) = 0;
};

/// Reads renderer sidecars: the context reading is exact, the local reading
/// drops a deterministic fraction of tokens to the gap marker.
class SidecarRecognizer : public Recognizer {
 public:
  explicit SidecarRecognizer(double gap_rate = 0.2) : gap_rate_(gap_rate) {}
  std::string name() const override { return "sidecar"; }
  Recognition recognize(const RawSample& sample, const imaging::Image& img,
                        const BoundingBox& box) override;

 private:
  double gap_rate_;
};

struct CurateOptions {
  QcThresholds thresholds;
  regions::GroupingParams grouping;
  std::string src_lang = "en";
  std::string tgt_lang = "zh";
  int workers = 1;
};

struct CurateContracts {
  regions::Detector* detector_a = nullptr;
  regions::Detector* detector_b = nullptr;
  Recognizer* recognizer = nullptr;
  std::vector<Translator*> translators;
  Embedder* embedder = nullptr;
};

enum class CurateOutcome { kKept, kRejected, kDroppedQc, kError };

struct AuditRow {
  std::string image_id;
  std::string scene;
  CurateOutcome outcome = CurateOutcome::kError;
  std::vector<std::string> reasons;
  std::optional<QcScores> qc;
  int slices = 0;
  int dropped_regions = 0;
  std::string note;
};

struct CurateReport {
  int total = 0;
  int kept = 0;
  int rejected = 0;
  int dropped_qc = 0;
  int errors = 0;
  int dropped_regions = 0;
  std::map<std::string, int> kept_per_scene;
  std::map<std::string, int> reason_counts;
  std::vector<AuditRow> audit;  // sorted by image_id
};

/// Curates every image with a sidecar in `input_dir` into `out_dir`
/// (dataset.jsonl, manifest.json, audit.csv).
CurateReport curate(const std::filesystem::path& input_dir, const std::filesystem::path& out_dir,
                    const CurateContracts& contracts, const CurateOptions& options);

void write_audit_csv(const CurateReport& report, const std::filesystem::path& path);

}  // namespace glotran::glod
