#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "glotran/regions.hpp"

namespace glotran::metrics {

enum class Tokenization { kWhitespace, kCharacter };
enum class Smoothing { kNone, kAddOneOnZero };

struct BleuConfig {
  int max_n = 4;
  Smoothing smoothing = Smoothing::kAddOneOnZero;
  Tokenization tokenization = Tokenization::kWhitespace;
};

/// Character tokenization for zh/ja/jp/ko targets, whitespace otherwise.
Tokenization tokenization_for(const std::string& lang);

/// Whitespace split, or UTF-8 code points with whitespace dropped.
std::vector<std::string> tokenize(const std::string& text, Tokenization mode);

struct BleuStats {
  std::vector<long long> matches;  // clipped n-gram matches, n = 1..max_n
  std::vector<long long> totals;   // hypothesis n-gram counts
  std::vector<double> precisions;
  long long hyp_length = 0;
  long long ref_length = 0;
  double brevity_penalty = 0.0;
  double score = 0.0;  // percent
};

/// Corpus BLEU in percent. Throws std::invalid_argument on length mismatch or
/// an empty corpus.
BleuStats bleu_stats(std::span<const std::string> hypotheses, std::span<const std::string> references,
                     const BleuConfig& cfg = {});
double bleu(std::span<const std::string> hypotheses, std::span<const std::string> references,
            const BleuConfig& cfg = {});

/// Token^V: global grid tokens plus the grid tokens of every capped slice.
long long count_visual_tokens(int global_resolution, std::span<const regions::SliceGroup> groups,
                              int slice_cap, int patch_size);

enum class TimingKind { kImageStart, kRequestStart, kFirstByte, kImageEnd };

struct TimingEvent {
  std::string image_id;
  TimingKind kind;
  double t = 0.0;  // seconds on a common clock
};

struct EfficiencyReport {
  double mean_visual_tokens = 0.0;
  double first_token_latency = 0.0;
  double fps = 0.0;
  int images = 0;
  double wall_seconds = 0.0;
};

class MalformedEventsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// FTL is the mean over images of (first byte - first request start); FPS is
/// images over the span from the earliest event to the latest.
EfficiencyReport measure_run(std::span<const TimingEvent> events);

class UnsupportedMetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Neural metrics (COMET, METEOR, ...) live behind this contract.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::string name() const = 0;
  virtual double score(std::span<const std::string> hyps, std::span<const std::string> refs,
                       std::span<const std::string> srcs) = 0;
};

/// POSTs {"src":[...],"hyp":[...],"ref":[...]} and reads {"score": x}.
class HttpScorer : public Scorer {
 public:
  HttpScorer(std::string metric, std::string url, double timeout_seconds = 60.0);
  std::string name() const override { return metric_ + "@" + url_; }
  double score(std::span<const std::string> hyps, std::span<const std::string> refs,
               std::span<const std::string> srcs) override;

 private:
  std::string metric_;
  std::string url_;
  double timeout_;
};

struct ScoreRecord {
  std::string scorer;
  double value = 0.0;
};

/// Delegates to `scorer`; any failure surfaces as UnsupportedMetricError.
ScoreRecord external_score(Scorer& scorer, std::span<const std::string> hyps,
                           std::span<const std::string> refs, std::span<const std::string> srcs);

}  // namespace glotran::metrics
