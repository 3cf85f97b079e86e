#include "glotran/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "glotran/http.hpp"
#include "glotran/imaging.hpp"
#include "json.hpp"

namespace glotran::metrics {

Tokenization tokenization_for(const std::string& lang) {
  if (lang == "zh" || lang == "ja" || lang == "jp" || lang == "ko") return Tokenization::kCharacter;
  return Tokenization::kWhitespace;
}

std::vector<std::string> tokenize(const std::string& text, Tokenization mode) {
  std::vector<std::string> out;
  if (mode == Tokenization::kWhitespace) {
    std::istringstream in(text);
    std::string t;
    while (in >> t) out.push_back(std::move(t));
    return out;
  }
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (c >= 0xf0) len = 4;
    else if (c >= 0xe0) len = 3;
    else if (c >= 0xc0) len = 2;
    len = std::min(len, text.size() - i);
    if (!(len == 1 && std::isspace(c))) out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, long long>;

NgramCounts ngrams(const std::vector<std::string>& toks, int n) {
  NgramCounts out;
  if (static_cast<int>(toks.size()) < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    ++out[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                   toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

}  // namespace

BleuStats bleu_stats(std::span<const std::string> hyps, std::span<const std::string> refs,
                     const BleuConfig& cfg) {
  if (hyps.size() != refs.size()) {
    throw std::invalid_argument("hypothesis/reference count mismatch: " +
                                std::to_string(hyps.size()) + " vs " + std::to_string(refs.size()));
  }
  if (hyps.empty()) throw std::invalid_argument("empty corpus");
  if (cfg.max_n < 1) throw std::invalid_argument("max_n must be >= 1");

  BleuStats s;
  s.matches.assign(static_cast<std::size_t>(cfg.max_n), 0);
  s.totals.assign(static_cast<std::size_t>(cfg.max_n), 0);
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    const auto h = tokenize(hyps[k], cfg.tokenization);
    const auto r = tokenize(refs[k], cfg.tokenization);
    s.hyp_length += static_cast<long long>(h.size());
    s.ref_length += static_cast<long long>(r.size());
    for (int n = 1; n <= cfg.max_n; ++n) {
      const auto hc = ngrams(h, n);
      const auto rc = ngrams(r, n);
      for (const auto& [g, c] : hc) {
        auto it = rc.find(g);
        s.matches[n - 1] += std::min(c, it == rc.end() ? 0LL : it->second);
        s.totals[n - 1] += c;
      }
    }
  }

  if (s.hyp_length == 0) {
    s.precisions.assign(static_cast<std::size_t>(cfg.max_n), 0.0);
    return s;  // score 0, brevity penalty 0
  }

  double log_sum = 0.0;
  bool zero = false;
  for (int n = 0; n < cfg.max_n; ++n) {
    double p = 0.0;
    if (s.matches[n] > 0) {
      p = static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]);
    } else if (cfg.smoothing == Smoothing::kAddOneOnZero) {
      p = 1.0 / static_cast<double>(s.totals[n] + 1);
    }
    s.precisions.push_back(p);
    if (p <= 0.0) {
      zero = true;
    } else {
      log_sum += std::log(p);
    }
  }
  s.brevity_penalty = s.hyp_length >= s.ref_length
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(s.ref_length) /
                                               static_cast<double>(s.hyp_length));
  s.score = zero ? 0.0 : 100.0 * s.brevity_penalty * std::exp(log_sum / cfg.max_n);
  return s;
}

double bleu(std::span<const std::string> hyps, std::span<const std::string> refs,
            const BleuConfig& cfg) {
  return bleu_stats(hyps, refs, cfg).score;
}

long long count_visual_tokens(int global_resolution, std::span<const regions::SliceGroup> groups,
                              int slice_cap, int patch_size) {
  long long total = imaging::patch_token_count(global_resolution, global_resolution, patch_size);
  for (const auto& g : groups) {
    const auto size = imaging::capped_size(g.union_box.width(), g.union_box.height(), slice_cap);
    total += imaging::patch_token_count(size.width, size.height, patch_size);
  }
  return total;
}

EfficiencyReport measure_run(std::span<const TimingEvent> events) {
  struct PerImage {
    double start = std::numeric_limits<double>::quiet_NaN();
    double first_byte = std::numeric_limits<double>::quiet_NaN();
    double last = -std::numeric_limits<double>::infinity();
  };
  std::map<std::string, PerImage> images;
  double t_min = std::numeric_limits<double>::infinity();
  double t_max = -std::numeric_limits<double>::infinity();
  for (const auto& e : events) {
    if (!std::isfinite(e.t)) throw MalformedEventsError("non-finite timestamp for " + e.image_id);
    auto& img = images[e.image_id];
    if (e.t < img.last) throw MalformedEventsError("events not monotone for " + e.image_id);
    img.last = e.t;
    t_min = std::min(t_min, e.t);
    t_max = std::max(t_max, e.t);
    if (e.kind == TimingKind::kRequestStart && std::isnan(img.start)) img.start = e.t;
    if (e.kind == TimingKind::kFirstByte && std::isnan(img.first_byte)) {
      if (std::isnan(img.start)) {
        throw MalformedEventsError("first byte before request start for " + e.image_id);
      }
      img.first_byte = e.t;
    }
  }
  EfficiencyReport r;
  r.images = static_cast<int>(images.size());
  if (images.empty()) return r;
  double ftl_sum = 0.0;
  int ftl_n = 0;
  for (const auto& [id, img] : images) {
    if (!std::isnan(img.start) && !std::isnan(img.first_byte)) {
      ftl_sum += img.first_byte - img.start;
      ++ftl_n;
    }
  }
  r.first_token_latency = ftl_n ? ftl_sum / ftl_n : 0.0;
  r.wall_seconds = t_max - t_min;
  r.fps = r.wall_seconds > 0 ? r.images / r.wall_seconds : 0.0;
  return r;
}

HttpScorer::HttpScorer(std::string metric, std::string url, double timeout_seconds)
    : metric_(std::move(metric)), url_(std::move(url)), timeout_(timeout_seconds) {}

double HttpScorer::score(std::span<const std::string> hyps, std::span<const std::string> refs,
                         std::span<const std::string> srcs) {
  nlohmann::json body;
  body["metric"] = metric_;
  body["src"] = std::vector<std::string>(srcs.begin(), srcs.end());
  body["hyp"] = std::vector<std::string>(hyps.begin(), hyps.end());
  body["ref"] = std::vector<std::string>(refs.begin(), refs.end());
  http::Headers headers;
  if (auto token = http::api_token_from_env(); !token.empty()) {
    headers.emplace_back("Authorization", "Bearer " + token);
  }
  const auto res = http::post(url_, body.dump(), "application/json", headers, timeout_);
  return nlohmann::json::parse(res.body).at("score").get<double>();
}

ScoreRecord external_score(Scorer& scorer, std::span<const std::string> hyps,
                           std::span<const std::string> refs, std::span<const std::string> srcs) {
  try {
    return {scorer.name(), scorer.score(hyps, refs, srcs)};
  } catch (const std::exception& e) {
    throw UnsupportedMetricError("scorer " + scorer.name() + " unavailable: " + e.what());
  }
}

}  // namespace glotran::metrics
