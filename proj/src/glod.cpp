#include "glotran/glod.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "glotran/http.hpp"
#include "glotran/synth.hpp"

namespace glotran::glod {

namespace {

std::vector<std::string> split_ws(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string t;
  while (in >> t) out.push_back(std::move(t));
  return out;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

std::vector<std::string> code_points(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = c >= 0xf0 ? 4 : c >= 0xe0 ? 3 : c >= 0xc0 ? 2 : 1;
    len = std::min(len, text.size() - i);
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("embedding size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), 0.0, 1.0);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void QcThresholds::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(ocr_confidence) || !unit(embed) || !unit(roundtrip) || !unit(iou_min)) {
    throw std::invalid_argument("confidence, IoU and similarity thresholds must lie in [0, 1]");
  }
  if (min_regions < 0 || min_side < 0 || blur_floor < 0) {
    throw std::invalid_argument("count and size thresholds must be non-negative");
  }
  if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
}

std::string to_string(RejectReason reason) {
  switch (reason) {
    case RejectReason::kLowResolution: return "low_resolution";
    case RejectReason::kBlur: return "blur";
    case RejectReason::kLowOcrConfidence: return "low_ocr_confidence";
    case RejectReason::kLowTextRichness: return "low_text_richness";
    case RejectReason::kLicense: return "license";
  }
  return "unknown";
}

FilterVerdict prefilter(const RawSample& sample, const imaging::Image& img,
                        const regions::RegionSet& detections, const QcThresholds& t) {
  FilterVerdict v;
  if (std::min(img.width(), img.height()) < t.min_side) v.reasons.push_back(RejectReason::kLowResolution);
  if (imaging::laplacian_variance(img) < t.blur_floor) v.reasons.push_back(RejectReason::kBlur);
  double mean_conf = 0.0;
  for (const auto& b : detections.boxes) mean_conf += b.confidence;
  if (!detections.empty()) mean_conf /= static_cast<double>(detections.size());
  if (mean_conf < t.ocr_confidence) v.reasons.push_back(RejectReason::kLowOcrConfidence);
  if (static_cast<int>(detections.size()) < t.min_regions) v.reasons.push_back(RejectReason::kLowTextRichness);
  if (!sample.license_permissive) v.reasons.push_back(RejectReason::kLicense);
  v.accepted = v.reasons.empty();
  return v;
}

regions::RegionSet fuse_detections(const regions::RegionSet& a, const regions::RegionSet& b,
                                   double iou_min, double ocr_floor) {
  if (a.source_width != b.source_width || a.source_height != b.source_height) {
    throw std::invalid_argument("fuse_detections: region sets from different images");
  }
  struct Pair {
    double iou;
    std::size_t i;
    std::size_t j;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double v = iou(a.boxes[i], b.boxes[j]);
      if (v > 0.0 && v >= iou_min) pairs.push_back({v, i, j});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.iou > y.iou; });
  std::vector<int> match_a(a.size(), -1);
  std::vector<bool> used_b(b.size(), false);
  for (const auto& p : pairs) {
    if (match_a[p.i] >= 0 || used_b[p.j]) continue;
    match_a[p.i] = static_cast<int>(p.j);
    used_b[p.j] = true;
  }
  regions::RegionSet out{{}, a.source_width, a.source_height};
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (match_a[i] >= 0) {
      out.boxes.push_back(box_union(a.boxes[i], b.boxes[static_cast<std::size_t>(match_a[i])]));
    } else if (a.boxes[i].confidence >= ocr_floor) {
      out.boxes.push_back(a.boxes[i]);
    }
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    if (!used_b[j] && b.boxes[j].confidence >= ocr_floor) out.boxes.push_back(b.boxes[j]);
  }
  return out;
}

std::string fuse_recognition(const std::string& local_text, const std::string& context_text) {
  const auto lt = split_ws(local_text);
  if (std::find(lt.begin(), lt.end(), kGapToken) == lt.end()) return local_text;
  const auto ct = split_ws(context_text);
  const std::size_t n = lt.size();
  const std::size_t m = ct.size();
  // Lexicographic score: exact matches first (weight n + 1), then gap tokens
  // paired with any context token (weight 1). The anchors are therefore an
  // LCS, chosen to leave the gaps facing context tokens.
  const long exact = static_cast<long>(n) + 1;
  std::vector<std::vector<long>> dp(n + 1, std::vector<long>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      long best = std::max(dp[i + 1][j], dp[i][j + 1]);
      if (lt[i] == kGapToken) {
        best = std::max(best, dp[i + 1][j + 1] + 1);
      } else if (lt[i] == ct[j]) {
        best = std::max(best, dp[i + 1][j + 1] + exact);
      }
      dp[i][j] = best;
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> anchors;
  for (std::size_t i = 0, j = 0; i < n && j < m;) {
    if (lt[i] != kGapToken && lt[i] == ct[j] && dp[i][j] == dp[i + 1][j + 1] + exact) {
      anchors.emplace_back(i++, j++);
    } else if (lt[i] == kGapToken && dp[i][j] == dp[i + 1][j + 1] + 1) {
      ++i;
      ++j;
    } else if (dp[i + 1][j] >= dp[i][j + 1]) {
      ++i;
    } else {
      ++j;
    }
  }
  anchors.emplace_back(n, m);

  std::vector<std::string> out;
  std::size_t li = 0;
  std::size_t cj = 0;
  for (const auto& [ai, aj] : anchors) {
    const std::vector<std::string> ls(lt.begin() + static_cast<std::ptrdiff_t>(li),
                                      lt.begin() + static_cast<std::ptrdiff_t>(ai));
    const std::vector<std::string> cs(ct.begin() + static_cast<std::ptrdiff_t>(cj),
                                      ct.begin() + static_cast<std::ptrdiff_t>(aj));
    const bool all_gaps = !ls.empty() && std::all_of(ls.begin(), ls.end(),
                                                     [](const std::string& t) { return t == kGapToken; });
    if (all_gaps && !cs.empty()) {
      out.insert(out.end(), cs.begin(), cs.end());
    } else if (ls.size() == cs.size()) {
      for (std::size_t k = 0; k < ls.size(); ++k) out.push_back(ls[k] == kGapToken ? cs[k] : ls[k]);
    } else {
      out.insert(out.end(), ls.begin(), ls.end());
    }
    if (ai < n) out.push_back(lt[ai]);
    li = ai + 1;
    cj = aj + 1;
  }
  return join(out, " ");
}

std::map<std::string, double> ngram_counts(const std::string& text) {
  std::map<std::string, double> counts;
  const auto cps = code_points(text);
  if (cps.empty()) return counts;
  if (cps.size() < 3) {
    counts[text] += 1.0;
    return counts;
  }
  for (std::size_t i = 0; i + 3 <= cps.size(); ++i) counts[cps[i] + cps[i + 1] + cps[i + 2]] += 1.0;
  return counts;
}

double ngram_cosine(const std::string& a, const std::string& b) {
  const auto ca = ngram_counts(a);
  const auto cb = ngram_counts(b);
  if (ca.empty() || cb.empty()) return 0.0;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [g, c] : ca) {
    na += c * c;
    if (auto it = cb.find(g); it != cb.end()) dot += c * it->second;
  }
  for (const auto& [g, c] : cb) nb += c * c;
  return std::clamp(dot / std::sqrt(na * nb), 0.0, 1.0);
}

std::string LexiconTranslator::translate(const std::string& text, const std::string& src_lang,
                                         const std::string& tgt_lang) {
  return synth::lexicon_translate(text, src_lang, tgt_lang);
}

ScriptedTranslator::ScriptedTranslator(std::string name, std::map<std::string, std::string> overrides,
                                       std::string src_lang, std::string tgt_lang)
    : name_(std::move(name)),
      overrides_(std::move(overrides)),
      src_lang_(std::move(src_lang)),
      tgt_lang_(std::move(tgt_lang)) {}

ScriptedTranslator ScriptedTranslator::from_file(std::string name, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read translator script " + path.string());
  const auto j = nlohmann::json::parse(in);
  return ScriptedTranslator(std::move(name), j.at("overrides").get<std::map<std::string, std::string>>());
}

std::string ScriptedTranslator::translate(const std::string& text, const std::string& src_lang,
                                          const std::string& tgt_lang) {
  if (src_lang == src_lang_ && tgt_lang == tgt_lang_) {
    if (auto it = overrides_.find(text); it != overrides_.end()) return it->second;
  }
  return synth::lexicon_translate(text, src_lang, tgt_lang);
}

HttpTranslator::HttpTranslator(std::string url, double timeout_seconds)
    : url_(std::move(url)), timeout_(timeout_seconds) {}

std::string HttpTranslator::translate(const std::string& text, const std::string& src_lang,
                                      const std::string& tgt_lang) {
  nlohmann::json body{{"text", text}, {"src_lang", src_lang}, {"tgt_lang", tgt_lang}};
  try {
    const auto res = http::post(url_, body.dump(), "application/json", {}, timeout_);
    return nlohmann::json::parse(res.body).at("text").get<std::string>();
  } catch (const std::exception& e) {
    throw TranslationError(name() + ": " + e.what());
  }
}

double Embedder::similarity(const std::string& a, const std::string& b) {
  return cosine(embed(a), embed(b));
}

std::vector<double> NgramEmbedder::embed(const std::string& text) {
  std::vector<double> v(1024, 0.0);
  for (const auto& [g, c] : ngram_counts(text)) v[fnv1a(g) % v.size()] += c;
  return v;
}

double NgramEmbedder::similarity(const std::string& a, const std::string& b) { return ngram_cosine(a, b); }

LexiconEmbedder::LexiconEmbedder(std::string pivot_lang, std::string other_lang)
    : pivot_lang_(std::move(pivot_lang)), other_lang_(std::move(other_lang)) {}

std::string LexiconEmbedder::pivot(const std::string& text) const {
  return synth::lexicon_translate(text, other_lang_, pivot_lang_);
}

std::vector<double> LexiconEmbedder::embed(const std::string& text) {
  return NgramEmbedder().embed(pivot(text));
}

double LexiconEmbedder::similarity(const std::string& a, const std::string& b) {
  return ngram_cosine(pivot(a), pivot(b));
}

HttpEmbedder::HttpEmbedder(std::string url, double timeout_seconds)
    : url_(std::move(url)), timeout_(timeout_seconds) {}

std::vector<double> HttpEmbedder::embed(const std::string& text) {
  const nlohmann::json body{{"text", text}};
  const auto res = http::post(url_, body.dump(), "application/json", {}, timeout_);
  return nlohmann::json::parse(res.body).at("embedding").get<std::vector<double>>();
}

FusionResult fuse_translation(const std::string& src, const std::vector<Translator*>& translators,
                              const std::string& src_lang, const std::string& tgt_lang, int rounds) {
  if (translators.empty()) throw std::invalid_argument("fuse_translation needs at least one translator");
  if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");

  auto score = [&](TranslationCandidate& c, std::size_t producer) {
    c.similarity = -1.0;
    for (std::size_t j = 0; j < translators.size(); ++j) {
      if (j == producer && translators.size() > 1) continue;
      try {
        auto back = translators[j]->translate(c.text, tgt_lang, src_lang);
        const double s = ngram_cosine(src, back);
        if (s > c.similarity) {
          c.similarity = s;
          c.best_back = std::move(back);
          c.back_by = translators[j]->name();
        }
      } catch (const std::exception&) {
        // a failing back-translator simply contributes nothing
      }
    }
    c.similarity = std::max(c.similarity, 0.0);
  };

  FusionResult result;
  std::optional<TranslationCandidate> winner;
  std::string seed_text = src;
  for (int round = 1; round <= rounds; ++round) {
    std::vector<TranslationCandidate> pool;
    if (winner) pool.push_back(*winner);
    if (round > 1 && winner->best_back.empty()) break;
    for (std::size_t i = 0; i < translators.size(); ++i) {
      TranslationCandidate c;
      c.round = round;
      c.translator = translators[i]->name();
      try {
        c.text = translators[i]->translate(seed_text, src_lang, tgt_lang);
      } catch (const std::exception&) {
        continue;
      }
      score(c, i);
      result.candidates.push_back(c);
      pool.push_back(std::move(c));
    }
    if (pool.empty()) throw TranslationError("every translator failed on: " + src);
    std::size_t best = 0;
    for (std::size_t k = 1; k < pool.size(); ++k) {
      if (pool[k].similarity > pool[best].similarity) best = k;
    }
    winner = pool[best];
    seed_text = winner->best_back;
  }
  result.fused = winner->text;
  result.similarity = winner->similarity;
  return result;
}

QcVerdict quality_control(CurationRecord& record, Embedder& embedder,
                          const std::vector<Translator*>& translators, const QcThresholds& t,
                          const std::string& src_lang, const std::string& tgt_lang) {
  if (record.fused_translation.empty()) throw std::invalid_argument("quality_control: no fused translation");
  QcVerdict v;
  NgramEmbedder fallback;
  Embedder* active = &embedder;
  auto sim = [&](const std::string& a, const std::string& b) {
    try {
      return active->similarity(a, b);
    } catch (const std::exception& e) {
      if (active == &fallback) throw;
      v.note = "embedder " + embedder.name() + " unavailable (" + e.what() + "); used " + fallback.name();
      active = &fallback;
      return active->similarity(a, b);
    }
  };

  v.scores.embed_sim = sim(record.fused_source, record.fused_translation);
  double best_rt = 0.0;
  for (auto* tr : translators) {
    try {
      best_rt = std::max(best_rt, ngram_cosine(record.fused_source,
                                               tr->translate(record.fused_translation, tgt_lang, src_lang)));
    } catch (const std::exception&) {
    }
  }
  v.scores.roundtrip_sim = best_rt;

  const auto lines = split_lines(record.fused_translation);
  std::size_t surviving = 0;
  for (std::size_t k = 0; k < record.slices.size(); ++k) {
    auto& s = record.slices[k];
    s.dropped = false;
    if (k < lines.size()) {
      s.region_sim = sim(s.translation, lines[k]);
      if (*s.region_sim < t.embed) {
        s.dropped = true;
        v.dropped_slices.push_back(k);
      }
    }
    if (!s.dropped) ++surviving;
  }
  v.keep = v.scores.embed_sim >= t.embed && v.scores.roundtrip_sim >= t.roundtrip && surviving > 0;
  record.qc = v.scores;
  record.qc_note = v.note;
  return v;
}

DatasetRecord to_dataset_record(const CurationRecord& record, const std::filesystem::path& out_dir) {
  DatasetRecord d;
  d.image_id = record.image_id;
  d.scene = record.scene;
  d.global_image = std::filesystem::relative(std::filesystem::absolute(record.image_path),
                                             std::filesystem::absolute(out_dir))
                       .generic_string();
  for (const auto& s : record.slices) {
    if (!s.dropped) d.slices.push_back({s.box, s.src_text, s.translation});
  }
  d.fused_source = record.fused_source;
  d.fused_translation = record.fused_translation;
  if (record.qc) {
    d.embed_sim = record.qc->embed_sim;
    d.roundtrip_sim = record.qc->roundtrip_sim;
  }
  return d;
}

nlohmann::ordered_json to_json(const DatasetRecord& r) {
  nlohmann::ordered_json j;
  j["image_id"] = r.image_id;
  j["scene"] = r.scene;
  j["global_image"] = r.global_image;
  j["slices"] = nlohmann::ordered_json::array();
  for (const auto& s : r.slices) {
    j["slices"].push_back({{"box", {s.box.x_min, s.box.y_min, s.box.x_max, s.box.y_max}},
                           {"src_text", s.src_text},
                           {"translation", s.translation}});
  }
  j["fused_source"] = r.fused_source;
  j["fused_translation"] = r.fused_translation;
  j["qc"] = {{"embed_sim", r.embed_sim}, {"roundtrip_sim", r.roundtrip_sim}};
  return j;
}

DatasetRecord dataset_record_from_json(const nlohmann::json& j) {
  DatasetRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.scene = j.at("scene").get<std::string>();
  r.global_image = j.at("global_image").get<std::string>();
  for (const auto& s : j.at("slices")) {
    const auto& b = s.at("box");
    r.slices.push_back({{b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()},
                        s.at("src_text").get<std::string>(),
                        s.at("translation").get<std::string>()});
  }
  r.fused_source = j.at("fused_source").get<std::string>();
  r.fused_translation = j.at("fused_translation").get<std::string>();
  r.embed_sim = j.at("qc").at("embed_sim").get<double>();
  r.roundtrip_sim = j.at("qc").at("roundtrip_sim").get<double>();
  return r;
}

namespace {

void write_manifest(const std::filesystem::path& out_dir, const nlohmann::ordered_json& manifest) {
  std::ofstream out(out_dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + out_dir.string());
  out << manifest.dump(2) << '\n';
}

nlohmann::ordered_json base_manifest(const std::vector<DatasetRecord>& records) {
  std::map<std::string, int> per_scene;
  for (const auto& r : records) ++per_scene[r.scene];
  nlohmann::ordered_json m;
  m["records"] = records.size();
  m["per_scene"] = nlohmann::ordered_json::object();
  for (const auto& [scene, n] : per_scene) m["per_scene"][scene] = n;
  return m;
}

}  // namespace

std::size_t emit_dataset(std::vector<DatasetRecord> records, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::sort(records.begin(), records.end(),
            [](const DatasetRecord& a, const DatasetRecord& b) { return a.image_id < b.image_id; });
  std::ofstream out(out_dir / "dataset.jsonl");
  if (!out) throw std::runtime_error("cannot write dataset in " + out_dir.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  out.close();
  if (!out) throw std::runtime_error("write failed for " + (out_dir / "dataset.jsonl").string());
  write_manifest(out_dir, base_manifest(records));
  return records.size();
}

std::vector<DatasetRecord> read_dataset(const std::filesystem::path& jsonl_path) {
  std::ifstream in(jsonl_path);
  if (!in) throw std::runtime_error("cannot read " + jsonl_path.string());
  std::vector<DatasetRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(dataset_record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

Recognition SidecarRecognizer::recognize(const RawSample& sample, const imaging::Image&,
                                         const BoundingBox& box) {
  const auto truth = synth::read_sidecar(synth::sidecar_path_for(sample.image_path));
  regions::RegionSet inside{{}, truth.width, truth.height};
  std::vector<std::string> texts;
  for (const auto& r : truth.regions) {
    const double cx = r.box.center_x();
    const double cy = r.box.center_y();
    if (cx >= box.x_min && cx <= box.x_max && cy >= box.y_min && cy <= box.y_max) {
      inside.boxes.push_back(r.box);
      texts.push_back(r.src_text);
    }
  }
  std::vector<std::string> ordered;
  for (const auto& line : regions::cluster_lines(inside)) {
    for (auto m : line.members) ordered.push_back(texts[m]);
  }
  Recognition rec;
  rec.context = join(ordered, " ");
  auto tokens = split_ws(rec.context);
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const auto h = fnv1a(sample.image_id + "#" + std::to_string(box.x_min) + "," +
                         std::to_string(box.y_min) + "#" + std::to_string(k));
    if (static_cast<double>(h % 10000) < gap_rate_ * 10000.0) tokens[k] = kGapToken;
  }
  rec.local = join(tokens, " ");
  return rec;
}

namespace {

struct SampleOutcome {
  AuditRow audit;
  std::optional<CurationRecord> record;
};

SampleOutcome curate_one(const std::filesystem::path& path, const CurateContracts& c,
                         const CurateOptions& opt) {
  SampleOutcome out;
  RawSample sample;
  sample.image_path = path;
  sample.image_id = path.stem().string();
  sample.scene = "unknown";
  const auto sidecar = synth::sidecar_path_for(path);
  if (std::filesystem::exists(sidecar)) {
    const auto truth = synth::read_sidecar(sidecar);
    sample.image_id = truth.image_id;
    sample.scene = truth.scene;
    sample.license_permissive = truth.license_permissive;
  }
  out.audit.image_id = sample.image_id;
  out.audit.scene = sample.scene;
  try {
    const auto img = imaging::load_image(path);
    const regions::DetectionRequest req{img, sample.image_id, path};
    const auto a = regions::detect_regions(req, *c.detector_a);
    const auto b = regions::detect_regions(req, *c.detector_b);
    const auto fused = fuse_detections(a, b, opt.thresholds.iou_min, opt.thresholds.ocr_confidence);
    const auto verdict = prefilter(sample, img, fused, opt.thresholds);
    if (!verdict.accepted) {
      out.audit.outcome = CurateOutcome::kRejected;
      for (auto r : verdict.reasons) out.audit.reasons.push_back(to_string(r));
      return out;
    }
    const auto groups = regions::merge_regions(regions::order_regions(fused), opt.grouping);
    CurationRecord rec;
    rec.image_id = sample.image_id;
    rec.scene = sample.scene;
    rec.image_path = path;
    std::vector<std::string> sources;
    for (const auto& g : groups) {
      CurationSlice s;
      s.box = g.union_box;
      const auto reading = c.recognizer->recognize(sample, img, g.union_box);
      s.text_a = reading.local;
      s.text_b = reading.context;
      s.src_text = fuse_recognition(reading.local, reading.context);
      auto fusion = fuse_translation(s.src_text, c.translators, opt.src_lang, opt.tgt_lang,
                                     opt.thresholds.rounds);
      s.translation = std::move(fusion.fused);
      s.candidates = std::move(fusion.candidates);
      sources.push_back(s.src_text);
      rec.slices.push_back(std::move(s));
    }
    rec.fused_source = join(sources, "\n");
    auto fusion = fuse_translation(rec.fused_source, c.translators, opt.src_lang, opt.tgt_lang,
                                   opt.thresholds.rounds);
    rec.fused_translation = std::move(fusion.fused);
    rec.candidates = std::move(fusion.candidates);
    const auto qc = quality_control(rec, *c.embedder, c.translators, opt.thresholds, opt.src_lang,
                                    opt.tgt_lang);
    out.audit.qc = qc.scores;
    out.audit.slices = static_cast<int>(rec.slices.size());
    out.audit.dropped_regions = static_cast<int>(qc.dropped_slices.size());
    out.audit.note = qc.note;
    if (qc.keep) {
      out.audit.outcome = CurateOutcome::kKept;
      out.record = std::move(rec);
    } else {
      out.audit.outcome = CurateOutcome::kDroppedQc;
      if (qc.scores.embed_sim < opt.thresholds.embed) out.audit.reasons.push_back("embed_sim");
      if (qc.scores.roundtrip_sim < opt.thresholds.roundtrip) out.audit.reasons.push_back("roundtrip_sim");
      if (out.audit.reasons.empty()) out.audit.reasons.push_back("no_surviving_slices");
    }
  } catch (const std::exception& e) {
    out.audit.outcome = CurateOutcome::kError;
    out.audit.reasons.push_back("error");
    out.audit.note = e.what();
  }
  return out;
}

const char* outcome_name(CurateOutcome o) {
  switch (o) {
    case CurateOutcome::kKept: return "kept";
    case CurateOutcome::kRejected: return "rejected";
    case CurateOutcome::kDroppedQc: return "dropped_qc";
    case CurateOutcome::kError: return "error";
  }
  return "error";
}

}  // namespace

CurateReport curate(const std::filesystem::path& input_dir, const std::filesystem::path& out_dir,
                    const CurateContracts& contracts, const CurateOptions& options) {
  options.thresholds.validate();
  options.grouping.validate();
  if (!contracts.detector_a || !contracts.detector_b || !contracts.recognizer || !contracts.embedder ||
      contracts.translators.empty()) {
    throw std::invalid_argument("curate: missing contract implementation");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(input_dir)) {
    auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<SampleOutcome> outcomes(files.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < files.size(); i = next++) {
      outcomes[i] = curate_one(files[i], contracts, options);
    }
  };
  const int n_workers = std::max(1, std::min<int>(options.workers, static_cast<int>(files.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  CurateReport report;
  std::vector<DatasetRecord> kept;
  for (auto& o : outcomes) {
    ++report.total;
    switch (o.audit.outcome) {
      case CurateOutcome::kKept:
        ++report.kept;
        ++report.kept_per_scene[o.audit.scene];
        report.dropped_regions += o.audit.dropped_regions;
        kept.push_back(to_dataset_record(*o.record, out_dir));
        break;
      case CurateOutcome::kRejected: ++report.rejected; break;
      case CurateOutcome::kDroppedQc: ++report.dropped_qc; break;
      case CurateOutcome::kError: ++report.errors; break;
    }
    for (const auto& r : o.audit.reasons) ++report.reason_counts[r];
    report.audit.push_back(std::move(o.audit));
  }
  std::sort(report.audit.begin(), report.audit.end(),
            [](const AuditRow& a, const AuditRow& b) { return a.image_id < b.image_id; });

  emit_dataset(kept, out_dir);
  auto manifest = base_manifest(kept);
  manifest["total"] = report.total;
  manifest["kept"] = report.kept;
  manifest["rejected"] = report.rejected;
  manifest["dropped_qc"] = report.dropped_qc;
  manifest["errors"] = report.errors;
  manifest["dropped_regions"] = report.dropped_regions;
  manifest["reasons"] = nlohmann::ordered_json::object();
  for (const auto& [r, n] : report.reason_counts) manifest["reasons"][r] = n;
  write_manifest(out_dir, manifest);
  write_audit_csv(report, out_dir / "audit.csv");
  return report;
}

void write_audit_csv(const CurateReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "image_id,scene,outcome,reasons,embed_sim,roundtrip_sim,slices,dropped_regions,note\n";
  for (const auto& r : report.audit) {
    out << csv_field(r.image_id) << ',' << csv_field(r.scene) << ',' << outcome_name(r.outcome) << ','
        << csv_field(join(r.reasons, ";")) << ',';
    if (r.qc) {
      out << r.qc->embed_sim << ',' << r.qc->roundtrip_sim;
    } else {
      out << ',';
    }
    out << ',' << r.slices << ',' << r.dropped_regions << ',' << csv_field(r.note) << '\n';
  }
}

}  // namespace glotran::glod
