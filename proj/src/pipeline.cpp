#include "glotran/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "glotran/http.hpp"
#include "glotran/synth.hpp"

namespace glotran::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

nlohmann::ordered_json box_json(const BoundingBox& b) {
  return nlohmann::ordered_json::array({b.x_min, b.y_min, b.x_max, b.y_max});
}

bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

void RetryPolicy::validate() const {
  if (max_attempts < 1) throw std::invalid_argument("retry.max_attempts must be >= 1");
  if (base_backoff < 0 || multiplier < 0) {
    throw std::invalid_argument("retry backoff values must be non-negative");
  }
}

double RetryPolicy::delay_before(int attempt) const {
  if (attempt <= 1) return 0.0;
  return base_backoff * std::pow(multiplier, attempt - 2);
}

void PipelineConfig::validate() const {
  if (global_resolution < imaging::kMinGlobalResolution) {
    throw std::invalid_argument("global_resolution must be >= 16");
  }
  if (slice_cap < 1) throw std::invalid_argument("slice_cap must be >= 1");
  if (replay < 0 || replay > prompt::kMaxReplay) {
    throw std::invalid_argument("replay must be within 0..16");
  }
  if (patch_size < 1) throw std::invalid_argument("patch_size must be >= 1");
  grouping.validate();
  retry.validate();
  prompt::language_name(src_lang);
  prompt::language_name(tgt_lang);
}

int DocumentResult::failed_slices() const {
  return static_cast<int>(std::count_if(slices.begin(), slices.end(), [](const SliceResult& s) {
    return s.status == SliceStatus::kFailed;
  }));
}

LookupBackend::LookupBackend(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".json" && entry.path().stem() != "translator_script") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) add_sidecar(f);
}

void LookupBackend::add_sidecar(const std::filesystem::path& sidecar_path) {
  const auto truth = synth::read_sidecar(sidecar_path);
  std::vector<Entry> entries;
  for (const auto& r : truth.regions) entries.push_back({r.box, r.translation});
  std::lock_guard lock(mutex_);
  table_[truth.image_id] = std::move(entries);
}

BackendResponse LookupBackend::translate(const BackendRequest& request) {
  std::vector<Entry> hits;
  {
    std::lock_guard lock(mutex_);
    auto it = table_.find(request.context.image_id);
    if (it == table_.end()) throw BackendError("no lookup entries for " + request.context.image_id);
    const auto& box = request.context.source_box;
    for (const auto& e : it->second) {
      const double cx = e.box.center_x();
      const double cy = e.box.center_y();
      if (cx >= box.x_min && cx <= box.x_max && cy >= box.y_min && cy <= box.y_max) hits.push_back(e);
    }
  }
  if (hits.empty()) throw BackendError("no ground-truth region inside slice");
  regions::RegionSet rs;
  for (const auto& h : hits) rs.boxes.push_back(h.box);
  std::string text;
  for (const auto& line : regions::cluster_lines(rs)) {
    for (auto m : line.members) {
      if (!text.empty()) text += ' ';
      text += hits[m].translation;
    }
  }
  return {text, -1.0};
}

HttpChatBackend::HttpChatBackend(std::string base_url, double timeout_seconds)
    : base_url_(std::move(base_url)), timeout_(timeout_seconds) {
  while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
}

nlohmann::json HttpChatBackend::request_body(const BackendRequest& request) {
  nlohmann::json content = nlohmann::json::array();
  for (const auto& item : request.messages.items) {
    if (const auto* id = std::get_if<prompt::IdentifierToken>(&item)) {
      content.push_back({{"type", "text"}, {"text", id->token}});
    } else if (const auto* img = std::get_if<prompt::ImageRef>(&item)) {
      const auto png = imaging::encode_png(*img->image);
      content.push_back({{"type", "image_url"},
                         {"image_url", {{"url", "data:image/png;base64," + http::base64_encode(png)}}}});
    } else if (const auto* text = std::get_if<prompt::TextSegment>(&item)) {
      content.push_back({{"type", "text"}, {"text", text->text}});
    }
  }
  nlohmann::json body;
  body["model"] = request.params.model.empty() ? "default" : request.params.model;
  body["temperature"] = request.params.temperature;
  body["max_tokens"] = request.params.max_tokens;
  body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", content}}});
  return body;
}

BackendResponse HttpChatBackend::translate(const BackendRequest& request) {
  http::Headers headers;
  if (auto token = http::api_token_from_env(); !token.empty()) {
    headers.emplace_back("Authorization", "Bearer " + token);
  }
  http::Response res;
  try {
    res = http::post(base_url_ + "/chat/completions", request_body(request).dump(),
                     "application/json", headers, timeout_);
  } catch (const http::HttpError& e) {
    throw BackendError(e.what());
  }
  try {
    const auto body = nlohmann::json::parse(res.body);
    return {body.at("choices").at(0).at("message").at("content").get<std::string>(),
            res.first_byte_seconds};
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("malformed chat completion response: ") + e.what());
  }
}

std::string assemble_document(const std::vector<SliceResult>& slices,
                              const std::optional<std::string>& failed_placeholder) {
  std::vector<const SliceResult*> sorted;
  for (const auto& s : slices) sorted.push_back(&s);
  std::stable_sort(sorted.begin(), sorted.end(), [](const SliceResult* a, const SliceResult* b) {
    return a->order_index < b->order_index;
  });
  std::string out;
  bool first = true;
  for (const auto* s : sorted) {
    const std::string* piece = nullptr;
    if (s->status == SliceStatus::kOk) {
      piece = &s->translation;
    } else if (failed_placeholder) {
      piece = &*failed_placeholder;
    }
    if (!piece) continue;
    if (!first) out += '\n';
    out += *piece;
    first = false;
  }
  return out;
}

SliceResult translate_slice(int slice_number, std::shared_ptr<const imaging::Image> global_image,
                            const imaging::SliceCrop& slice, const prompt::ReplayWindow& window,
                            const PipelineConfig& cfg, Backend& backend,
                            const SliceContext& context, const GenerationParams& params) {
  SliceResult result;
  result.order_index = context.order_index;
  result.source_box = slice.source_box;

  const auto bundle =
      prompt::build_prompt(slice_number, window, {cfg.src_lang, cfg.tgt_lang}, cfg.templates);
  BackendRequest request{
      prompt::render_message_sequence(bundle, std::move(global_image),
                                      std::make_shared<const imaging::Image>(slice.image)),
      params, context};

  const auto t0 = Clock::now();
  for (int attempt = 1; attempt <= cfg.retry.max_attempts; ++attempt) {
    if (const double delay = cfg.retry.delay_before(attempt); delay > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    result.attempts = attempt;
    const auto attempt_start = Clock::now();
    try {
      auto response = backend.translate(request);
      if (response.text.empty()) throw BackendError("empty translation");
      const double call = seconds_since(attempt_start);
      const double first_byte = response.first_byte_seconds >= 0 ? response.first_byte_seconds : call;
      result.first_byte_latency =
          std::chrono::duration<double>(attempt_start - t0).count() + first_byte;
      result.translation = std::move(response.text);
      result.status = SliceStatus::kOk;
      result.error.clear();
      break;
    } catch (const std::exception& e) {
      result.error = e.what();
    }
  }
  result.latency = seconds_since(t0);
  return result;
}

DocumentResult translate_image(const ImageInput& input, const PipelineConfig& cfg,
                               regions::Detector& detector, Backend& backend,
                               const GenerationParams& params) {
  cfg.validate();
  const auto t0 = Clock::now();
  DocumentResult doc;
  doc.image_id = input.image_id;

  const regions::DetectionRequest request{input.image, input.image_id, input.source_path};
  const auto rs = regions::detect_regions(request, detector);
  const auto slices = regions::build_slices(input.image, rs, cfg.grouping, cfg.slice_cap);
  const auto global = std::make_shared<const imaging::Image>(
      imaging::downsample_global(input.image, cfg.global_resolution).image);

  std::vector<regions::SliceGroup> groups;
  for (const auto& s : slices) groups.push_back(s.group);
  doc.stats.n_boxes = static_cast<int>(rs.size());
  doc.stats.n_slices = static_cast<int>(slices.size());
  doc.stats.visual_tokens =
      metrics::count_visual_tokens(cfg.global_resolution, groups, cfg.slice_cap, cfg.patch_size);

  prompt::ReplayWindow window(cfg.replay);
  for (std::size_t k = 0; k < slices.size(); ++k) {
    const int slice_number = static_cast<int>(k) + 1;
    const SliceContext context{input.image_id, slices[k].group.order_index,
                               slices[k].group.union_box};
    const double start = seconds_since(t0);
    auto result =
        translate_slice(slice_number, global, slices[k].crop, window, cfg, backend, context, params);
    result.request_start = start;
    if (result.status == SliceStatus::kOk) window.push(slice_number, result.translation);
    doc.slices.push_back(std::move(result));
  }

  doc.document = assemble_document(doc.slices, cfg.failed_placeholder);
  doc.stats.total_latency = seconds_since(t0);
  for (const auto& s : doc.slices) {
    if (s.status == SliceStatus::kOk) {
      doc.stats.first_token_latency = s.request_start + s.first_byte_latency - doc.slices[0].request_start;
      break;
    }
  }
  return doc;
}

nlohmann::ordered_json to_json(const DocumentResult& result, bool with_timing) {
  nlohmann::ordered_json j;
  j["image_id"] = result.image_id;
  j["slices"] = nlohmann::ordered_json::array();
  for (const auto& s : result.slices) {
    nlohmann::ordered_json sj;
    sj["order_index"] = s.order_index;
    sj["box"] = box_json(s.source_box);
    sj["translation"] = s.translation;
    sj["status"] = s.status == SliceStatus::kOk ? "ok" : "failed";
    sj["attempts"] = s.attempts;
    if (with_timing) sj["latency"] = s.latency;
    if (!s.error.empty()) sj["error"] = s.error;
    j["slices"].push_back(std::move(sj));
  }
  j["document"] = result.document;
  nlohmann::ordered_json stats;
  stats["n_boxes"] = result.stats.n_boxes;
  stats["n_slices"] = result.stats.n_slices;
  stats["visual_tokens"] = result.stats.visual_tokens;
  stats["failed_slices"] = result.failed_slices();
  if (with_timing) {
    stats["total_latency"] = result.stats.total_latency;
    stats["first_token_latency"] = result.stats.first_token_latency;
  }
  j["stats"] = std::move(stats);
  return j;
}

nlohmann::ordered_json to_json(const BatchReport& report) {
  nlohmann::ordered_json j;
  j["records"] = report.records;
  j["skipped"] = nlohmann::ordered_json::array();
  for (const auto& s : report.skipped) j["skipped"].push_back({{"file", s.file}, {"reason", s.reason}});
  j["total_slices"] = report.total_slices;
  j["ok_slices"] = report.ok_slices;
  j["failed_slices"] = report.failed_slices;
  j["coverage"] = report.coverage;
  j["mean_visual_tokens"] = report.efficiency.mean_visual_tokens;
  j["first_token_latency"] = report.efficiency.first_token_latency;
  j["fps"] = report.efficiency.fps;
  j["wall_seconds"] = report.efficiency.wall_seconds;
  if (report.bleu) j["bleu"] = *report.bleu;
  return j;
}

BatchReport run_batch(const std::filesystem::path& input_dir, const PipelineConfig& cfg,
                      regions::Detector& detector, Backend& backend,
                      const std::filesystem::path& out_path, int workers,
                      const GenerationParams& params) {
  return run_files(list_images(input_dir), cfg, detector, backend, out_path, workers, params);
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

BatchReport run_files(const std::vector<std::filesystem::path>& files, const PipelineConfig& cfg,
                      regions::Detector& detector, Backend& backend,
                      const std::filesystem::path& out_path, int workers,
                      const GenerationParams& params) {
  cfg.validate();
  struct Outcome {
    std::optional<DocumentResult> result;
    std::string skip_reason;
    double start = 0.0;
    double end = 0.0;
  };
  std::vector<Outcome> outcomes(files.size());
  const auto batch_start = Clock::now();
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < files.size(); i = next++) {
      auto& out = outcomes[i];
      out.start = seconds_since(batch_start);
      try {
        ImageInput input{imaging::load_image(files[i]), files[i].stem().string(), files[i]};
        out.result = translate_image(input, cfg, detector, backend, params);
      } catch (const std::exception& e) {
        out.skip_reason = e.what();
      }
      out.end = seconds_since(batch_start);
    }
  };
  const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(files.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  BatchReport report;
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path.string());
  std::vector<metrics::TimingEvent> events;
  double token_sum = 0.0;
  std::vector<std::string> hyps;
  std::vector<std::string> refs;
  bool all_refs = true;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto& o = outcomes[i];
    if (!o.result) {
      std::clog << "[glotran] skipping " << files[i].filename().string() << ": " << o.skip_reason
                << '\n';
      report.skipped.push_back({files[i].filename().string(), o.skip_reason});
      continue;
    }
    const auto& doc = *o.result;
    out << to_json(doc).dump() << '\n';
    ++report.records;
    report.total_slices += doc.stats.n_slices;
    report.failed_slices += doc.failed_slices();
    report.ok_slices += doc.stats.n_slices - doc.failed_slices();
    token_sum += static_cast<double>(doc.stats.visual_tokens);

    events.push_back({doc.image_id, metrics::TimingKind::kImageStart, o.start});
    if (!doc.slices.empty()) {
      const double req = o.start + doc.slices.front().request_start;
      events.push_back({doc.image_id, metrics::TimingKind::kRequestStart, req});
      if (doc.failed_slices() < doc.stats.n_slices) {
        events.push_back({doc.image_id, metrics::TimingKind::kFirstByte,
                          std::min(o.end, req + doc.stats.first_token_latency)});
      }
    }
    events.push_back({doc.image_id, metrics::TimingKind::kImageEnd, o.end});

    const auto sidecar = synth::sidecar_path_for(files[i]);
    if (all_refs && std::filesystem::exists(sidecar)) {
      hyps.push_back(doc.document);
      refs.push_back(synth::read_sidecar(sidecar).reference);
    } else {
      all_refs = false;
    }
  }
  report.coverage = report.total_slices
                        ? static_cast<double>(report.ok_slices) / static_cast<double>(report.total_slices)
                        : 1.0;
  report.efficiency = metrics::measure_run(events);
  report.efficiency.mean_visual_tokens = report.records ? token_sum / report.records : 0.0;
  if (all_refs && !hyps.empty()) {
    metrics::BleuConfig bc;
    bc.tokenization = metrics::tokenization_for(cfg.tgt_lang);
    report.bleu = metrics::bleu(hyps, refs, bc);
  }
  return report;
}

SweepResult run_sweep(const std::vector<std::filesystem::path>& files, const PipelineConfig& base,
                      const std::vector<int>& replays, const std::vector<int>& resolutions,
                      regions::Detector& detector, Backend& backend,
                      const std::filesystem::path& work_dir, int workers) {
  std::filesystem::create_directories(work_dir);
  SweepResult result;
  for (int eta : replays) {
    double previous = -1.0;
    for (int r : resolutions) {
      PipelineConfig cfg = base;
      cfg.replay = eta;
      cfg.global_resolution = r;
      const auto out = work_dir / ("eta" + std::to_string(eta) + "_R" + std::to_string(r) + ".jsonl");
      const auto report = run_files(files, cfg, detector, backend, out, workers);
      SweepCell cell{eta, r, report.bleu, report.efficiency.mean_visual_tokens, report.coverage};
      if (cell.mean_visual_tokens <= previous) result.visual_tokens_monotone = false;
      previous = cell.mean_visual_tokens;
      result.cells.push_back(cell);
    }
  }
  return result;
}

void write_sweep_csv(const SweepResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "replay,resolution,bleu,mean_visual_tokens,coverage\n";
  for (const auto& c : result.cells) {
    out << c.replay << ',' << c.resolution << ',';
    if (c.bleu) out << *c.bleu;
    out << ',' << c.mean_visual_tokens << ',' << c.coverage << '\n';
  }
}

std::string sweep_table(const SweepResult& result) {
  std::vector<int> resolutions;
  std::vector<int> replays;
  for (const auto& c : result.cells) {
    if (std::find(resolutions.begin(), resolutions.end(), c.resolution) == resolutions.end()) {
      resolutions.push_back(c.resolution);
    }
    if (std::find(replays.begin(), replays.end(), c.replay) == replays.end()) replays.push_back(c.replay);
  }
  std::ostringstream out;
  out << "replay";
  for (int r : resolutions) out << "\ttokens_R" << r;
  for (int r : resolutions) out << "\tbleu_R" << r;
  out << '\n';
  out.setf(std::ios::fixed);
  for (int eta : replays) {
    std::vector<const SweepCell*> row;
    for (const auto& c : result.cells) {
      if (c.replay == eta) row.push_back(&c);
    }
    out << eta;
    out.precision(1);
    for (const auto* c : row) out << '\t' << c->mean_visual_tokens;
    out.precision(2);
    for (const auto* c : row) {
      out << '\t';
      if (c->bleu) {
        out << *c->bleu;
      } else {
        out << "nan";
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string sweep_reference_note() {
  return "reference_optimum: replay=4 bleu=43.54\n"
         "note: reached by a fine-tuned multimodal backbone at full scale; the mock lookup backend "
         "ignores replay context, so its BLEU is flat across replay sizes and cannot reproduce this "
         "optimum.\n";
}

}  // namespace glotran::pipeline
