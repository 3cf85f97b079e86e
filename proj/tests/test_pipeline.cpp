#include <gtest/gtest.h>

#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "glotran/pipeline.hpp"
#include "glotran/synth.hpp"
#include "support/temp_dir.hpp"

using namespace glotran;
using namespace glotran::pipeline;

namespace {

/// Answers "T<order_index>" and logs every call with the replay it was sent.
class RecordingBackend : public Backend {
 public:
  struct Call {
    int order_index;
    std::vector<std::string> replay;
    std::chrono::steady_clock::time_point begin;
    std::chrono::steady_clock::time_point end;
  };
  std::set<int> always_fail;
  std::map<int, int> fail_first;  // order index -> failures before success

  std::string name() const override { return "recording"; }
  BackendResponse translate(const BackendRequest& request) override {
    Call c{request.context.order_index, prompt::parse_prompt_text(request.messages.text()).replay_block,
           std::chrono::steady_clock::now(), {}};
    EXPECT_TRUE(prompt::has_valid_layout(request.messages));
    std::this_thread::sleep_for(std::chrono::microseconds(200));
    c.end = std::chrono::steady_clock::now();
    {
      std::lock_guard<std::mutex> lock(mu);
      calls.push_back(c);
    }
    if (always_fail.count(c.order_index)) throw BackendError("permanent failure");
    if (auto it = fail_first.find(c.order_index); it != fail_first.end() && it->second > 0) {
      --it->second;
      throw BackendError("transient failure");
    }
    return {"T" + std::to_string(c.order_index), -1.0};
  }

  std::mutex mu;
  std::vector<Call> calls;
};

/// Five singleton slices spread over a blank canvas.
ImageInput five_region_input() { return {imaging::Image(1000, 1000), "five", {}}; }
regions::StaticDetector five_regions() {
  std::vector<BoundingBox> boxes;
  for (int k = 0; k < 5; ++k) boxes.push_back({100, 50 + 180 * k, 300, 80 + 180 * k, 0.9});
  return regions::StaticDetector(boxes);
}

PipelineConfig fast_config() {
  PipelineConfig cfg;
  cfg.retry.base_backoff = 0.001;
  return cfg;
}

}  // namespace

TEST(AssembleDocument, JoinsOkSlicesInOrder) {
  SliceResult a{0, {}, "A", SliceStatus::kOk};
  SliceResult b{1, {}, "", SliceStatus::kFailed};
  SliceResult c{2, {}, "C", SliceStatus::kOk};
  EXPECT_EQ(assemble_document({c, a}), "A\nC");
  EXPECT_EQ(assemble_document({a, b, c}), "A\nC");
  EXPECT_EQ(assemble_document({a, b, c}, std::string("[?]")), "A\n[?]\nC");
  EXPECT_EQ(assemble_document({}), "");
}

TEST(RetryPolicy, DelaysAndValidation) {
  RetryPolicy p;
  EXPECT_DOUBLE_EQ(p.delay_before(1), 0.0);
  EXPECT_DOUBLE_EQ(p.delay_before(2), 0.5);
  EXPECT_DOUBLE_EQ(p.delay_before(3), 1.0);
  p.max_attempts = 0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(PipelineConfig, Validation) {
  PipelineConfig cfg;
  cfg.global_resolution = 8;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = PipelineConfig{};
  cfg.replay = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(TranslateSlice, RetriesThenSucceeds) {
  RecordingBackend backend;
  backend.fail_first[0] = 2;
  const auto global = std::make_shared<const imaging::Image>(16, 16);
  const auto crop = imaging::crop_region(imaging::Image(20, 20), {0, 0, 10, 10});
  const auto r = translate_slice(1, global, crop, prompt::ReplayWindow(4), fast_config(), backend, {"x", 0, {}});
  EXPECT_EQ(r.status, SliceStatus::kOk);
  EXPECT_EQ(r.attempts, 3);
  EXPECT_EQ(r.translation, "T0");
  EXPECT_GE(r.latency, 0.0);
}

TEST(TranslateSlice, ExhaustedRetriesFail) {
  RecordingBackend backend;
  backend.always_fail.insert(0);
  const auto global = std::make_shared<const imaging::Image>(16, 16);
  const auto crop = imaging::crop_region(imaging::Image(20, 20), {0, 0, 10, 10});
  const auto r = translate_slice(1, global, crop, prompt::ReplayWindow(4), fast_config(), backend, {"x", 0, {}});
  EXPECT_EQ(r.status, SliceStatus::kFailed);
  EXPECT_EQ(r.attempts, 3);
  EXPECT_NE(r.error.find("permanent"), std::string::npos);
}

TEST(TranslateImage, FailedSliceSkippedInReplay) {
  RecordingBackend backend;
  backend.always_fail.insert(2);
  auto det = five_regions();
  const auto doc = translate_image(five_region_input(), fast_config(), det, backend);
  ASSERT_EQ(doc.slices.size(), 5u);
  EXPECT_EQ(doc.failed_slices(), 1);
  EXPECT_EQ(doc.slices[2].status, SliceStatus::kFailed);
  EXPECT_EQ(doc.document, "T0\nT1\nT3\nT4");
  // simulated window: only ok translations, capacity 4
  std::vector<std::string> window;
  for (const auto& call : backend.calls) {
    if (call.order_index == 2) {
      EXPECT_EQ(call.replay, (std::vector<std::string>{"T0", "T1"}));
      continue;
    }
    EXPECT_EQ(call.replay, window);
    window.push_back("T" + std::to_string(call.order_index));
    if (window.size() > 4) window.erase(window.begin());
  }
}

TEST(TranslateImage, SlicesAreSequential) {
  RecordingBackend backend;
  auto det = five_regions();
  translate_image(five_region_input(), fast_config(), det, backend);
  ASSERT_EQ(backend.calls.size(), 5u);
  for (std::size_t k = 1; k < backend.calls.size(); ++k) {
    EXPECT_EQ(backend.calls[k].order_index, static_cast<int>(k));
    EXPECT_LE(backend.calls[k - 1].end, backend.calls[k].begin);
  }
}

TEST(TranslateImage, BlankImageGivesEmptyDocument) {
  RecordingBackend backend;
  regions::StaticDetector none({});
  const auto doc = translate_image({imaging::Image(64, 64), "blank", {}}, fast_config(), none, backend);
  EXPECT_TRUE(doc.slices.empty());
  EXPECT_EQ(doc.document, "");
  EXPECT_EQ(doc.stats.visual_tokens, 196);
}

TEST(TranslateImage, LookupBackendReproducesGroundTruth) {
  testing_support::TempDir dir;
  const auto truth = synth::write_translation_corpus(dir.path(), 5, 21);
  LookupBackend backend(dir.path());
  regions::SidecarDetector det;
  for (const auto& t : truth) {
    const auto path = dir / (t.image_id + ".png");
    const auto doc = translate_image({imaging::load_image(path), t.image_id, path}, PipelineConfig{}, det, backend);
    std::string want;
    for (const auto& g : t.groups) want += (want.empty() ? "" : "\n") + g.translation;
    EXPECT_EQ(doc.document, want);
    EXPECT_EQ(doc.stats.n_slices, static_cast<int>(t.groups.size()));
    EXPECT_EQ(doc.failed_slices(), 0);
  }
}

TEST(TranslateImage, DeterministicModuloTiming) {
  testing_support::TempDir dir;
  const auto truth = synth::write_translation_corpus(dir.path(), 1, 5);
  LookupBackend backend(dir.path());
  regions::SidecarDetector det;
  const auto path = dir / (truth[0].image_id + ".png");
  const ImageInput input{imaging::load_image(path), truth[0].image_id, path};
  const auto a = to_json(translate_image(input, PipelineConfig{}, det, backend), false).dump();
  const auto b = to_json(translate_image(input, PipelineConfig{}, det, backend), false).dump();
  EXPECT_EQ(a, b);
}

TEST(TranslateImage, DetectorErrorAborts) {
  RecordingBackend backend;
  regions::SidecarDetector det;  // no source path -> failure
  EXPECT_THROW(translate_image({imaging::Image(32, 32), "x", {}}, fast_config(), det, backend),
               regions::DetectionError);
}

TEST(RunBatch, CorruptFileSkippedAndCoverageComplete) {
  testing_support::TempDir dir;
  synth::write_translation_corpus(dir.path(), 9, 8);
  std::ofstream(dir / "zz_corrupt.png") << "not a png";
  LookupBackend backend(dir.path());
  regions::SidecarDetector det;
  const auto report = run_batch(dir.path(), PipelineConfig{}, det, backend, dir / "out.jsonl", 2);
  EXPECT_EQ(report.records, 9);
  ASSERT_EQ(report.skipped.size(), 1u);
  EXPECT_EQ(report.skipped[0].file, "zz_corrupt.png");
  EXPECT_DOUBLE_EQ(report.coverage, 1.0);
  ASSERT_TRUE(report.bleu.has_value());  // skipped files carry no record
  EXPECT_NEAR(*report.bleu, 100.0, 1e-9);
  std::ifstream in(dir / "out.jsonl");
  int lines = 0;
  for (std::string l; std::getline(in, l);) {
    const auto j = nlohmann::json::parse(l);
    EXPECT_TRUE(j.contains("image_id") && j.contains("slices") && j.contains("document") && j.contains("stats"));
    ++lines;
  }
  EXPECT_EQ(lines, 9);
}

TEST(RunBatch, EmptyDirectory) {
  testing_support::TempDir dir;
  RecordingBackend backend;
  regions::StaticDetector none({});
  const auto report = run_batch(dir.path(), PipelineConfig{}, none, backend, dir / "out.jsonl");
  EXPECT_EQ(report.records, 0);
  EXPECT_TRUE(report.skipped.empty());
}

TEST(HttpChatBackend, RequestLayoutAndAuth) {
  httplib::Server server;
  nlohmann::json seen;
  std::string auth;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"你好"}}]})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  ::setenv("GLOTRAN_API_TOKEN", "sekrit", 1);

  HttpChatBackend backend("http://127.0.0.1:" + std::to_string(port) + "/v1/", 5.0);
  auto det = five_regions();
  GenerationParams params;
  params.model = "mllm";
  const auto doc = translate_image(five_region_input(), fast_config(), det, backend, params);
  ::unsetenv("GLOTRAN_API_TOKEN");
  server.stop();
  t.join();

  EXPECT_EQ(doc.failed_slices(), 0);
  EXPECT_EQ(doc.slices[0].translation, "你好");
  EXPECT_EQ(auth, "Bearer sekrit");
  EXPECT_EQ(seen["model"], "mllm");
  const auto& content = seen["messages"][0]["content"];
  ASSERT_EQ(content.size(), 5u);
  EXPECT_EQ(content[0]["text"], prompt::kGlobalIdentifier);
  EXPECT_EQ(content[1]["type"], "image_url");
  EXPECT_EQ(content[1]["image_url"]["url"].get<std::string>().rfind("data:image/png;base64,", 0), 0u);
  EXPECT_EQ(content[2]["text"], prompt::kLocalIdentifier);
  EXPECT_NE(content[4]["text"].get<std::string>().find("[Translation Instruction]"), std::string::npos);
}

TEST(HttpChatBackend, ServerErrorsBecomeFailedSlices) {
  httplib::Server server;
  int hits = 0;
  server.Post("/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 503;
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  HttpChatBackend backend("http://127.0.0.1:" + std::to_string(port), 5.0);
  const auto global = std::make_shared<const imaging::Image>(16, 16);
  const auto crop = imaging::crop_region(imaging::Image(20, 20), {0, 0, 10, 10});
  const auto r = translate_slice(1, global, crop, prompt::ReplayWindow(4), fast_config(), backend, {"x", 0, {}});
  server.stop();
  t.join();
  EXPECT_EQ(r.status, SliceStatus::kFailed);
  EXPECT_EQ(r.attempts, 3);
  EXPECT_EQ(hits, 3);
}

TEST(Sweep, GridShapeAndMonotoneTokens) {
  testing_support::TempDir dir;
  synth::write_translation_corpus(dir / "c", 3, 4);
  const auto files = list_images(dir / "c");
  LookupBackend backend(dir / "c");
  regions::SidecarDetector det;
  const auto result = run_sweep(files, PipelineConfig{}, {1, 4}, {224, 448}, det, backend, dir / "w");
  ASSERT_EQ(result.cells.size(), 4u);
  EXPECT_TRUE(result.visual_tokens_monotone);
  EXPECT_EQ(result.cells[0].replay, 1);
  EXPECT_EQ(result.cells[1].resolution, 448);
  EXPECT_LT(result.cells[0].mean_visual_tokens, result.cells[1].mean_visual_tokens);
  for (const auto& c : result.cells) EXPECT_NEAR(*c.bleu, 100.0, 1e-9);
  write_sweep_csv(result, dir / "s.csv");
  std::ifstream in(dir / "s.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header.rfind("replay,resolution", 0), 0u);
  EXPECT_NE(sweep_reference_note().find("43.54"), std::string::npos);
}
