#include <gtest/gtest.h>

#include <httplib.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "glotran/glod.hpp"
#include "glotran/synth.hpp"
#include "support/temp_dir.hpp"

using namespace glotran;
using namespace glotran::glod;

namespace {

std::vector<std::string> words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string join_words(const std::vector<std::string>& w) {
  std::string out;
  for (std::size_t i = 0; i < w.size(); ++i) out += (i ? " " : "") + w[i];
  return out;
}

imaging::Image textured(int w, int h) {
  imaging::Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t v = ((x / 4 + y / 4) % 2) ? 255 : 0;
      img.at(x, y, 0) = img.at(x, y, 1) = img.at(x, y, 2) = v;
    }
  return img;
}

// Naive character trigram cosine over code points.
double naive_cosine(const std::u32string& a, const std::u32string& b) {
  auto grams = [](const std::u32string& s) {
    std::vector<std::u32string> g;
    if (s.empty()) return g;
    if (s.size() < 3) return std::vector<std::u32string>{s};
    for (std::size_t i = 0; i + 3 <= s.size(); ++i) g.push_back(s.substr(i, 3));
    return g;
  };
  const auto ga = grams(a);
  const auto gb = grams(b);
  if (ga.empty() || gb.empty()) return 0.0;
  double dot = 0, na = 0, nb = 0;
  for (const auto& x : ga) {
    for (const auto& y : gb) dot += x == y;
    for (const auto& y : ga) na += x == y;
  }
  for (const auto& x : gb)
    for (const auto& y : gb) nb += x == y;
  return dot / std::sqrt(na * nb);
}

std::string utf8(const std::u32string& s) {
  std::string out;
  for (char32_t c : s) {
    if (c < 0x80) {
      out += static_cast<char>(c);
    } else if (c < 0x800) {
      out += static_cast<char>(0xc0 | (c >> 6));
      out += static_cast<char>(0x80 | (c & 0x3f));
    } else {
      out += static_cast<char>(0xe0 | (c >> 12));
      out += static_cast<char>(0x80 | ((c >> 6) & 0x3f));
      out += static_cast<char>(0x80 | (c & 0x3f));
    }
  }
  return out;
}

// Translator backed by a fixed table; unknown input is an error.
class TableTranslator : public Translator {
 public:
  TableTranslator(std::string name, std::map<std::string, std::string> fwd, std::map<std::string, std::string> back)
      : name_(std::move(name)), fwd_(std::move(fwd)), back_(std::move(back)) {}
  std::string name() const override { return name_; }
  std::string translate(const std::string& text, const std::string& src, const std::string&) override {
    const auto& table = src == "en" ? fwd_ : back_;
    auto it = table.find(text);
    if (it == table.end()) throw TranslationError(name_ + " cannot translate " + text);
    return it->second;
  }

 private:
  std::string name_;
  std::map<std::string, std::string> fwd_;
  std::map<std::string, std::string> back_;
};

class FailingTranslator : public Translator {
 public:
  std::string name() const override { return "down"; }
  std::string translate(const std::string&, const std::string&, const std::string&) override {
    throw TranslationError("offline");
  }
};

class FailingEmbedder : public Embedder {
 public:
  std::string name() const override { return "down"; }
  std::vector<double> embed(const std::string&) override { throw std::runtime_error("offline"); }
};

struct OracleCandidate {
  std::string text;
  std::string back;
  double sim = -1;
};

// Exhaustive restatement of the back-translation fusion rule for table translators.
OracleCandidate oracle_fuse(const std::string& src, std::vector<TableTranslator*> ts, int rounds) {
  auto score = [&](const std::string& text, std::size_t producer) {
    OracleCandidate c{text, "", -1};
    for (std::size_t j = 0; j < ts.size(); ++j) {
      if (ts.size() > 1 && j == producer) continue;
      std::string back;
      try {
        back = ts[j]->translate(text, "zh", "en");
      } catch (const TranslationError&) {
        continue;
      }
      if (ngram_cosine(src, back) > c.sim) {
        c.sim = ngram_cosine(src, back);
        c.back = back;
      }
    }
    c.sim = std::max(c.sim, 0.0);
    return c;
  };
  std::optional<OracleCandidate> winner;
  std::string seed = src;
  for (int r = 1; r <= rounds; ++r) {
    if (r > 1 && winner->back.empty()) break;
    std::vector<OracleCandidate> pool;
    if (winner) pool.push_back(*winner);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      try {
        pool.push_back(score(ts[i]->translate(seed, "en", "zh"), i));
      } catch (const TranslationError&) {
      }
    }
    if (pool.empty()) throw TranslationError("no candidate");
    OracleCandidate best = pool.front();
    for (const auto& c : pool)
      if (c.sim > best.sim) best = c;
    winner = best;
    seed = best.back;
  }
  return *winner;
}

}  // namespace

TEST(Prefilter, ReportsEveryFailingCheck) {
  QcThresholds t;
  const RawSample ok{"a.png", "a", "menu", true};
  const regions::RegionSet three{{{0, 0, 10, 10, 0.9}, {20, 0, 30, 10, 0.9}, {40, 0, 50, 10, 0.8}}, 500, 500};
  EXPECT_TRUE(prefilter(ok, textured(500, 500), three, t).accepted);

  imaging::Image flat(300, 600);
  flat.fill(128, 128, 128);
  const RawSample closed{"b.png", "b", "menu", false};
  const regions::RegionSet none{{}, 300, 600};
  const auto v = prefilter(closed, flat, none, t);
  EXPECT_FALSE(v.accepted);
  EXPECT_EQ(v.reasons, (std::vector<RejectReason>{RejectReason::kLowResolution, RejectReason::kBlur,
                                                  RejectReason::kLowOcrConfidence, RejectReason::kLowTextRichness,
                                                  RejectReason::kLicense}));
  EXPECT_EQ(to_string(RejectReason::kLowTextRichness), "low_text_richness");
}

TEST(Prefilter, MeanConfidenceBoundaryIsInclusive) {
  QcThresholds t;
  t.min_regions = 1;
  const RawSample s{"a.png", "a", "menu", true};
  const regions::RegionSet at{{{0, 0, 10, 10, 0.6}, {20, 0, 30, 10, 0.8}}, 500, 500};
  EXPECT_TRUE(prefilter(s, textured(500, 500), at, t).accepted);
  const regions::RegionSet below{{{0, 0, 10, 10, 0.6}, {20, 0, 30, 10, 0.79}}, 500, 500};
  EXPECT_EQ(prefilter(s, textured(500, 500), below, t).reasons,
            (std::vector<RejectReason>{RejectReason::kLowOcrConfidence}));
}

TEST(Thresholds, Validation) {
  QcThresholds t;
  EXPECT_NO_THROW(t.validate());
  t.embed = 1.5;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  t = {};
  t.rounds = 0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
}

TEST(FuseDetections, MatchedPairsUnionAndUnmatchedByConfidence) {
  const regions::RegionSet a{{{0, 0, 100, 20, 0.9}, {0, 50, 100, 70, 0.5}, {300, 0, 350, 20, 0.8}}, 500, 500};
  const regions::RegionSet b{{{2, 1, 102, 21, 0.95}, {200, 200, 260, 230, 0.75}, {200, 300, 260, 330, 0.4}}, 500, 500};
  const auto out = fuse_detections(a, b, 0.5, 0.7);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out.boxes[0], (BoundingBox{0, 0, 102, 21, 0.95}));
  EXPECT_EQ(out.boxes[1], (BoundingBox{300, 0, 350, 20, 0.8}));
  EXPECT_EQ(out.boxes[2], (BoundingBox{200, 200, 260, 230, 0.75}));
  EXPECT_THROW(fuse_detections(a, {{}, 10, 10}, 0.5, 0.7), std::invalid_argument);
}

TEST(FuseDetections, GreedyPrefersHighestIou) {
  // a0 overlaps both b boxes; the tighter pair wins and a1 takes the other
  const regions::RegionSet a{{{0, 0, 100, 20, 0.9}, {10, 0, 110, 20, 0.9}}, 500, 500};
  const regions::RegionSet b{{{10, 0, 110, 20, 0.9}, {0, 0, 100, 20, 0.9}}, 500, 500};
  const auto out = fuse_detections(a, b, 0.5, 0.7);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out.boxes[0], (BoundingBox{0, 0, 100, 20, 0.9}));
  EXPECT_EQ(out.boxes[1], (BoundingBox{10, 0, 110, 20, 0.9}));
}

TEST(FuseRecognition, FillsGapsFromContext) {
  EXPECT_EQ(fuse_recognition("fresh tea", "fresh coffee"), "fresh tea");
  EXPECT_EQ(fuse_recognition("fresh ∅ daily", "fresh tea daily"), "fresh tea daily");
  EXPECT_EQ(fuse_recognition("∅ ∅", "north station exit"), "north station exit");
  EXPECT_EQ(fuse_recognition("∅ today", "today today"), "today today");
  EXPECT_EQ(fuse_recognition("open ∅", ""), "open ∅");
  // equal-length segments fill position by position; unequal ones are left alone
  EXPECT_EQ(fuse_recognition("a ∅ x d", "a b c d"), "a b x d");
  EXPECT_EQ(fuse_recognition("a ∅ x d", "a b c e d"), "a ∅ x d");
}

TEST(FuseRecognition, RecoversTruthWhenOnlyGapsDiffer) {
  std::mt19937_64 rng(21);
  const std::vector<std::string> vocab{"a", "b", "c", "today"};
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 8);
    std::vector<std::string> truth;
    for (int k = 0; k < n; ++k) truth.push_back(vocab[rng() % vocab.size()]);
    auto local = truth;
    for (auto& w : local)
      if (rng() % 3 == 0) w = kGapToken;
    ASSERT_EQ(fuse_recognition(join_words(local), join_words(truth)), join_words(truth))
        << join_words(local) << " | " << join_words(truth);
  }
}

TEST(FuseRecognition, KeepsEveryReadTokenInOrder) {
  std::mt19937_64 rng(22);
  const std::vector<std::string> vocab{"a", "b", "c", kGapToken};
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<std::string> local, context;
    for (int k = static_cast<int>(rng() % 7); k > 0; --k) local.push_back(vocab[rng() % 4]);
    for (int k = static_cast<int>(rng() % 7); k > 0; --k) context.push_back(vocab[rng() % 3]);
    const auto out = words(fuse_recognition(join_words(local), join_words(context)));
    std::size_t p = 0;
    for (const auto& w : local) {
      if (w == kGapToken) continue;
      while (p < out.size() && out[p] != w) ++p;
      ASSERT_LT(p, out.size()) << join_words(local) << " | " << join_words(context);
      ++p;
    }
  }
}

TEST(NgramCosine, MatchesNaiveOracle) {
  std::mt19937_64 rng(23);
  const std::u32string alphabet = U"ab 茶新";
  EXPECT_EQ(ngram_cosine("", "abc"), 0.0);
  EXPECT_DOUBLE_EQ(ngram_cosine("ab", "ab"), 1.0);
  EXPECT_EQ(ngram_cosine("ab", "abc"), 0.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::u32string a, b;
    for (int k = static_cast<int>(rng() % 9); k > 0; --k) a += alphabet[rng() % alphabet.size()];
    for (int k = static_cast<int>(rng() % 9); k > 0; --k) b += alphabet[rng() % alphabet.size()];
    ASSERT_NEAR(ngram_cosine(utf8(a), utf8(b)), naive_cosine(a, b), 1e-12);
    ASSERT_NEAR(ngram_cosine(utf8(a), utf8(b)), ngram_cosine(utf8(b), utf8(a)), 1e-15);
  }
}

TEST(FuseTranslation, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(24);
  const std::vector<std::string> en{"fresh tea", "fresh the", "free tea", "tea fresh", "fresh"};
  const std::vector<std::string> zh{"甲", "乙", "丙", "丁"};
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + trial % 3;
    std::vector<std::unique_ptr<TableTranslator>> owned;
    std::vector<TableTranslator*> ts;
    std::vector<Translator*> base;
    for (int i = 0; i < n; ++i) {
      std::map<std::string, std::string> fwd, back;
      for (const auto& e : en)
        if (rng() % 5) fwd[e] = zh[rng() % zh.size()];
      for (const auto& z : zh)
        if (rng() % 5) back[z] = en[rng() % en.size()];
      owned.push_back(std::make_unique<TableTranslator>("t" + std::to_string(i), fwd, back));
      ts.push_back(owned.back().get());
      base.push_back(owned.back().get());
    }
    const int rounds = 1 + trial % 3;
    const std::string src = en[rng() % en.size()];
    std::optional<OracleCandidate> want;
    try {
      want = oracle_fuse(src, ts, rounds);
    } catch (const std::exception&) {
    }
    if (!want) {
      EXPECT_THROW(fuse_translation(src, base, "en", "zh", rounds), TranslationError);
      continue;
    }
    const FusionResult got = fuse_translation(src, base, "en", "zh", rounds);
    ASSERT_EQ(got.fused, want->text) << "trial " << trial;
    ASSERT_DOUBLE_EQ(got.similarity, want->sim);
  }
}

TEST(FuseTranslation, LexiconRoundTripAndErrors) {
  LexiconTranslator a("mt-a"), b("mt-b");
  const auto r = fuse_translation("fresh tea", {&a, &b}, "en", "zh", 2);
  EXPECT_EQ(r.fused, synth::lexicon_translate("fresh tea", "en", "zh"));
  EXPECT_DOUBLE_EQ(r.similarity, 1.0);
  EXPECT_EQ(r.candidates.front().round, 1);
  FailingTranslator down;
  EXPECT_EQ(fuse_translation("fresh tea", {&down, &a}, "en", "zh", 2).fused, r.fused);
  EXPECT_THROW(fuse_translation("fresh tea", {&down}, "en", "zh", 1), TranslationError);
  EXPECT_THROW(fuse_translation("x", {}, "en", "zh", 1), std::invalid_argument);
}

TEST(QualityControl, KeepsConsistentRecordAndDropsDriftedSlice) {
  LexiconTranslator mt("mt");
  LexiconEmbedder emb;
  CurationRecord rec;
  rec.fused_source = "fresh tea\ndaily special";
  rec.fused_translation = mt.translate(rec.fused_source, "en", "zh");
  rec.slices.resize(2);
  rec.slices[0].translation = mt.translate("fresh tea", "en", "zh");
  rec.slices[1].translation = mt.translate("north station", "en", "zh");
  const QcVerdict v = quality_control(rec, emb, {&mt}, QcThresholds{});
  EXPECT_TRUE(v.keep);
  EXPECT_DOUBLE_EQ(v.scores.embed_sim, 1.0);
  EXPECT_DOUBLE_EQ(v.scores.roundtrip_sim, 1.0);
  EXPECT_EQ(v.dropped_slices, (std::vector<std::size_t>{1}));
  EXPECT_FALSE(rec.slices[0].dropped);
  EXPECT_TRUE(rec.slices[1].dropped);
  ASSERT_TRUE(rec.qc);
  EXPECT_TRUE(v.note.empty());
}

TEST(QualityControl, MistranslationFailsAndEmbedderFallsBack) {
  LexiconTranslator mt("mt");
  FailingEmbedder down;
  CurationRecord rec;
  rec.fused_source = "fresh tea";
  rec.fused_translation = mt.translate("museum ticket", "en", "zh");
  rec.slices.resize(1);
  rec.slices[0].translation = rec.fused_translation;
  const QcVerdict v = quality_control(rec, down, {&mt}, QcThresholds{});
  EXPECT_FALSE(v.keep);
  EXPECT_LT(v.scores.roundtrip_sim, 0.6);
  EXPECT_NE(v.note.find("unavailable"), std::string::npos);
  EXPECT_EQ(rec.qc_note, v.note);
  rec.fused_translation.clear();
  EXPECT_THROW(quality_control(rec, down, {&mt}, QcThresholds{}), std::invalid_argument);
}

TEST(Dataset, EmitAndReadRoundTrip) {
  testing_support::TempDir dir;
  DatasetRecord b{"b", "menu", "../b.png", {{{1, 2, 3, 4}, "fresh tea", "新鲜 茶"}}, "fresh tea", "新鲜 茶", 0.9, 0.8};
  DatasetRecord a{"a", "sign", "../a.png", {}, "", "", 0.0, 0.0};
  EXPECT_EQ(emit_dataset({b, a}, dir / "out"), 2u);
  const auto back = read_dataset(dir / "out" / "dataset.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], a);
  EXPECT_EQ(back[1], b);
  std::ifstream m(dir / "out" / "manifest.json");
  const auto manifest = nlohmann::json::parse(m);
  EXPECT_EQ(manifest["records"], 2);
  EXPECT_EQ(manifest["per_scene"]["menu"], 1);
}

TEST(HttpContracts, TranslatorAndEmbedder) {
  httplib::Server server;
  server.Post("/mt", [](const httplib::Request& req, httplib::Response& res) {
    const auto j = nlohmann::json::parse(req.body);
    res.set_content(nlohmann::json{{"text", j["tgt_lang"].get<std::string>() + ":" + j["text"].get<std::string>()}}.dump(),
                    "application/json");
  });
  server.Post("/embed", [](const httplib::Request& req, httplib::Response& res) {
    const auto j = nlohmann::json::parse(req.body);
    const double n = static_cast<double>(j["text"].get<std::string>().size());
    res.set_content(nlohmann::json{{"embedding", {1.0, n}}}.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  const std::string base = "http://127.0.0.1:" + std::to_string(port);
  HttpTranslator mt(base + "/mt", 5.0);
  HttpEmbedder emb(base + "/embed", 5.0);
  const std::string translated = mt.translate("tea", "en", "zh");
  const auto e = emb.embed("abcd");
  const double same = emb.similarity("ab", "cd");
  server.stop();
  t.join();
  EXPECT_EQ(translated, "zh:tea");
  EXPECT_EQ(e, (std::vector<double>{1.0, 4.0}));
  EXPECT_DOUBLE_EQ(same, 1.0);
  HttpTranslator dead("http://127.0.0.1:1/mt", 1.0);
  EXPECT_THROW(dead.translate("tea", "en", "zh"), TranslationError);
}

TEST(Curate, PlantedCorpusMatchesTruth) {
  testing_support::TempDir dir;
  const auto truth = synth::write_planted_corpus(dir / "in", {30, 5});
  regions::SidecarDetector det_a(0), det_b(2);
  SidecarRecognizer recognizer(0.2);
  auto ta = ScriptedTranslator::from_file("mt-a", dir / "in" / "translator_script.json");
  auto tb = ScriptedTranslator::from_file("mt-b", dir / "in" / "translator_script.json");
  LexiconEmbedder emb;
  CurateContracts c{&det_a, &det_b, &recognizer, {&ta, &tb}, &emb};
  CurateOptions opt;
  opt.workers = 3;
  const CurateReport r = curate(dir / "in", dir / "out", c, opt);
  EXPECT_EQ(r.total, truth.total);
  EXPECT_EQ(r.kept, truth.kept);
  EXPECT_EQ(r.dropped_regions, truth.dropped_regions);
  EXPECT_EQ(r.errors, 0);
  std::vector<std::pair<std::string, int>> per_scene(r.kept_per_scene.begin(), r.kept_per_scene.end());
  EXPECT_EQ(per_scene, truth.kept_per_scene);
  const auto ds = read_dataset(dir / "out" / "dataset.jsonl");
  EXPECT_EQ(static_cast<int>(ds.size()), truth.kept);
  for (const auto& rec : ds) {
    EXPECT_FALSE(rec.slices.empty());
    EXPECT_TRUE(std::filesystem::exists(dir / "out" / rec.global_image));
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "audit.csv"));
  EXPECT_THROW(curate(dir / "in", dir / "out", CurateContracts{}, opt), std::invalid_argument);
}
