#include "glotran/synth.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace glotran::synth {

using json = nlohmann::ordered_json;

namespace {

struct LexEntry {
  const char* en;
  const char* zh;
};

// clang-format off
constexpr LexEntry kLexicon[] = {
    {"the", "这"}, {"fresh", "新鲜"}, {"tea", "茶"}, {"coffee", "咖啡"}, {"menu", "菜单"},
    {"daily", "每日"}, {"special", "特价"}, {"open", "营业"}, {"closed", "休息"}, {"exit", "出口"},
    {"entrance", "入口"}, {"station", "车站"}, {"north", "北"}, {"south", "南"}, {"east", "东"},
    {"west", "西"}, {"street", "街"}, {"road", "路"}, {"market", "市场"}, {"hotel", "酒店"},
    {"room", "房间"}, {"price", "价格"}, {"total", "总计"}, {"receipt", "收据"}, {"issue", "期"},
    {"may", "五月"}, {"magazine", "杂志"}, {"news", "新闻"}, {"novel", "小说"}, {"chapter", "章"},
    {"poster", "海报"}, {"concert", "音乐会"}, {"ticket", "票"}, {"free", "免费"}, {"sale", "促销"},
    {"welcome", "欢迎"}, {"library", "图书馆"}, {"school", "学校"}, {"museum", "博物馆"}, {"park", "公园"},
    {"rice", "米饭"}, {"noodles", "面条"}, {"soup", "汤"}, {"fish", "鱼"}, {"chicken", "鸡肉"},
    {"beef", "牛肉"}, {"water", "水"}, {"juice", "果汁"}, {"bread", "面包"}, {"cake", "蛋糕"},
    {"morning", "早上"}, {"evening", "晚上"}, {"today", "今天"}, {"warning", "警告"}, {"danger", "危险"},
    {"stop", "停"}, {"parking", "停车"}, {"floor", "楼层"}, {"city", "城市"}, {"river", "河"},
};
// clang-format on

const std::map<std::string, std::string>& forward_map() {
  static const auto m = [] {
    std::map<std::string, std::string> out;
    for (const auto& e : kLexicon) out.emplace(e.en, e.zh);
    return out;
  }();
  return m;
}

const std::map<std::string, std::string>& reverse_map() {
  static const auto m = [] {
    std::map<std::string, std::string> out;
    for (const auto& e : kLexicon) out.emplace(e.zh, e.en);
    return out;
  }();
  return m;
}

std::uint32_t glyph_bits(unsigned char c) {
  // 35-bit pattern folded into 32 bits plus a forced-ink frame column.
  std::uint32_t h = 2166136261u ^ c;
  h *= 16777619u;
  h ^= h >> 13;
  h *= 0x5bd1e995u;
  h ^= h >> 15;
  return h | 0x01010101u;
}

json box_to_json(const BoundingBox& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

BoundingBox box_from_json(const json& j, double confidence) {
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>(),
          confidence};
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace

std::filesystem::path sidecar_path_for(const std::filesystem::path& image_path) {
  auto p = image_path;
  p.replace_extension(".json");
  return p;
}

Sidecar read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open sidecar: " + path.string());
  const json j = json::parse(in);
  Sidecar s;
  s.image_id = j.at("image_id").get<std::string>();
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  s.scene = j.value("scene", "document");
  s.license_permissive = j.value("license", "permissive") == "permissive";
  s.src_lang = j.value("src_lang", "en");
  s.tgt_lang = j.value("tgt_lang", "zh");
  for (const auto& r : j.at("regions")) {
    GroundTruthRegion reg;
    reg.id = r.at("id").get<std::string>();
    reg.box = box_from_json(r.at("box"), r.value("confidence", 1.0));
    reg.src_text = r.value("src_text", "");
    reg.translation = r.value("translation", "");
    reg.group = r.value("group", 0);
    s.regions.push_back(std::move(reg));
  }
  for (const auto& g : j.value("groups", json::array())) {
    GroundTruthGroup grp;
    grp.region_ids = g.at("region_ids").get<std::vector<std::string>>();
    grp.src_text = g.value("src_text", "");
    grp.translation = g.value("translation", "");
    s.groups.push_back(std::move(grp));
  }
  s.reference = j.value("reference", "");
  s.planted = j.value("planted", "clean");
  s.drift_group = j.value("drift_group", -1);
  return s;
}

void write_sidecar(const Sidecar& s, const std::filesystem::path& path) {
  json j;
  j["image_id"] = s.image_id;
  j["width"] = s.width;
  j["height"] = s.height;
  j["scene"] = s.scene;
  j["license"] = s.license_permissive ? "permissive" : "restricted";
  j["src_lang"] = s.src_lang;
  j["tgt_lang"] = s.tgt_lang;
  j["regions"] = json::array();
  for (const auto& r : s.regions) {
    j["regions"].push_back({{"id", r.id},
                            {"box", box_to_json(r.box)},
                            {"confidence", r.box.confidence},
                            {"src_text", r.src_text},
                            {"translation", r.translation},
                            {"group", r.group}});
  }
  j["groups"] = json::array();
  for (const auto& g : s.groups) {
    j["groups"].push_back(
        {{"region_ids", g.region_ids}, {"src_text", g.src_text}, {"translation", g.translation}});
  }
  j["reference"] = s.reference;
  j["planted"] = s.planted;
  j["drift_group"] = s.drift_group;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write sidecar: " + path.string());
  out << j.dump(2) << '\n';
}

std::string lexicon_translate(const std::string& text, const std::string& src_lang,
                              const std::string& tgt_lang) {
  const std::map<std::string, std::string>* table = nullptr;
  if (src_lang == "en" && tgt_lang == "zh") table = &forward_map();
  if (src_lang == "zh" && tgt_lang == "en") table = &reverse_map();
  std::string out;
  std::istringstream lines(text);
  std::string line;
  bool first_line = true;
  while (std::getline(lines, line)) {
    if (!first_line) out += '\n';
    first_line = false;
    std::istringstream words(line);
    std::string w;
    bool first = true;
    while (words >> w) {
      if (!first) out += ' ';
      first = false;
      if (table) {
        auto it = table->find(w);
        out += it != table->end() ? it->second : w;
      } else {
        out += w;
      }
    }
  }
  return out;
}

const std::vector<std::string>& lexicon_source_words() {
  static const auto words = [] {
    std::vector<std::string> out;
    for (const auto& e : kLexicon) out.emplace_back(e.en);
    return out;
  }();
  return words;
}

int glyph_advance(int scale) { return 6 * scale; }
int glyph_line_height(int scale) { return 10 * scale; }

BoundingBox draw_text(imaging::Image& img, int x, int y, const std::string& text, int scale,
                      std::uint8_t ink) {
  const int adv = glyph_advance(scale);
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c == ' ') continue;
    const std::uint32_t bits = glyph_bits(c);
    for (int gy = 0; gy < 7; ++gy) {
      for (int gx = 0; gx < 5; ++gx) {
        const int bit = (gy * 5 + gx) % 32;
        // Fold the 35-cell pattern; the first column is always inked.
        if (gx != 0 && !((bits >> bit) & 1u)) continue;
        for (int sy = 0; sy < scale; ++sy) {
          for (int sx = 0; sx < scale; ++sx) {
            const int px = x + static_cast<int>(i) * adv + gx * scale + sx;
            const int py = y + (2 + gy) * scale + sy;
            if (px < 0 || py < 0 || px >= img.width() || py >= img.height()) continue;
            for (int ch = 0; ch < 3; ++ch) img.at(px, py, ch) = ink;
          }
        }
      }
    }
  }
  const int w = static_cast<int>(text.size()) * adv - scale;
  return {x, y, x + std::max(w, scale), y + glyph_line_height(scale), 1.0};
}

RenderedSample render_document(const std::string& image_id, std::uint64_t seed,
                               const RenderOptions& opt) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const auto& words = lexicon_source_words();
  const int s = opt.glyph_scale;
  const int line_h = glyph_line_height(s);
  const int adv = glyph_advance(s);
  const int margin = 3 * s * 5;
  int serial = opt.serial_base;

  auto make_text = [&](int max_width) {
    const int n_words = uniform(1, 3);
    std::vector<std::string> picked;
    for (int k = 0; k < n_words; ++k) picked.push_back(words[uniform(0, int(words.size()) - 1)]);
    if (opt.unique_serials) picked.push_back(std::to_string(serial++));
    while (picked.size() > 1 && static_cast<int>(join(picked, " ").size()) * adv > max_width) {
      picked.erase(picked.begin());
    }
    return join(picked, " ");
  };

  imaging::Image img(opt.width, opt.height);
  const auto bg = static_cast<std::uint8_t>(uniform(225, 250));
  img.fill(bg, bg, static_cast<std::uint8_t>(bg - 5));

  Sidecar truth;
  truth.image_id = image_id;
  truth.width = opt.width;
  truth.height = opt.height;
  truth.scene = opt.scene;

  const int n_regions = uniform(opt.min_regions, opt.max_regions);
  int placed = 0;
  int y = margin;
  const int usable_w = opt.width - 2 * margin;
  while (placed < n_regions) {
    const int block_lines = std::min(uniform(1, 3), n_regions - placed);
    if (y + block_lines * (line_h + line_h * 2 / 5) > opt.height - margin) break;
    GroundTruthGroup group;
    const int group_index = static_cast<int>(truth.groups.size());
    const int x0 = margin + uniform(0, usable_w / 3);
    for (int l = 0; l < block_lines && placed < n_regions; ++l) {
      const bool split = placed + 1 < n_regions && uniform(0, 3) == 0;
      const int avail = opt.width - margin - x0;
      const int first_w = split ? (avail - line_h) / 2 : avail;
      std::vector<std::string> texts{make_text(first_w)};
      if (split) texts.push_back(make_text(first_w));
      int x = x0;
      for (const auto& text : texts) {
        GroundTruthRegion reg;
        reg.id = image_id + "/r" + std::to_string(truth.regions.size());
        reg.box = draw_text(img, x, y, text, s);
        reg.box.confidence = uniform(85, 99) / 100.0;
        reg.src_text = text;
        reg.translation = lexicon_translate(text, "en", "zh");
        reg.group = group_index;
        x = reg.box.x_max + line_h / 2;
        group.region_ids.push_back(reg.id);
        truth.regions.push_back(std::move(reg));
        ++placed;
      }
      y += line_h + line_h * 2 / 5;
    }
    std::vector<std::string> srcs;
    std::vector<std::string> tgts;
    for (const auto& id : group.region_ids) {
      for (const auto& r : truth.regions) {
        if (r.id == id) {
          srcs.push_back(r.src_text);
          tgts.push_back(r.translation);
        }
      }
    }
    group.src_text = join(srcs, " ");
    group.translation = join(tgts, " ");
    truth.groups.push_back(std::move(group));
    y += uniform(line_h * 5 / 2, line_h * 7 / 2) - line_h * 2 / 5;
  }

  std::vector<std::string> doc;
  for (const auto& g : truth.groups) doc.push_back(g.translation);
  truth.reference = join(doc, "\n");
  return {std::move(img), std::move(truth)};
}

imaging::Image box_blur(const imaging::Image& img, int radius, int passes) {
  imaging::Image cur = img;
  const int w = img.width();
  const int h = img.height();
  for (int p = 0; p < passes; ++p) {
    imaging::Image tmp(w, h);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) {
          int sum = 0;
          int n = 0;
          for (int k = -radius; k <= radius; ++k) {
            const int xx = std::clamp(x + k, 0, w - 1);
            sum += cur.at(xx, y, c);
            ++n;
          }
          tmp.at(x, y, c) = static_cast<std::uint8_t>((sum + n / 2) / n);
        }
      }
    }
    imaging::Image out(w, h);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) {
          int sum = 0;
          int n = 0;
          for (int k = -radius; k <= radius; ++k) {
            const int yy = std::clamp(y + k, 0, h - 1);
            sum += tmp.at(x, yy, c);
            ++n;
          }
          out.at(x, y, c) = static_cast<std::uint8_t>((sum + n / 2) / n);
        }
      }
    }
    cur = std::move(out);
  }
  return cur;
}

std::vector<Sidecar> write_translation_corpus(const std::filesystem::path& dir, int count,
                                              std::uint64_t seed, const RenderOptions& options) {
  std::filesystem::create_directories(dir);
  std::vector<Sidecar> out;
  const auto& scenes = scene_taxonomy();
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%04d", i);
    RenderOptions opt = options;
    opt.scene = scenes[static_cast<std::size_t>(i) % 8];
    auto sample = render_document(name, seed * 1000003ULL + static_cast<std::uint64_t>(i), opt);
    const auto png = dir / (std::string(name) + ".png");
    imaging::save_png(sample.image, png);
    write_sidecar(sample.truth, sidecar_path_for(png));
    out.push_back(std::move(sample.truth));
  }
  return out;
}

PlantedTruth write_planted_corpus(const std::filesystem::path& dir, const PlantedCorpusSpec& spec) {
  std::filesystem::create_directories(dir);
  // Repeating schedule of 25: 10 clean, 3 low-res, 2 blank, 3 blurred, 4 mistranslated, 3 drift.
  static const std::vector<std::string> kSchedule = {
      "clean", "low_resolution", "mistranslation", "clean", "blurred", "semantic_drift",
      "clean", "blank", "mistranslation", "clean", "low_resolution", "semantic_drift",
      "clean", "blurred", "mistranslation", "clean", "blank", "clean",
      "semantic_drift", "low_resolution", "clean", "mistranslation", "blurred", "clean",
      "clean"};
  const auto& scenes = scene_taxonomy();
  std::mt19937_64 rng(spec.seed);
  json overrides = json::object();
  std::map<std::string, int> kept_per_scene;
  std::map<std::string, int> planted_counts;
  PlantedTruth truth;
  truth.total = spec.count;
  int serial = 1000;

  for (int i = 0; i < spec.count; ++i) {
    const std::string kind = kSchedule[static_cast<std::size_t>(i) % kSchedule.size()];
    char name[32];
    std::snprintf(name, sizeof name, "raw_%04d", i);
    RenderOptions opt;
    opt.scene = scenes[static_cast<std::size_t>(i * 7) % scenes.size()];
    opt.unique_serials = true;
    if (kind == "low_resolution") {
      opt.width = 400;
      opt.height = 300;
      opt.glyph_scale = 1;
      opt.max_regions = 5;
    }
    RenderedSample sample;
    for (int attempt = 0;; ++attempt) {
      opt.serial_base = serial;
      sample = render_document(name, rng(), opt);
      const bool enough_groups = kind != "semantic_drift" || sample.truth.groups.size() >= 2;
      if (enough_groups && static_cast<int>(sample.truth.regions.size()) >= opt.min_regions) break;
      if (attempt > 50) throw std::runtime_error("planted corpus: cannot satisfy layout for " + kind);
    }
    serial += 64;
    sample.truth.planted = kind;

    if (kind == "blank") {
      sample.image.fill(238, 238, 232);
      sample.truth.regions.clear();
      sample.truth.groups.clear();
      sample.truth.reference.clear();
    } else if (kind == "blurred") {
      sample.image = box_blur(sample.image, 6, 3);
    } else if (kind == "mistranslation") {
      std::vector<std::string> lines;
      for (const auto& g : sample.truth.groups) lines.push_back(g.src_text);
      const std::string doc = join(lines, "\n");
      // Unrelated content in the target language, the same for every translator.
      std::string bogus = "危险 警告 " + std::to_string(900000 + i) + " 停 停车 河";
      overrides[doc] = bogus;
    } else if (kind == "semantic_drift") {
      const int g = static_cast<int>(rng() % sample.truth.groups.size());
      sample.truth.drift_group = g;
      overrides[sample.truth.groups[static_cast<std::size_t>(g)].src_text] =
          "危险 警告 停车 河 " + std::to_string(800000 + i);
    }

    const auto png = dir / (std::string(name) + ".png");
    imaging::save_png(sample.image, png);
    write_sidecar(sample.truth, sidecar_path_for(png));

    ++planted_counts[kind];
    if (kind == "clean" || kind == "semantic_drift") {
      ++truth.kept;
      ++kept_per_scene[opt.scene];
      if (kind == "semantic_drift") ++truth.dropped_regions;
    }
  }

  json script;
  script["overrides"] = overrides;
  std::ofstream(dir / "translator_script.json") << script.dump(2) << '\n';

  truth.kept_per_scene.assign(kept_per_scene.begin(), kept_per_scene.end());
  truth.planted_counts.assign(planted_counts.begin(), planted_counts.end());
  return truth;
}

const std::vector<std::string>& scene_taxonomy() {
  static const std::vector<std::string> kScenes = {
      "document",      "poster",       "menu",          "road_sign",    "receipt",
      "newspaper",     "novel_page",   "magazine",      "leaflet",      "book_cover",
      "slide",         "screenshot",   "product_label", "packaging",    "storefront",
      "billboard",     "ticket",       "timetable",     "map",          "notice_board",
      "handwritten",   "whiteboard",   "invoice",       "form",         "certificate",
      "banner",        "label_shelf",  "museum_plaque", "transit_map",  "event_flyer",
      "recipe_card",   "manual",       "warning_sign",  "instructions", "price_tag",
      "calendar",      "brochure",     "comic_panel",   "academic_paper", "web_page"};
  return kScenes;
}

}  // namespace glotran::synth
