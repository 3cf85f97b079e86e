#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "glotran/geometry.hpp"
#include "glotran/imaging.hpp"

// Synthetic text-image renderer with exact ground truth. The images are not
// meant to be readable; every glyph is a deterministic 5x7 ink pattern so the
// renderer knows the box of every line it draws.
namespace glotran::synth {

struct GroundTruthRegion {
  std::string id;
  BoundingBox box;
  std::string src_text;
  std::string translation;
  int group = 0;
};

struct GroundTruthGroup {
  std::vector<std::string> region_ids;  // reading order
  std::string src_text;
  std::string translation;
};

/// Contents of the `<stem>.json` sidecar next to each rendered image.
struct Sidecar {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::string scene = "document";
  bool license_permissive = true;
  std::string src_lang = "en";
  std::string tgt_lang = "zh";
  std::vector<GroundTruthRegion> regions;
  std::vector<GroundTruthGroup> groups;
  std::string reference;  // newline-joined group translations
  std::string planted = "clean";
  int drift_group = -1;  // group whose local translation is scripted to drift
};

std::filesystem::path sidecar_path_for(const std::filesystem::path& image_path);
Sidecar read_sidecar(const std::filesystem::path& path);
void write_sidecar(const Sidecar& sidecar, const std::filesystem::path& path);

/// Word-level en<->zh toy lexicon. Unknown tokens pass through unchanged.
std::string lexicon_translate(const std::string& text, const std::string& src_lang,
                              const std::string& tgt_lang);
const std::vector<std::string>& lexicon_source_words();

/// Draws `text` with the block glyph font; returns the line's box.
BoundingBox draw_text(imaging::Image& img, int x, int y, const std::string& text, int scale,
                      std::uint8_t ink = 20);

/// Cell size of the block font at `scale`.
int glyph_advance(int scale);
int glyph_line_height(int scale);

struct RenderOptions {
  int width = 1024;
  int height = 768;
  int min_regions = 3;
  int max_regions = 8;
  int glyph_scale = 2;
  std::string scene = "document";
  /// Appends a unique serial number to every region text.
  bool unique_serials = false;
  int serial_base = 0;
};

struct RenderedSample {
  imaging::Image image;
  Sidecar truth;
};

/// Stacked paragraph blocks: lines inside a block are left-aligned with tight
/// spacing, some lines split into two boxes, blocks separated by >= 2.5 lines.
RenderedSample render_document(const std::string& image_id, std::uint64_t seed,
                               const RenderOptions& options = {});

/// Box blur with the given radius, applied `passes` times.
imaging::Image box_blur(const imaging::Image& img, int radius, int passes = 1);

/// Writes `count` rendered documents (PNG + sidecar) into `dir`.
std::vector<Sidecar> write_translation_corpus(const std::filesystem::path& dir, int count,
                                              std::uint64_t seed,
                                              const RenderOptions& options = {});

struct PlantedCorpusSpec {
  int count = 200;
  std::uint64_t seed = 7;
};

struct PlantedTruth {
  int total = 0;
  int kept = 0;
  int dropped_regions = 0;
  std::vector<std::pair<std::string, int>> kept_per_scene;  // sorted by scene
  std::vector<std::pair<std::string, int>> planted_counts;  // sorted by kind
};

/// Curation corpus with planted defects (low resolution, blank, blurred,
/// mistranslation, semantic drift) plus a `translator_script.json` of scripted
/// translator overrides that realise the translation defects.
PlantedTruth write_planted_corpus(const std::filesystem::path& dir, const PlantedCorpusSpec& spec);

/// Seed list of scene tags used by the renderer and curation manifests.
const std::vector<std::string>& scene_taxonomy();

}  // namespace glotran::synth
