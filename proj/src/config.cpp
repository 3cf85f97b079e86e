#include "glotran/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <thread>

namespace glotran::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T checked(const std::string& key, const std::string& value, T (*parse)(const std::string&, std::size_t*)) {
  try {
    std::size_t pos = 0;
    T v = parse(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid value for " + key + ": '" + value + "'");
  }
}

int to_int(const std::string& s, std::size_t* pos) { return std::stoi(s, pos); }
double to_double(const std::string& s, std::size_t* pos) { return std::stod(s, pos); }

}  // namespace

std::string to_string(Layer layer) {
  switch (layer) {
    case Layer::kDefault: return "default";
    case Layer::kFile: return "file";
    case Layer::kFlag: return "flag";
    case Layer::kEnv: return "env";
  }
  return "default";
}

std::string env_name(const std::string& key) {
  std::string out = "GLOTRAN_";
  for (char c : key) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

const std::map<std::string, std::string>& Settings::defaults() {
  static const std::map<std::string, std::string> kDefaults = {
      // pipeline
      {"global_res", "224"},
      {"slice_cap", "448"},
      {"replay", "4"},
      {"patch_size", "16"},
      {"alpha", "1.0"},
      {"beta", "0.5"},
      {"gamma", "1.5"},
      {"align_tol", "-1"},
      {"max_attempts", "3"},
      {"backoff", "0.5"},
      {"backoff_multiplier", "2.0"},
      {"src_lang", "en"},
      {"tgt_lang", ""},
      {"failed_placeholder", ""},
      {"templates_dir", ""},
      {"allow_failed", "false"},
      // endpoints
      {"backend_url", ""},
      {"detector_url", ""},
      {"model", ""},
      {"timeout", "60"},
      {"translator_urls", ""},
      {"embedder_url", ""},
      {"translator_script", ""},
      {"metric_url", ""},
      // run
      {"workers", "0"},
      {"out", ""},
      {"seed", "7"},
      // curation
      {"tau_ocr", "0.7"},
      {"min_regions", "3"},
      {"min_side", "448"},
      {"blur_floor", "50"},
      {"iou_min", "0.5"},
      {"tau_embed", "0.75"},
      {"tau_roundtrip", "0.6"},
      {"rounds", "2"},
      {"jitter_px", "2"},
      {"gap_rate", "0.2"},
      // reference model
      {"ref_d_v", "8"},
      {"ref_d_t", "16"},
      {"ref_patch", "16"},
      {"ref_enc_layers", "2"},
      {"ref_dec_layers", "4"},
      {"ref_cross_layers", "0,2"},
      {"ref_heads", "2"},
      {"ref_vocab", "32"},
      {"ref_buckets", "8"},
      {"ref_replay", "4"},
      {"ref_max_positions", "128"},
      {"ref_mlp_ratio", "2"},
      {"ref_local_keys", "false"},
      {"ref_lr", "0.003"},
      {"ref_steps", "500"},
      {"ref_records", "16"},
  };
  return kDefaults;
}

Settings::Settings() {
  for (const auto& [k, v] : defaults()) entries_[k] = {v, Layer::kDefault};
}

void Settings::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), Layer::kFile);
}

void Settings::load_text(const std::string& text, Layer layer) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), layer);
  }
}

void Settings::set(const std::string& key, const std::string& value, Layer layer) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown config key: " + key);
  if (layer < it->second.layer) return;
  it->second = {value, layer};
}

void Settings::apply_env(const EnvLookup& lookup) {
  for (auto& [key, entry] : entries_) {
    if (const char* v = lookup(env_name(key).c_str()); v != nullptr) entry = {v, Layer::kEnv};
  }
}

const std::string& Settings::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown config key: " + key);
  return it->second.value;
}

Layer Settings::layer_of(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown config key: " + key);
  return it->second.layer;
}

int Settings::get_int(const std::string& key) const { return checked<int>(key, get(key), to_int); }

double Settings::get_double(const std::string& key) const {
  return checked<double>(key, get(key), to_double);
}

bool Settings::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off" || v.empty()) return false;
  throw ConfigError("invalid boolean for " + key + ": '" + v + "'");
}

std::vector<std::string> Settings::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

pipeline::PipelineConfig Settings::pipeline() const {
  pipeline::PipelineConfig cfg;
  cfg.global_resolution = get_int("global_res");
  cfg.slice_cap = get_int("slice_cap");
  cfg.replay = get_int("replay");
  cfg.patch_size = get_int("patch_size");
  cfg.grouping.alpha = get_double("alpha");
  cfg.grouping.beta = get_double("beta");
  cfg.grouping.gamma = get_double("gamma");
  cfg.grouping.align_tol = get_double("align_tol");
  cfg.retry.max_attempts = get_int("max_attempts");
  cfg.retry.base_backoff = get_double("backoff");
  cfg.retry.multiplier = get_double("backoff_multiplier");
  cfg.src_lang = get("src_lang");
  cfg.tgt_lang = get("tgt_lang").empty() ? "zh" : get("tgt_lang");
  if (!get("failed_placeholder").empty()) cfg.failed_placeholder = get("failed_placeholder");
  try {
    if (!get("templates_dir").empty()) {
      cfg.templates = prompt::TemplateSet::load(get("templates_dir"), cfg.src_lang, cfg.tgt_lang);
    }
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

glod::QcThresholds Settings::qc() const {
  glod::QcThresholds t;
  t.ocr_confidence = get_double("tau_ocr");
  t.min_regions = get_int("min_regions");
  t.min_side = get_int("min_side");
  t.blur_floor = get_double("blur_floor");
  t.iou_min = get_double("iou_min");
  t.embed = get_double("tau_embed");
  t.roundtrip = get_double("tau_roundtrip");
  t.rounds = get_int("rounds");
  try {
    t.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return t;
}

refmodel::RefModelConfig Settings::refmodel() const {
  refmodel::RefModelConfig c;
  c.d_v = get_int("ref_d_v");
  c.d_t = get_int("ref_d_t");
  c.patch = get_int("ref_patch");
  c.enc_layers = get_int("ref_enc_layers");
  c.dec_layers = get_int("ref_dec_layers");
  c.cross_layers.clear();
  for (const auto& item : get_list("ref_cross_layers")) {
    c.cross_layers.push_back(checked<int>("ref_cross_layers", item, to_int));
  }
  c.heads = get_int("ref_heads");
  c.vocab = get_int("ref_vocab");
  c.buckets = get_int("ref_buckets");
  c.replay = get_int("ref_replay");
  c.max_positions = get_int("ref_max_positions");
  c.mlp_ratio = get_int("ref_mlp_ratio");
  c.local_keys = get_bool("ref_local_keys");
  c.lr = get_double("ref_lr");
  c.seed = static_cast<std::uint64_t>(get_int("seed"));
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

int Settings::workers() const {
  const int w = get_int("workers");
  if (w < 0) throw ConfigError("workers must be >= 0");
  if (w == 0) return std::max(1u, std::thread::hardware_concurrency());
  return w;
}

void Settings::validate() const {
  pipeline();
  qc();
  refmodel();
  workers();
  for (const char* k : {"timeout", "jitter_px", "gap_rate", "ref_steps", "ref_records", "seed"}) {
    if (get_double(k) < 0) throw ConfigError(std::string(k) + " must be >= 0");
  }
  get_bool("allow_failed");
}

std::string Settings::dump() const {
  std::string out;
  for (const auto& [k, e] : entries_) out += k + "=" + e.value + "\n";
  return out;
}

}  // namespace glotran::config
