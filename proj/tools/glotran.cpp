// glotran: command-line entry point.
//
// Exit codes: 0 success, 1 pipeline error, 2 configuration or usage error.

#include <cstdlib>
#include <deque>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "glotran/config.hpp"
#include "glotran/glod.hpp"
#include "glotran/metrics.hpp"
#include "glotran/pipeline.hpp"
#include "glotran/refmodel.hpp"
#include "glotran/synth.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using glotran::config::ConfigError;
using glotran::config::Layer;
using glotran::config::Settings;

namespace {

constexpr int kOk = 0;
constexpr int kPipelineError = 1;
constexpr int kConfigError = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flags shared by every subcommand; each maps onto a config key.
struct CommonFlags {
  std::string config;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key=value config file");
    app->add_option("--set", sets, "override any config key (key=value), repeatable");
    static const std::vector<std::pair<std::string, std::string>> kFlags = {
        {"backend-url", "chat-completion backend base URL (default: lookup mock)"},
        {"detector-url", "region detector URL (default: sidecar mock)"},
        {"global-res", "global view resolution R"},
        {"slice-cap", "long-side cap for slices"},
        {"replay", "replay window size"},
        {"src-lang", "source language code"},
        {"tgt-lang", "target language code"},
        {"workers", "parallel workers (0 = all cores)"},
        {"out", "output path"},
        {"seed", "random seed"},
    };
    for (const auto& [flag, help] : kFlags) {
      std::string key = flag;
      std::replace(key.begin(), key.end(), '-', '_');
      options[key] = app->add_option("--" + flag, values[key], help);
    }
  }

  Settings resolve() const {
    Settings s;
    if (!config.empty()) s.load_file(config);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) s.set(key, values.at(key), Layer::kFlag);
    }
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + kv);
      s.set(kv.substr(0, eq), kv.substr(eq + 1), Layer::kFlag);
    }
    s.apply_env([](const char* name) { return std::getenv(name); });
    s.validate();
    return s;
  }
};

std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      const auto listed = glotran::pipeline::list_images(in);
      files.insert(files.end(), listed.begin(), listed.end());
    } else {
      files.emplace_back(in);
    }
  }
  return files;
}

std::unique_ptr<glotran::regions::Detector> make_detector(const Settings& s) {
  if (!s.get("detector_url").empty()) {
    return std::make_unique<glotran::regions::HttpDetector>(s.get("detector_url"), s.get_double("timeout"));
  }
  return std::make_unique<glotran::regions::SidecarDetector>(0);
}

std::unique_ptr<glotran::pipeline::Backend> make_backend(const Settings& s, const std::vector<fs::path>& files) {
  if (!s.get("backend_url").empty()) {
    return std::make_unique<glotran::pipeline::HttpChatBackend>(s.get("backend_url"), s.get_double("timeout"));
  }
  auto lookup = std::make_unique<glotran::pipeline::LookupBackend>();
  for (const auto& f : files) {
    const auto sidecar = glotran::synth::sidecar_path_for(f);
    if (fs::exists(sidecar)) lookup->add_sidecar(sidecar);
  }
  return lookup;
}

glotran::pipeline::GenerationParams generation(const Settings& s) {
  glotran::pipeline::GenerationParams p;
  p.model = s.get("model");
  return p;
}

std::string out_or(const Settings& s, const std::string& fallback) {
  return s.get("out").empty() ? fallback : s.get("out");
}

int cmd_translate(const Settings& s, const std::vector<std::string>& inputs, bool allow_failed_flag) {
  if (s.get("tgt_lang").empty()) throw UsageError("translate requires --tgt-lang");
  const auto cfg = s.pipeline();
  const auto files = expand_inputs(inputs);
  if (files.empty()) throw UsageError("no input images");
  auto detector = make_detector(s);
  auto backend = make_backend(s, files);
  const fs::path out = out_or(s, "translations.jsonl");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const auto report = glotran::pipeline::run_files(files, cfg, *detector, *backend, out, s.workers(),
                                                   generation(s));
  std::cout << glotran::pipeline::to_json(report).dump(2) << '\n';
  const bool allow_failed = allow_failed_flag || s.get_bool("allow_failed");
  if (!report.skipped.empty()) return kPipelineError;
  if (report.failed_slices > 0 && !allow_failed) return kPipelineError;
  return kOk;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

int cmd_evaluate(const Settings& s, const std::string& hyp, const std::string& ref,
                 const std::string& results, const std::string& corpus, const std::string& metric) {
  std::vector<std::string> hyps;
  std::vector<std::string> refs;
  std::vector<std::string> srcs;
  if (!results.empty()) {
    if (corpus.empty()) throw UsageError("--results needs --corpus for references");
    for (const auto& line : read_lines(results)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const auto id = j.at("image_id").get<std::string>();
      const auto truth = glotran::synth::read_sidecar(fs::path(corpus) / (id + ".json"));
      hyps.push_back(j.at("document").get<std::string>());
      refs.push_back(truth.reference);
      std::string src;
      for (const auto& g : truth.groups) src += (src.empty() ? "" : "\n") + g.src_text;
      srcs.push_back(src);
    }
  } else {
    if (hyp.empty() || ref.empty()) throw UsageError("evaluate needs --hyp and --ref, or --results and --corpus");
    hyps = read_lines(hyp);
    refs = read_lines(ref);
  }
  glotran::metrics::BleuConfig bc;
  bc.tokenization = glotran::metrics::tokenization_for(s.get("tgt_lang").empty() ? "en" : s.get("tgt_lang"));
  const auto stats = glotran::metrics::bleu_stats(hyps, refs, bc);
  std::cout.setf(std::ios::fixed);
  std::cout.precision(6);
  std::cout << "BLEU = " << stats.score << " (BP " << stats.brevity_penalty << ", hyp " << stats.hyp_length
            << ", ref " << stats.ref_length << ")\n";
  if (!metric.empty()) {
    if (s.get("metric_url").empty()) throw UsageError("--metric needs metric_url");
    glotran::metrics::HttpScorer scorer(metric, s.get("metric_url"), s.get_double("timeout"));
    try {
      const auto rec = glotran::metrics::external_score(scorer, hyps, refs, srcs);
      std::cout << metric << " = " << rec.value << '\n';
    } catch (const glotran::metrics::UnsupportedMetricError& e) {
      std::cerr << "glotran: " << e.what() << '\n';
      return kPipelineError;
    }
  }
  return kOk;
}

int cmd_train_ref(const Settings& s) {
  namespace rm = glotran::refmodel;
  const auto cfg = s.refmodel();
  const fs::path out = out_or(s, "refmodel_out");
  fs::create_directories(out);
  const auto data = rm::make_toy_dataset(s.get_int("ref_records"), cfg, cfg.seed + 1);
  try {
    const auto result = rm::train(data, cfg, s.get_int("ref_steps"));
    rm::save_checkpoint(out / "checkpoint.bin", result.state.theta);
    rm::write_loss_csv(out / "loss.csv", result.curve);
    std::ofstream(out / "model.cfg") << rm::to_text(cfg);
    std::cout.precision(6);
    std::cout << "initial_loss_per_token=" << result.curve.front().per_token
              << " final_loss_per_token=" << result.curve.back().per_token
              << " final_objective=" << result.curve.back().objective << " steps=" << s.get_int("ref_steps")
              << " parameters=" << result.state.theta.count() << '\n';
  } catch (const rm::DivergenceError& e) {
    std::cerr << "glotran: training diverged at step " << e.step() << ": " << e.what() << '\n';
    return kPipelineError;
  }
  return kOk;
}

int cmd_bench(const Settings& s, const std::vector<std::string>& inputs) {
  const auto cfg = s.pipeline();
  const auto files = expand_inputs(inputs);
  if (files.empty()) throw UsageError("no input images");
  auto detector = make_detector(s);
  auto backend = make_backend(s, files);
  const fs::path out = out_or(s, "bench");
  fs::create_directories(out);
  const auto report = glotran::pipeline::run_files(files, cfg, *detector, *backend, out / "records.jsonl",
                                                   s.workers(), generation(s));
  std::ofstream csv(out / "bench.csv");
  csv << "images,mean_visual_tokens,first_token_latency_s,fps\n"
      << report.efficiency.images << ',' << report.efficiency.mean_visual_tokens << ','
      << report.efficiency.first_token_latency << ',' << report.efficiency.fps << '\n';
  std::cout << "images=" << report.efficiency.images << " Token^V=" << report.efficiency.mean_visual_tokens
            << " FTL_s=" << report.efficiency.first_token_latency << " FPS=" << report.efficiency.fps << '\n';
  return report.skipped.empty() ? kOk : kPipelineError;
}

std::vector<int> parse_int_list(const std::string& text, const std::string& what) {
  std::vector<int> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad " + what + " entry: " + item);
    }
  }
  if (out.empty()) throw ConfigError(what + " list is empty");
  return out;
}

int cmd_sweep(const Settings& s, const std::vector<std::string>& inputs, const std::string& replays,
              const std::string& resolutions, int count) {
  auto cfg = s.pipeline();
  const fs::path out = out_or(s, "sweep");
  fs::create_directories(out);
  std::vector<fs::path> files;
  if (inputs.empty()) {
    const auto corpus = out / "corpus";
    fs::create_directories(corpus);
    glotran::synth::write_translation_corpus(corpus, count, static_cast<std::uint64_t>(s.get_int("seed")));
    files = glotran::pipeline::list_images(corpus);
  } else {
    files = expand_inputs(inputs);
  }
  auto detector = make_detector(s);
  auto backend = make_backend(s, files);
  const auto etas = parse_int_list(replays, "replay");
  const auto rs = parse_int_list(resolutions, "resolution");
  for (int r : rs) {
    if (r < glotran::imaging::kMinGlobalResolution) throw ConfigError("resolution below 16: " + std::to_string(r));
  }
  for (int e : etas) {
    if (e < 0 || e > glotran::prompt::kMaxReplay) throw ConfigError("replay outside 0..16: " + std::to_string(e));
  }
  const auto result = glotran::pipeline::run_sweep(files, cfg, etas, rs, *detector, *backend, out / "cells",
                                                   s.workers());
  glotran::pipeline::write_sweep_csv(result, out / "sweep.csv");
  std::ofstream(out / "sweep_table.tsv") << glotran::pipeline::sweep_table(result);
  std::ofstream(out / "reference.txt") << glotran::pipeline::sweep_reference_note();
  std::cout << glotran::pipeline::sweep_table(result) << glotran::pipeline::sweep_reference_note();
  if (!result.visual_tokens_monotone) {
    std::cerr << "glotran: Token^V is not strictly increasing in R\n";
    return kPipelineError;
  }
  return kOk;
}

int cmd_curate(const Settings& s, const std::string& input) {
  namespace gl = glotran::glod;
  glotran::glod::CurateOptions opt;
  opt.thresholds = s.qc();
  opt.grouping = s.pipeline().grouping;
  opt.src_lang = s.get("src_lang");
  opt.tgt_lang = s.get("tgt_lang").empty() ? "zh" : s.get("tgt_lang");
  opt.workers = s.workers();

  std::unique_ptr<glotran::regions::Detector> det_a = make_detector(s);
  glotran::regions::SidecarDetector det_b(s.get_int("jitter_px"));
  gl::SidecarRecognizer recognizer(s.get_double("gap_rate"));

  std::vector<std::unique_ptr<gl::Translator>> owned;
  const auto urls = s.get_list("translator_urls");
  if (!urls.empty()) {
    for (const auto& u : urls) owned.push_back(std::make_unique<gl::HttpTranslator>(u, s.get_double("timeout")));
  } else {
    fs::path script = s.get("translator_script");
    if (script.empty() && fs::exists(fs::path(input) / "translator_script.json")) {
      script = fs::path(input) / "translator_script.json";
    }
    for (const char* name : {"mt-a", "mt-b"}) {
      if (script.empty()) {
        owned.push_back(std::make_unique<gl::LexiconTranslator>(name));
      } else {
        owned.push_back(std::make_unique<gl::ScriptedTranslator>(gl::ScriptedTranslator::from_file(name, script)));
      }
    }
  }
  std::unique_ptr<gl::Embedder> embedder;
  if (!s.get("embedder_url").empty()) {
    embedder = std::make_unique<gl::HttpEmbedder>(s.get("embedder_url"), s.get_double("timeout"));
  } else {
    embedder = std::make_unique<gl::LexiconEmbedder>(opt.src_lang, opt.tgt_lang);
  }
  gl::CurateContracts contracts;
  contracts.detector_a = det_a.get();
  contracts.detector_b = &det_b;
  contracts.recognizer = &recognizer;
  for (auto& t : owned) contracts.translators.push_back(t.get());
  contracts.embedder = embedder.get();

  const fs::path out = out_or(s, "curated");
  const auto report = gl::curate(input, out, contracts, opt);
  std::cout << "total=" << report.total << " kept=" << report.kept << " rejected=" << report.rejected
            << " dropped_qc=" << report.dropped_qc << " dropped_regions=" << report.dropped_regions
            << " errors=" << report.errors << '\n';
  return report.errors == 0 ? kOk : kPipelineError;
}

int cmd_render(const Settings& s, int count, bool planted) {
  const fs::path out = out_or(s, "corpus");
  const auto seed = static_cast<std::uint64_t>(s.get_int("seed"));
  if (planted) {
    const auto truth = glotran::synth::write_planted_corpus(out, {count, seed});
    std::cout << "planted corpus: total=" << truth.total << " kept=" << truth.kept
              << " dropped_regions=" << truth.dropped_regions << '\n';
  } else {
    glotran::synth::write_translation_corpus(out, count, seed);
    std::cout << "rendered " << count << " images into " << out.string() << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"glotran: global-local text-image translation toolkit"};
  app.require_subcommand(1);

  std::deque<CommonFlags> flag_sets;
  std::map<CLI::App*, CommonFlags*> flags_of;
  auto attach = [&](CLI::App* sub) {
    flags_of[sub] = &flag_sets.emplace_back();
    flags_of[sub]->attach(sub);
  };
  std::vector<std::string> inputs;
  bool allow_failed = false;
  auto* translate = app.add_subcommand("translate", "translate images slice by slice");
  attach(translate);
  translate->add_option("inputs", inputs, "image files or directories")->required();
  translate->add_flag("--allow-failed", allow_failed, "exit 0 even when slices failed");

  auto* curate = app.add_subcommand("curate", "curate a global-local dataset from rendered samples");
  attach(curate);
  std::string curate_input;
  curate->add_option("input", curate_input, "directory of images with sidecars")->required();

  auto* evaluate = app.add_subcommand("evaluate", "corpus BLEU of hypotheses against references");
  attach(evaluate);
  std::string hyp, ref, results, corpus, metric;
  evaluate->add_option("--hyp", hyp, "hypothesis file, one segment per line");
  evaluate->add_option("--ref", ref, "reference file, one segment per line");
  evaluate->add_option("--results", results, "translate output (JSONL)");
  evaluate->add_option("--corpus", corpus, "directory of reference sidecars for --results");
  evaluate->add_option("--metric", metric, "extra metric served at metric_url");

  auto* train_ref = app.add_subcommand("train-ref", "train the reference model on a toy set");
  attach(train_ref);

  auto* bench = app.add_subcommand("bench", "Token^V, first-token latency and throughput");
  attach(bench);
  bench->add_option("inputs", inputs, "image files or directories")->required();

  auto* sweep = app.add_subcommand("sweep", "replay x global-resolution grid");
  attach(sweep);
  std::string replays = "1,2,3,4,5,6,7,8";
  std::string resolutions = "224,448,896,1792";
  int sweep_count = 8;
  sweep->add_option("inputs", inputs, "rendered corpus (default: render one)");
  sweep->add_option("--replays", replays, "comma-separated replay sizes");
  sweep->add_option("--resolutions", resolutions, "comma-separated global resolutions");
  sweep->add_option("--count", sweep_count, "images to render when no input is given");

  auto* render = app.add_subcommand("render", "render a synthetic corpus with ground truth");
  attach(render);
  int render_count = 50;
  bool planted = false;
  render->add_option("--count", render_count, "number of images");
  render->add_flag("--planted", planted, "planted-defect curation corpus");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    const Settings s = flags_of.at(active)->resolve();
    if (active == translate) return cmd_translate(s, inputs, allow_failed);
    if (active == curate) return cmd_curate(s, curate_input);
    if (active == evaluate) return cmd_evaluate(s, hyp, ref, results, corpus, metric);
    if (active == train_ref) return cmd_train_ref(s);
    if (active == bench) return cmd_bench(s, inputs);
    if (active == sweep) return cmd_sweep(s, inputs, replays, resolutions, sweep_count);
    if (active == render) return cmd_render(s, render_count, planted);
  } catch (const UsageError& e) {
    std::cerr << "glotran: " << e.what() << "\n\n" << active->help();
    return kConfigError;
  } catch (const ConfigError& e) {
    std::cerr << "glotran: config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "glotran: " << e.what() << '\n';
    return kPipelineError;
  }
  return kPipelineError;
}
