#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "glotran/glod.hpp"
#include "glotran/metrics.hpp"
#include "glotran/pipeline.hpp"
#include "glotran/prompt.hpp"
#include "glotran/refmodel.hpp"
#include "glotran/regions.hpp"
#include "glotran/synth.hpp"

namespace py = pybind11;
using namespace glotran;

namespace {

py::object from_json(const nlohmann::ordered_json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

regions::GroupingParams grouping(double alpha, double beta, double gamma, double align_tol) {
  regions::GroupingParams p;
  p.alpha = alpha;
  p.beta = beta;
  p.gamma = gamma;
  p.align_tol = align_tol;
  return p;
}

}  // namespace

PYBIND11_MODULE(_glotran, m) {
  m.doc() = "Global-local text image translation core";

  py::class_<BoundingBox>(m, "BoundingBox")
      .def(py::init<int, int, int, int, double>(), py::arg("x_min"), py::arg("y_min"), py::arg("x_max"),
           py::arg("y_max"), py::arg("confidence") = 1.0)
      .def_readwrite("x_min", &BoundingBox::x_min)
      .def_readwrite("y_min", &BoundingBox::y_min)
      .def_readwrite("x_max", &BoundingBox::x_max)
      .def_readwrite("y_max", &BoundingBox::y_max)
      .def_readwrite("confidence", &BoundingBox::confidence)
      .def("__eq__", [](const BoundingBox& a, const BoundingBox& b) { return a == b; })
      .def("__repr__", [](const BoundingBox& b) {
        return "BoundingBox(" + std::to_string(b.x_min) + ", " + std::to_string(b.y_min) + ", " +
               std::to_string(b.x_max) + ", " + std::to_string(b.y_max) + ")";
      });

  py::class_<regions::SliceGroup>(m, "SliceGroup")
      .def_readonly("members", &regions::SliceGroup::members)
      .def_readonly("union_box", &regions::SliceGroup::union_box)
      .def_readonly("order_index", &regions::SliceGroup::order_index);

  m.def(
      "order_regions",
      [](std::vector<BoundingBox> boxes, int width, int height) {
        return regions::order_regions({std::move(boxes), width, height}).boxes;
      },
      py::arg("boxes"), py::arg("width"), py::arg("height"), "Boxes in reading order.");

  m.def(
      "merge_regions",
      [](std::vector<BoundingBox> boxes, int width, int height, double alpha, double beta, double gamma,
         double align_tol) {
        const auto ordered = regions::order_regions({std::move(boxes), width, height});
        return regions::merge_regions(ordered, grouping(alpha, beta, gamma, align_tol));
      },
      py::arg("boxes"), py::arg("width"), py::arg("height"), py::arg("alpha") = 1.0, py::arg("beta") = 0.5,
      py::arg("gamma") = 1.5, py::arg("align_tol") = -1.0, "Orders the boxes, then merges them into slice groups.");

  m.def(
      "count_visual_tokens",
      [](int global_resolution, const std::vector<regions::SliceGroup>& groups, int slice_cap, int patch) {
        return metrics::count_visual_tokens(global_resolution, groups, slice_cap, patch);
      },
      py::arg("global_resolution"), py::arg("groups") = std::vector<regions::SliceGroup>{},
      py::arg("slice_cap") = 448, py::arg("patch_size") = 16);

  m.def(
      "bleu",
      [](const std::vector<std::string>& hyps, const std::vector<std::string>& refs, const std::string& tgt_lang) {
        metrics::BleuConfig cfg;
        cfg.tokenization = metrics::tokenization_for(tgt_lang);
        return metrics::bleu(hyps, refs, cfg);
      },
      py::arg("hypotheses"), py::arg("references"), py::arg("tgt_lang") = "en", "Corpus BLEU on a 0-100 scale.");

  m.def(
      "build_prompt",
      [](int slice_number, const std::vector<std::string>& prior, int replay, const std::string& src_lang,
         const std::string& tgt_lang) {
        prompt::ReplayWindow window(replay);
        for (std::size_t k = 0; k < prior.size(); ++k) window.push(static_cast<int>(k) + 1, prior[k]);
        const auto b = prompt::build_prompt(slice_number, window, {src_lang, tgt_lang});
        py::dict d;
        d["replay"] = b.replay_block;
        d["translation_instruction"] = b.translation_instruction;
        d["text"] = prompt::render_prompt_text(b);
        return d;
      },
      py::arg("slice_number"), py::arg("prior") = std::vector<std::string>{}, py::arg("replay") = 4,
      py::arg("src_lang") = "en", py::arg("tgt_lang") = "zh",
      "Prompt for a slice given earlier successful translations in order.");

  m.def("fuse_recognition", &glod::fuse_recognition, py::arg("local_text"), py::arg("context_text"));
  m.def("ngram_cosine", &glod::ngram_cosine, py::arg("a"), py::arg("b"));

  m.def(
      "proximity_bucket",
      [](double ax, double ay, double bx, double by, int buckets) {
        return refmodel::proximity_bucket(ax, ay, bx, by, buckets);
      },
      py::arg("ax"), py::arg("ay"), py::arg("bx"), py::arg("by"), py::arg("buckets") = 8);

  m.def(
      "cross_attend",
      [](const refmodel::Matrix& local, const refmodel::Matrix& global, const refmodel::Matrix& bias,
         const refmodel::IndexMatrix& source, const refmodel::IndexMatrix& bucket, int heads) {
        const auto out = refmodel::cross_attend(local, global, bias, {source, bucket}, heads);
        return py::make_tuple(out.output, out.probabilities);
      },
      py::arg("local"), py::arg("global_"), py::arg("bias"), py::arg("source"), py::arg("bucket"),
      py::arg("heads") = 1, "Returns (output with residual, per-head attention probabilities).");

  m.def(
      "render_corpus",
      [](const std::filesystem::path& dir, int count, std::uint64_t seed) {
        return synth::write_translation_corpus(dir, count, seed).size();
      },
      py::arg("dir"), py::arg("count"), py::arg("seed") = 7, "Renders images with ground-truth sidecars.");

  m.def(
      "render_planted_corpus",
      [](const std::filesystem::path& dir, int count, std::uint64_t seed) {
        const auto t = synth::write_planted_corpus(dir, {count, seed});
        py::dict d;
        d["total"] = t.total;
        d["kept"] = t.kept;
        d["dropped_regions"] = t.dropped_regions;
        return d;
      },
      py::arg("dir"), py::arg("count") = 200, py::arg("seed") = 7);

  m.def(
      "translate_corpus",
      [](const std::filesystem::path& dir, const std::filesystem::path& out, const std::string& tgt_lang,
         int replay, int global_resolution, int workers) {
        pipeline::PipelineConfig cfg;
        cfg.tgt_lang = tgt_lang;
        cfg.replay = replay;
        cfg.global_resolution = global_resolution;
        regions::SidecarDetector detector;
        pipeline::LookupBackend backend(dir);
        const auto report = pipeline::run_batch(dir, cfg, detector, backend, out, workers);
        return from_json(pipeline::to_json(report));
      },
      py::arg("dir"), py::arg("out"), py::arg("tgt_lang") = "zh", py::arg("replay") = 4,
      py::arg("global_resolution") = 224, py::arg("workers") = 1,
      "Runs the pipeline over a rendered corpus with the sidecar detector and lookup backend.");

  m.def(
      "curate_corpus",
      [](const std::filesystem::path& dir, const std::filesystem::path& out, int workers) {
        regions::SidecarDetector det_a(0), det_b(2);
        glod::SidecarRecognizer recognizer;
        const auto script = dir / "translator_script.json";
        std::vector<std::unique_ptr<glod::Translator>> owned;
        for (const char* name : {"mt-a", "mt-b"}) {
          if (std::filesystem::exists(script)) {
            owned.push_back(std::make_unique<glod::ScriptedTranslator>(glod::ScriptedTranslator::from_file(name, script)));
          } else {
            owned.push_back(std::make_unique<glod::LexiconTranslator>(name));
          }
        }
        glod::LexiconEmbedder embedder;
        glod::CurateContracts c{&det_a, &det_b, &recognizer, {owned[0].get(), owned[1].get()}, &embedder};
        glod::CurateOptions opt;
        opt.workers = workers;
        const auto r = glod::curate(dir, out, c, opt);
        py::dict d;
        d["total"] = r.total;
        d["kept"] = r.kept;
        d["rejected"] = r.rejected;
        d["dropped_qc"] = r.dropped_qc;
        d["errors"] = r.errors;
        d["dropped_regions"] = r.dropped_regions;
        return d;
      },
      py::arg("dir"), py::arg("out"), py::arg("workers") = 1, "Curates a rendered corpus with the mock contracts.");

  m.def(
      "train_reference",
      [](int records, long long steps, std::uint64_t seed) {
        refmodel::RefModelConfig cfg;
        const auto data = refmodel::make_toy_dataset(records, cfg, seed);
        const auto result = refmodel::train(data, cfg, steps);
        std::vector<double> curve;
        for (const auto& p : result.curve) curve.push_back(p.per_token);
        return curve;
      },
      py::arg("records") = 4, py::arg("steps") = 20, py::arg("seed") = 7,
      "Trains the reference model on a toy set; returns the per-token loss curve.");
}
