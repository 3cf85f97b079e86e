#include "glotran/refmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "glotran/autodiff.hpp"

namespace glotran::refmodel {

namespace ad = glotran::autodiff;
using ad::Tape;
using ad::Var;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": " + v);
  }
}

}  // namespace

void RefModelConfig::validate() const {
  if (d_v < 1 || d_t < 1 || patch < 1 || enc_layers < 0 || dec_layers < 1 || heads < 1 ||
      mlp_ratio < 1 || max_positions < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_v % heads != 0 || d_t % heads != 0) throw ConfigError("d_v and d_t must divide by heads");
  if (buckets < 1) throw ConfigError("proximity buckets K must be >= 1");
  if (vocab <= kFirstCharToken) throw ConfigError("vocab must exceed the special tokens");
  if (replay < 0) throw ConfigError("replay must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  for (int l : cross_layers) {
    if (l < 0 || l >= dec_layers) {
      throw ConfigError("cross-attention layer " + std::to_string(l) + " outside decoder depth");
    }
  }
}

bool RefModelConfig::is_cross_layer(int layer) const {
  return std::find(cross_layers.begin(), cross_layers.end(), layer) != cross_layers.end();
}

RefModelConfig parse_config(const std::string& text) {
  RefModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key == "d_v") cfg.d_v = parse_int(key, value);
    else if (key == "d_t") cfg.d_t = parse_int(key, value);
    else if (key == "patch") cfg.patch = parse_int(key, value);
    else if (key == "enc_layers") cfg.enc_layers = parse_int(key, value);
    else if (key == "dec_layers") cfg.dec_layers = parse_int(key, value);
    else if (key == "heads") cfg.heads = parse_int(key, value);
    else if (key == "vocab") cfg.vocab = parse_int(key, value);
    else if (key == "buckets") cfg.buckets = parse_int(key, value);
    else if (key == "replay") cfg.replay = parse_int(key, value);
    else if (key == "max_positions") cfg.max_positions = parse_int(key, value);
    else if (key == "mlp_ratio") cfg.mlp_ratio = parse_int(key, value);
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "lr") cfg.lr = std::stod(value);
    else if (key == "local_keys") cfg.local_keys = value == "true" || value == "1";
    else if (key == "cross_layers") {
      cfg.cross_layers.clear();
      std::istringstream items(value);
      std::string item;
      while (std::getline(items, item, ',')) {
        item = trim(item);
        if (!item.empty()) cfg.cross_layers.push_back(parse_int(key, item));
      }
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }
  cfg.validate();
  return cfg;
}

RefModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const RefModelConfig& cfg) {
  std::ostringstream out;
  out << "d_v=" << cfg.d_v << "\nd_t=" << cfg.d_t << "\npatch=" << cfg.patch
      << "\nenc_layers=" << cfg.enc_layers << "\ndec_layers=" << cfg.dec_layers << "\ncross_layers=";
  for (std::size_t i = 0; i < cfg.cross_layers.size(); ++i) out << (i ? "," : "") << cfg.cross_layers[i];
  out << "\nheads=" << cfg.heads << "\nvocab=" << cfg.vocab << "\nbuckets=" << cfg.buckets
      << "\nreplay=" << cfg.replay << "\nseed=" << cfg.seed << "\nmax_positions=" << cfg.max_positions
      << "\nmlp_ratio=" << cfg.mlp_ratio << "\nlocal_keys=" << (cfg.local_keys ? "true" : "false");
  out.precision(17);
  out << "\nlr=" << cfg.lr << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Parameters

void Parameters::add(const std::string& name, Matrix value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_[name] = names_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
}

Matrix& Parameters::operator[](const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter " + name);
  return values_[it->second];
}

const Matrix& Parameters::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter " + name);
  return values_[it->second];
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

bool Parameters::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](const Matrix& m) { return m.allFinite(); });
}

Parameters Parameters::zeros_like() const {
  Parameters out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    out.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
  }
  return out;
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Matrix uniform(int rows, int cols, double limit) {
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng_);
    }
    return m;
  }
  Matrix weight(int fan_in, int fan_out) { return uniform(fan_in, fan_out, 1.0 / std::sqrt(fan_in)); }

 private:
  std::mt19937_64 rng_;
};

void add_block(Parameters& p, Initializer& init, const std::string& prefix, int d, int mlp_ratio) {
  p.add(prefix + ".ln1.g", Matrix::Ones(1, d));
  p.add(prefix + ".ln1.b", Matrix::Zero(1, d));
  for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"}) p.add(prefix + w, init.weight(d, d));
  p.add(prefix + ".ln2.g", Matrix::Ones(1, d));
  p.add(prefix + ".ln2.b", Matrix::Zero(1, d));
  p.add(prefix + ".mlp.w1", init.weight(d, mlp_ratio * d));
  p.add(prefix + ".mlp.b1", Matrix::Zero(1, mlp_ratio * d));
  p.add(prefix + ".mlp.w2", init.weight(mlp_ratio * d, d));
  p.add(prefix + ".mlp.b2", Matrix::Zero(1, d));
}

}  // namespace

Parameters init_parameters(const RefModelConfig& cfg) {
  cfg.validate();
  Initializer init(cfg.seed);
  Parameters p;
  const int patch_dim = 3 * cfg.patch * cfg.patch;
  p.add("patch_embed.w", init.weight(patch_dim, cfg.d_v));
  p.add("patch_embed.b", Matrix::Zero(1, cfg.d_v));
  for (int l = 0; l < cfg.enc_layers; ++l) add_block(p, init, "enc." + std::to_string(l), cfg.d_v, cfg.mlp_ratio);
  p.add("enc.ln_f.g", Matrix::Ones(1, cfg.d_v));
  p.add("enc.ln_f.b", Matrix::Zero(1, cfg.d_v));
  p.add("proj.w", init.weight(cfg.d_v, cfg.d_t));
  p.add("proj.b", Matrix::Zero(1, cfg.d_t));
  const double emb = 1.0 / std::sqrt(cfg.d_t);
  p.add("id.global", init.uniform(1, cfg.d_t, emb));
  p.add("id.local", init.uniform(1, cfg.d_t, emb));
  p.add("tok_embed", init.uniform(cfg.vocab, cfg.d_t, emb));
  p.add("pos_embed", init.uniform(cfg.max_positions, cfg.d_t, emb));
  for (int l = 0; l < cfg.dec_layers; ++l) {
    const auto prefix = "dec." + std::to_string(l);
    add_block(p, init, prefix, cfg.d_t, cfg.mlp_ratio);
    if (cfg.is_cross_layer(l)) {
      p.add(prefix + ".cross.ln_q.g", Matrix::Ones(1, cfg.d_t));
      p.add(prefix + ".cross.ln_q.b", Matrix::Zero(1, cfg.d_t));
      p.add(prefix + ".cross.ln_kv.g", Matrix::Ones(1, cfg.d_t));
      p.add(prefix + ".cross.ln_kv.b", Matrix::Zero(1, cfg.d_t));
      for (const char* w : {".cross.wq", ".cross.wk", ".cross.wv", ".cross.wo"}) {
        p.add(prefix + w, init.weight(cfg.d_t, cfg.d_t));
      }
    }
  }
  p.add("bias_table", init.uniform(2, cfg.buckets, 0.1));
  p.add("ln_f.g", Matrix::Ones(1, cfg.d_t));
  p.add("ln_f.b", Matrix::Zero(1, cfg.d_t));
  p.add("head.w", init.weight(cfg.d_t, cfg.vocab));
  p.add("head.b", Matrix::Zero(1, cfg.vocab));
  return p;
}

// ---------------------------------------------------------------------------
// Views and geometry

ImageTensor ImageTensor::from_image(const imaging::Image& img) {
  ImageTensor t;
  t.width = img.width();
  t.height = img.height();
  const auto px = img.pixels();
  t.data.resize(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) t.data[i] = px[i] / 255.0;
  return t;
}

Matrix patchify(const ImageTensor& img, int patch) {
  if (patch < 1 || img.width % patch != 0 || img.height % patch != 0 || img.width == 0) {
    throw std::invalid_argument("image " + std::to_string(img.width) + "x" +
                                std::to_string(img.height) + " not divisible by patch " +
                                std::to_string(patch));
  }
  const int rows = img.height / patch;
  const int cols = img.width / patch;
  Matrix out(rows * cols, 3 * patch * patch);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      int k = 0;
      for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
          for (int ch = 0; ch < 3; ++ch) out(r * cols + c, k++) = img.at(c * patch + dx, r * patch + dy, ch);
        }
      }
    }
  }
  return out;
}

int proximity_bucket(double ax, double ay, double bx, double by, int buckets) {
  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  const double dx = clamp01(ax) - clamp01(bx);
  const double dy = clamp01(ay) - clamp01(by);
  const double dist = std::sqrt(dx * dx + dy * dy);
  const int b = static_cast<int>(std::floor(buckets * dist / std::sqrt(2.0)));
  return std::clamp(b, 0, buckets - 1);
}

namespace {

struct Point {
  double x;
  double y;
};

Point local_center(int row, int col, const imaging::PatchGrid& grid, const BoundingBox& box, int w, int h) {
  const double u = (col + 0.5) / grid.cols;
  const double v = (row + 0.5) / grid.rows;
  return {(box.x_min + u * box.width()) / w, (box.y_min + v * box.height()) / h};
}

Point global_center(int row, int col, const imaging::PatchGrid& grid) {
  return {(col + 0.5) / grid.cols, (row + 0.5) / grid.rows};
}

}  // namespace

int proximity_bucket(int local_row, int local_col, const imaging::PatchGrid& local_grid,
                     const BoundingBox& slice_box, int global_row, int global_col,
                     const imaging::PatchGrid& global_grid, int source_width, int source_height,
                     int buckets) {
  const auto a = local_center(local_row, local_col, local_grid, slice_box, source_width, source_height);
  const auto b = global_center(global_row, global_col, global_grid);
  return proximity_bucket(a.x, a.y, b.x, b.y, buckets);
}

CrossGeometry build_geometry(const imaging::PatchGrid& local_grid, const BoundingBox& slice_box,
                             const imaging::PatchGrid& global_grid, int source_width,
                             int source_height, int buckets, bool local_keys) {
  const int n_s = local_grid.rows * local_grid.cols;
  const int n_g = global_grid.rows * global_grid.cols;
  const int n_k = n_g + (local_keys ? n_s : 0);
  CrossGeometry g{IndexMatrix::Zero(n_s, n_k), IndexMatrix::Zero(n_s, n_k)};
  for (int i = 0; i < n_s; ++i) {
    const auto q = local_center(i / local_grid.cols, i % local_grid.cols, local_grid, slice_box,
                                source_width, source_height);
    for (int j = 0; j < n_g; ++j) {
      const auto k = global_center(j / global_grid.cols, j % global_grid.cols, global_grid);
      g.bucket(i, j) = proximity_bucket(q.x, q.y, k.x, k.y, buckets);
    }
    if (!local_keys) continue;
    for (int j = 0; j < n_s; ++j) {
      const auto k = local_center(j / local_grid.cols, j % local_grid.cols, local_grid, slice_box,
                                  source_width, source_height);
      g.source(i, n_g + j) = 1;
      g.bucket(i, n_g + j) = proximity_bucket(q.x, q.y, k.x, k.y, buckets);
    }
  }
  return g;
}

namespace {

struct CrossOut {
  Var output;  // without residual
  std::vector<Var> probs;
};

CrossOut cross_core(Tape& t, Var q, Var k, Var v, Var bias, const CrossGeometry& geom, int heads) {
  const int d = static_cast<int>(t.value(q).cols());
  const int dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  const Var b = ad::gather_table(t, bias, geom.source, geom.bucket);
  CrossOut out;
  std::vector<Var> parts;
  for (int h = 0; h < heads; ++h) {
    const Var qh = ad::cols(t, q, h * dh, dh);
    const Var kh = ad::cols(t, k, h * dh, dh);
    const Var vh = ad::cols(t, v, h * dh, dh);
    const Var logits = ad::add(t, ad::scale(t, ad::matmul_nt(t, qh, kh), inv), b);
    const Var p = ad::softmax_rows(t, logits);
    out.probs.push_back(p);
    parts.push_back(ad::matmul(t, p, vh));
  }
  out.output = heads == 1 ? parts.front() : ad::hconcat(t, parts);
  return out;
}

class Graph {
 public:
  Graph(Tape& tape, const Parameters& theta, bool track) : t_(tape), theta_(theta), track_(track) {}

  Var p(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Var v = t_.leaf(theta_[name], track_);
    vars_.emplace(name, v);
    return v;
  }

  void collect(Parameters& grad, double weight) const {
    for (const auto& [name, v] : vars_) grad[name] += weight * t_.grad(v);
  }

  Tape& tape() { return t_; }

 private:
  Tape& t_;
  const Parameters& theta_;
  bool track_;
  std::map<std::string, Var> vars_;
};

Var self_attention_block(Graph& g, Var x, const std::string& prefix, int heads, bool causal) {
  Tape& t = g.tape();
  const Var h = ad::layer_norm(t, x, g.p(prefix + ".ln1.g"), g.p(prefix + ".ln1.b"));
  const Var q = ad::matmul(t, h, g.p(prefix + ".attn.wq"));
  const Var k = ad::matmul(t, h, g.p(prefix + ".attn.wk"));
  const Var v = ad::matmul(t, h, g.p(prefix + ".attn.wv"));
  const int d = static_cast<int>(t.value(x).cols());
  const int dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> parts;
  for (int hd = 0; hd < heads; ++hd) {
    const Var s = ad::scale(t, ad::matmul_nt(t, ad::cols(t, q, hd * dh, dh), ad::cols(t, k, hd * dh, dh)), inv);
    const Var pr = ad::softmax_rows(t, s, causal, 0);
    parts.push_back(ad::matmul(t, pr, ad::cols(t, v, hd * dh, dh)));
  }
  const Var o = heads == 1 ? parts.front() : ad::hconcat(t, parts);
  return ad::add(t, x, ad::matmul(t, o, g.p(prefix + ".attn.wo")));
}

Var mlp_block(Graph& g, Var x, const std::string& prefix) {
  Tape& t = g.tape();
  const Var h = ad::layer_norm(t, x, g.p(prefix + ".ln2.g"), g.p(prefix + ".ln2.b"));
  const Var u = ad::gelu(t, ad::add_row(t, ad::matmul(t, h, g.p(prefix + ".mlp.w1")), g.p(prefix + ".mlp.b1")));
  return ad::add(t, x, ad::add_row(t, ad::matmul(t, u, g.p(prefix + ".mlp.w2")), g.p(prefix + ".mlp.b2")));
}

Var encode(Graph& g, const ImageTensor& img, const RefModelConfig& cfg) {
  Tape& t = g.tape();
  const Var patches = t.leaf(patchify(img, cfg.patch), false);
  Var x = ad::add_row(t, ad::matmul(t, patches, g.p("patch_embed.w")), g.p("patch_embed.b"));
  for (int l = 0; l < cfg.enc_layers; ++l) {
    const auto prefix = "enc." + std::to_string(l);
    x = self_attention_block(g, x, prefix, cfg.heads, false);
    x = mlp_block(g, x, prefix);
  }
  return ad::layer_norm(t, x, g.p("enc.ln_f.g"), g.p("enc.ln_f.b"));
}

Var project_var(Graph& g, Var raw) {
  return ad::add_row(g.tape(), ad::matmul(g.tape(), raw, g.p("proj.w")), g.p("proj.b"));
}

imaging::PatchGrid grid_of(const ImageTensor& img, int patch) {
  return imaging::patch_grid(img.width, img.height, patch);
}

/// Logits for every position of `input`, given projected global features.
Var decoder_logits(Graph& g, const ToyRecord& record, const DecoderInput& input, Var v_global,
                   const RefModelConfig& cfg) {
  Tape& t = g.tape();
  const auto& slice = record.slices.at(input.slice);
  const Var v_local = project_var(g, encode(g, slice.image, cfg));
  const int n_g = input.n_global;
  const int n_s = input.n_local;
  const int n_text = static_cast<int>(input.text.size());
  const int L = input.length();
  if (L > cfg.max_positions) {
    throw std::invalid_argument("sequence length " + std::to_string(L) + " exceeds max_positions");
  }

  std::vector<Var> seq{g.p("id.global"), v_global, g.p("id.local"), v_local};
  if (n_text > 0) seq.push_back(ad::gather_rows(t, g.p("tok_embed"), input.text));
  std::vector<int> positions(static_cast<std::size_t>(L));
  std::iota(positions.begin(), positions.end(), 0);
  Var x = ad::add(t, ad::vconcat(t, seq), ad::gather_rows(t, g.p("pos_embed"), positions));

  std::optional<CrossGeometry> geom;
  for (int l = 0; l < cfg.dec_layers; ++l) {
    const auto prefix = "dec." + std::to_string(l);
    x = self_attention_block(g, x, prefix, cfg.heads, true);
    if (cfg.is_cross_layer(l)) {
      if (!geom) {
        geom = build_geometry(grid_of(slice.image, cfg.patch), slice.box, grid_of(record.global, cfg.patch),
                              record.source_width, record.source_height, cfg.buckets, cfg.local_keys);
      }
      const Var head = ad::rows(t, x, 0, 1 + n_g);
      const Var h_local = ad::rows(t, x, 2 + n_g, n_s);
      const Var tail_lead = ad::rows(t, x, 1 + n_g, 1);
      const Var hq = ad::layer_norm(t, h_local, g.p(prefix + ".cross.ln_q.g"), g.p(prefix + ".cross.ln_q.b"));
      Var kv_src = ad::rows(t, x, 1, n_g);
      if (cfg.local_keys) kv_src = ad::vconcat(t, {kv_src, h_local});
      const Var hkv = ad::layer_norm(t, kv_src, g.p(prefix + ".cross.ln_kv.g"), g.p(prefix + ".cross.ln_kv.b"));
      const auto core = cross_core(t, ad::matmul(t, hq, g.p(prefix + ".cross.wq")),
                                   ad::matmul(t, hkv, g.p(prefix + ".cross.wk")),
                                   ad::matmul(t, hkv, g.p(prefix + ".cross.wv")), g.p("bias_table"),
                                   *geom, cfg.heads);
      const Var updated = ad::add(t, h_local, ad::matmul(t, core.output, g.p(prefix + ".cross.wo")));
      std::vector<Var> parts{head, tail_lead, updated};
      if (n_text > 0) parts.push_back(ad::rows(t, x, 2 + n_g + n_s, n_text));
      x = ad::vconcat(t, parts);
    }
    x = mlp_block(g, x, prefix);
  }
  x = ad::layer_norm(t, x, g.p("ln_f.g"), g.p("ln_f.b"));
  return ad::add_row(t, ad::matmul(t, x, g.p("head.w")), g.p("head.b"));
}

}  // namespace

VisualFeatures encode_view(const ImageTensor& img, const RefModelConfig& cfg, const Parameters& theta,
                           ViewSource source, std::optional<BoundingBox> slice_box) {
  if (source == ViewSource::kLocal && !slice_box) {
    throw std::invalid_argument("local view requires a slice box");
  }
  Tape t;
  Graph g(t, theta, false);
  VisualFeatures f;
  f.raw = t.value(encode(g, img, cfg));
  f.grid = grid_of(img, cfg.patch);
  f.source = source;
  f.slice_box = slice_box;
  return f;
}

Matrix project(const Matrix& raw, const Parameters& theta) {
  const Matrix& w = theta["proj.w"];
  if (raw.cols() != w.rows()) throw std::invalid_argument("projector input width mismatch");
  Matrix out = raw * w;
  out.rowwise() += theta["proj.b"].row(0);
  return out;
}

CrossAttention cross_attend(const Matrix& local, const Matrix& global, const Matrix& bias,
                            const CrossGeometry& geometry, int heads) {
  if (local.cols() != global.cols()) throw std::invalid_argument("cross_attend width mismatch");
  if (heads < 1 || local.cols() % heads != 0) throw std::invalid_argument("width must divide by heads");
  const bool with_local = geometry.source.cols() == global.rows() + local.rows();
  if (!with_local && geometry.source.cols() != global.rows()) {
    throw std::invalid_argument("geometry does not match key count");
  }
  Tape t;
  const Var q = t.leaf(local, false);
  Var kv = t.leaf(global, false);
  if (with_local) kv = ad::vconcat(t, {kv, q});
  const Var b = t.leaf(bias, false);
  const auto core = cross_core(t, q, kv, kv, b, geometry, heads);
  CrossAttention out;
  out.output = local + t.value(core.output);
  for (auto p : core.probs) out.probabilities.push_back(t.value(p));
  return out;
}

// ---------------------------------------------------------------------------
// Data

ToyDataset make_toy_dataset(int records, const RefModelConfig& cfg, std::uint64_t seed, int source_size,
                            int global_size, int slices_per_record) {
  if (slices_per_record < 1 || slices_per_record > 4) throw std::invalid_argument("1..4 slices per record");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> color(0, 255);
  std::uniform_int_distribution<int> token(kFirstCharToken, cfg.vocab - 1);
  std::uniform_int_distribution<int> length(2, 4);
  ToyDataset out;
  const int half = source_size / 2;
  const int block = std::max(1, source_size / 8);
  for (int r = 0; r < records; ++r) {
    imaging::Image img(source_size, source_size);
    for (int by = 0; by < source_size; by += block) {
      for (int bx = 0; bx < source_size; bx += block) {
        const int rgb[3] = {color(rng), color(rng), color(rng)};
        for (int y = by; y < std::min(by + block, source_size); ++y) {
          for (int x = bx; x < std::min(bx + block, source_size); ++x) {
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>(rgb[c]);
          }
        }
      }
    }
    ToyRecord rec;
    rec.source_width = source_size;
    rec.source_height = source_size;
    rec.global = ImageTensor::from_image(imaging::downsample_global(img, global_size).image);
    std::vector<int> quadrants{0, 1, 2, 3};
    std::shuffle(quadrants.begin(), quadrants.end(), rng);
    quadrants.resize(static_cast<std::size_t>(slices_per_record));
    std::sort(quadrants.begin(), quadrants.end());
    for (int q : quadrants) {
      const BoundingBox box{(q % 2) * half, (q / 2) * half, (q % 2) * half + half, (q / 2) * half + half};
      SliceSample s;
      s.box = box;
      s.image = ImageTensor::from_image(imaging::crop_region(img, box, global_size).image);
      const int n = length(rng);
      for (int k = 0; k < n; ++k) s.target.push_back(token(rng));
      rec.slices.push_back(std::move(s));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<bool> DecoderInput::full_mask() const {
  std::vector<bool> m(static_cast<std::size_t>(text_offset()), false);
  m.insert(m.end(), mask.begin(), mask.end());
  return m;
}

DecoderInput make_decoder_input(const ToyRecord& record, std::size_t slice,
                                const std::vector<std::vector<int>>& prior, ReplaySource source,
                                const RefModelConfig& cfg, const std::vector<int>& current,
                                bool with_eos_target) {
  const auto& s = record.slices.at(slice);
  DecoderInput in;
  in.slice = slice;
  in.replay_source = source;
  const auto gg = grid_of(record.global, cfg.patch);
  const auto lg = grid_of(s.image, cfg.patch);
  in.n_global = gg.rows * gg.cols;
  in.n_local = lg.rows * lg.cols;
  const std::size_t keep = std::min(prior.size(), static_cast<std::size_t>(cfg.replay));
  in.replay.assign(prior.end() - static_cast<std::ptrdiff_t>(keep), prior.end());
  for (const auto& entry : in.replay) {
    for (int tok : entry) {
      in.text.push_back(tok);
      in.targets.push_back(kPad);
      in.mask.push_back(false);
    }
    in.text.push_back(kSep);
    in.targets.push_back(kPad);
    in.mask.push_back(false);
  }
  in.text.push_back(kBos);
  for (int tok : current) in.text.push_back(tok);
  for (std::size_t k = 0; k <= current.size(); ++k) {
    const bool last = k == current.size();
    in.targets.push_back(last ? (with_eos_target ? kEos : kPad) : current[k]);
    in.mask.push_back(!last || with_eos_target);
  }
  return in;
}

std::vector<DecoderInput> teacher_forced_inputs(const ToyRecord& record, const RefModelConfig& cfg) {
  std::vector<DecoderInput> out;
  std::vector<std::vector<int>> prior;
  for (std::size_t i = 0; i < record.slices.size(); ++i) {
    out.push_back(make_decoder_input(record, i, prior, ReplaySource::kGroundTruth, cfg,
                                     record.slices[i].target));
    prior.push_back(record.slices[i].target);
  }
  return out;
}

Matrix decode_step(const ToyRecord& record, const DecoderInput& input, const RefModelConfig& cfg,
                   const Parameters& theta) {
  Tape t;
  Graph g(t, theta, false);
  const Var vg = project_var(g, encode(g, record.global, cfg));
  return t.value(decoder_logits(g, record, input, vg, cfg));
}

Generation generate(const ToyRecord& record, const RefModelConfig& cfg, const Parameters& theta,
                    int max_tokens) {
  Generation gen;
  for (std::size_t i = 0; i < record.slices.size(); ++i) {
    std::vector<int> current;
    DecoderInput input;
    while (true) {
      input = make_decoder_input(record, i, gen.outputs, ReplaySource::kModel, cfg, current, false);
      if (static_cast<int>(current.size()) >= max_tokens) break;
      const Matrix logits = decode_step(record, input, cfg, theta);
      Eigen::Index best = 0;
      logits.row(logits.rows() - 1).maxCoeff(&best);
      if (best == kEos) break;
      current.push_back(static_cast<int>(best));
    }
    gen.outputs.push_back(current);
    gen.inputs.push_back(std::move(input));
  }
  return gen;
}

// ---------------------------------------------------------------------------
// Objective

namespace {

LossValue run_batch(const ToyDataset& batch, const RefModelConfig& cfg, const Parameters& theta,
                    Parameters* grad, const LossOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  if (!opts.teacher_forcing) {
    throw std::invalid_argument("the training objective requires teacher forcing");
  }
  LossValue total;
  double token_loss = 0.0;
  const double inv_records = 1.0 / static_cast<double>(batch.size());
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto& record = batch[r];
    Tape t;
    Graph g(t, theta, grad != nullptr);
    const Var vg = project_var(g, encode(g, record.global, cfg));
    std::vector<Var> terms;
    for (auto input : teacher_forced_inputs(record, cfg)) {
      input.record = r;
      if (opts.zero_mask) std::fill(input.mask.begin(), input.mask.end(), false);
      const auto n_masked = std::count(input.mask.begin(), input.mask.end(), true);
      if (n_masked == 0) {
        if (!opts.allow_empty_mask && !opts.zero_mask) throw EmptyMaskError("slice has an empty loss mask");
        continue;
      }
      const Var logits = decoder_logits(g, record, input, vg, cfg);
      std::vector<int> targets(static_cast<std::size_t>(input.text_offset()), kPad);
      targets.insert(targets.end(), input.targets.begin(), input.targets.end());
      const Var ce = ad::cross_entropy_sum(t, logits, targets, input.full_mask());
      token_loss += t.value(ce)(0, 0);
      total.masked_tokens += n_masked;
      terms.push_back(ad::scale(t, ce, 1.0 / static_cast<double>(n_masked)));
    }
    if (terms.empty()) continue;
    Var sum = terms.front();
    for (std::size_t k = 1; k < terms.size(); ++k) sum = ad::add(t, sum, terms[k]);
    total.objective += inv_records * t.value(sum)(0, 0);
    if (grad) {
      t.backward(sum);
      g.collect(*grad, inv_records);
    }
  }
  if (total.masked_tokens == 0 && !opts.zero_mask && !opts.allow_empty_mask) {
    throw EmptyMaskError("batch has no masked target tokens");
  }
  total.per_token = total.masked_tokens ? token_loss / static_cast<double>(total.masked_tokens) : 0.0;
  return total;
}

}  // namespace

LossValue loss(const ToyDataset& batch, const RefModelConfig& cfg, const Parameters& theta,
               const LossOptions& opts) {
  return run_batch(batch, cfg, theta, nullptr, opts);
}

LossValue loss_and_grad(const ToyDataset& batch, const RefModelConfig& cfg, const Parameters& theta,
                        Parameters& grad, const LossOptions& opts) {
  grad = theta.zeros_like();
  return run_batch(batch, cfg, theta, &grad, opts);
}

GradCheckReport grad_check(const RefModelConfig& cfg, const Parameters& theta, const ToyDataset& probe,
                           const GradCheckOptions& opts) {
  GradCheckReport report;
  loss_and_grad(probe, cfg, theta, report.analytic, opts.loss);
  Parameters work = theta;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t gi = 0; gi < theta.names().size(); ++gi) {
    const auto& name = theta.names()[gi];
    const Matrix& analytic = report.analytic.values()[gi];
    if (!analytic.allFinite()) throw std::runtime_error("non-finite analytic gradient in " + name);
    Matrix& w = work.values()[gi];
    std::vector<Eigen::Index> entries(static_cast<std::size_t>(w.size()));
    std::iota(entries.begin(), entries.end(), 0);
    if (entries.size() > opts.max_entries_per_group) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(opts.max_entries_per_group);
    }
    GroupError ge{name, 0.0, entries.size()};
    for (auto idx : entries) {
      double& slot = w.data()[idx];
      const double saved = slot;
      slot = saved + opts.step;
      const double plus = loss(probe, cfg, work, opts.loss).objective;
      slot = saved - opts.step;
      const double minus = loss(probe, cfg, work, opts.loss).objective;
      slot = saved;
      const double numeric = (plus - minus) / (2.0 * opts.step);
      if (!std::isfinite(numeric)) throw std::runtime_error("non-finite numeric gradient in " + name);
      const double a = analytic.data()[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.denominator_floor});
      ge.max_rel_error = std::max(ge.max_rel_error, std::abs(a - numeric) / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, ge.max_rel_error);
    report.groups.push_back(std::move(ge));
  }
  return report;
}

TrainResult train(const ToyDataset& dataset, const RefModelConfig& cfg, long long steps,
                  std::optional<Parameters> init) {
  cfg.validate();
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  TrainResult result;
  auto& st = result.state;
  st.theta = init ? std::move(*init) : init_parameters(cfg);
  st.adam.m = st.theta.zeros_like();
  st.adam.v = st.theta.zeros_like();
  Parameters grad;
  for (long long step = 0; step < steps; ++step) {
    const auto lv = loss_and_grad(dataset, cfg, st.theta, grad);
    if (!std::isfinite(lv.objective) || !grad.all_finite()) {
      throw DivergenceError(step, "non-finite loss at step " + std::to_string(step));
    }
    result.curve.push_back({step, lv.objective, lv.per_token});
    ++st.adam.step;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(st.adam.step));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(st.adam.step));
    for (std::size_t i = 0; i < st.theta.values().size(); ++i) {
      const Matrix& g = grad.values()[i];
      Matrix& m = st.adam.m.values()[i];
      Matrix& v = st.adam.v.values()[i];
      m = kBeta1 * m + (1.0 - kBeta1) * g;
      v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseProduct(g);
      st.theta.values()[i].array() -=
          cfg.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
    }
  }
  const auto final_loss = loss(dataset, cfg, st.theta);
  if (!std::isfinite(final_loss.objective)) {
    throw DivergenceError(steps, "non-finite loss after training");
  }
  result.curve.push_back({steps, final_loss.objective, final_loss.per_token});
  return result;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr char kMagic[8] = {'G', 'L', 'T', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Parameters& theta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(theta.names().size()));
  for (std::size_t i = 0; i < theta.names().size(); ++i) {
    const auto& name = theta.names()[i];
    const Matrix& m = theta.values()[i];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) put<double>(out, m(r, c));
    }
  }
}

Parameters load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("not a checkpoint");
  if (const auto v = get<std::uint32_t>(in); v != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(v));
  }
  const auto groups = get<std::uint32_t>(in);
  Parameters p;
  for (std::uint32_t g = 0; g < groups; ++g) {
    std::string name(get<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rows = get<std::uint32_t>(in);
    const auto cols = get<std::uint32_t>(in);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = get<double>(in);
    }
    p.add(name, std::move(m));
  }
  return p;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "step,loss,per_token\n";
  for (const auto& p : curve) out << p.step << ',' << p.objective << ',' << p.per_token << '\n';
}

}  // namespace glotran::refmodel
