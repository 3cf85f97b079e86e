#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "glotran/glod.hpp"
#include "glotran/pipeline.hpp"
#include "glotran/refmodel.hpp"

// Layered key=value settings: defaults < config file < flags < environment.
namespace glotran::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Layer { kDefault = 0, kFile = 1, kFlag = 2, kEnv = 3 };
std::string to_string(Layer layer);

/// Environment variable consulted for `key`: GLOTRAN_ + upper-cased key.
std::string env_name(const std::string& key);

class Settings {
 public:
  using EnvLookup = std::function<const char*(const char*)>;

  Settings();

  /// Every known key with its default value.
  static const std::map<std::string, std::string>& defaults();

  /// key=value lines; '#' starts a comment. Unknown keys are rejected.
  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, Layer layer);
  void set(const std::string& key, const std::string& value, Layer layer);
  void apply_env(const EnvLookup& lookup);

  const std::string& get(const std::string& key) const;
  Layer layer_of(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  pipeline::PipelineConfig pipeline() const;
  glod::QcThresholds qc() const;
  refmodel::RefModelConfig refmodel() const;
  /// Worker count with 0 meaning the logical core count.
  int workers() const;

  /// Parses and validates every typed section; throws ConfigError.
  void validate() const;

  /// Effective settings as key=value text, one per line, sorted by key.
  std::string dump() const;

 private:
  struct Entry {
    std::string value;
    Layer layer = Layer::kDefault;
  };
  std::map<std::string, Entry> entries_;
};

}  // namespace glotran::config
