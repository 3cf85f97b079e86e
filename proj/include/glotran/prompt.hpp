#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "glotran/imaging.hpp"

namespace glotran::prompt {

class PromptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kDefaultReplay = 4;
inline constexpr int kMaxReplay = 16;

struct ReplayEntry {
  int slice_index = 0;
  std::string translation;
  friend bool operator==(const ReplayEntry&, const ReplayEntry&) = default;
};

/// FIFO of the last `capacity` successful slice translations.
class ReplayWindow {
 public:
  explicit ReplayWindow(int capacity = kDefaultReplay);

  /// Throws PromptError unless `slice_index` is greater than every index seen.
  void push(int slice_index, std::string translation);

  int capacity() const { return capacity_; }
  const std::deque<ReplayEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  int capacity_;
  int last_index_ = -1;
  bool any_pushed_ = false;
  std::deque<ReplayEntry> entries_;
};

/// Display name for a language code ("en" -> "English"); throws for unknown codes.
std::string language_name(const std::string& code);

enum class TemplatePart { kGlobal, kLocal, kConsistency, kTranslation, kReplayClause };

/// Instruction templates with {SRC_LANG}, {TGT_LANG} and {REPLAY} placeholders.
class TemplateSet {
 public:
  /// English templates for every language pair.
  static TemplateSet defaults();
  /// Reads `<dir>/<src>-<tgt>/` if present, else `<dir>/default/`; one file
  /// per part: global.txt, local.txt, consistency.txt, translation.txt,
  /// replay_clause.txt. Missing files fall back to the built-in text.
  static TemplateSet load(const std::filesystem::path& dir, const std::string& src_lang,
                          const std::string& tgt_lang);

  const std::string& get(TemplatePart part) const { return parts_.at(part); }
  void set(TemplatePart part, std::string text);

 private:
  std::map<TemplatePart, std::string> parts_;
};

/// Substitutes the known placeholders in a single left-to-right pass.
std::string instantiate(const std::string& tmpl, const std::map<std::string, std::string>& values);

struct LanguagePair {
  std::string src;
  std::string tgt;
};

struct PromptBundle {
  std::string global_instruction;
  std::string local_instruction;
  std::string consistency_rule;
  std::string translation_instruction;
  std::vector<std::string> replay_block;
  std::string src_lang;
  std::string tgt_lang;
  friend bool operator==(const PromptBundle&, const PromptBundle&) = default;
};

/// Builds the four-part instruction for slice `slice_number` (1-based). The
/// prior-translation clause is appended to the translation instruction only
/// when the window is non-empty.
PromptBundle build_prompt(int slice_number, const ReplayWindow& window, const LanguagePair& langs,
                          const TemplateSet& templates = TemplateSet::defaults());

inline constexpr const char* kGlobalIdentifier = "<image_g>";
inline constexpr const char* kLocalIdentifier = "<image_l>";

enum class ViewKind { kGlobal, kLocal };

struct IdentifierToken {
  std::string token;
};
struct ImageRef {
  ViewKind view;
  std::shared_ptr<const imaging::Image> image;
};
struct TextSegment {
  std::string text;
};
using MessageItem = std::variant<IdentifierToken, ImageRef, TextSegment>;

struct MessageSequence {
  std::vector<MessageItem> items;
  /// The single text segment; throws if absent.
  const std::string& text() const;
};

/// [<image_g>, global image, <image_l>, slice image, instruction text].
MessageSequence render_message_sequence(const PromptBundle& bundle,
                                        std::shared_ptr<const imaging::Image> global_image,
                                        std::shared_ptr<const imaging::Image> slice_image);

/// Instruction text: headed paragraphs separated by blank lines, with the
/// replay paragraph omitted when empty.
std::string render_prompt_text(const PromptBundle& bundle);

struct ParsedPrompt {
  std::string global_instruction;
  std::string local_instruction;
  std::string consistency_rule;
  std::vector<std::string> replay_block;
  std::string translation_instruction;
  int paragraph_count = 0;
};

/// Inverse of render_prompt_text.
ParsedPrompt parse_prompt_text(const std::string& text);

/// Checks the identifier adjacency layout; returns false on any violation.
bool has_valid_layout(const MessageSequence& seq);

}  // namespace glotran::prompt
