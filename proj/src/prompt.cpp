#include "glotran/prompt.hpp"

#include <fstream>
#include <sstream>

namespace glotran::prompt {

namespace {

constexpr const char* kHeadGlobal = "[Global Understanding Instruction]";
constexpr const char* kHeadLocal = "[Local Focus Instruction]";
constexpr const char* kHeadConsistency = "[Global-Local Consistency Rule]";
constexpr const char* kHeadReplay = "[Previous Slice Translations]";
constexpr const char* kHeadTranslation = "[Translation Instruction]";

const char* file_name(TemplatePart part) {
  switch (part) {
    case TemplatePart::kGlobal: return "global.txt";
    case TemplatePart::kLocal: return "local.txt";
    case TemplatePart::kConsistency: return "consistency.txt";
    case TemplatePart::kTranslation: return "translation.txt";
    case TemplatePart::kReplayClause: return "replay_clause.txt";
  }
  return "";
}

std::string trim_trailing(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

std::string escape_line(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c == '\n') {
      out += "\\n";
    } else if (c == '\r') {
      out += "\\r";
    } else {
      out += c;
    }
  }
  return out;
}

std::string unescape_line(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      const char n = s[++i];
      out += n == 'n' ? '\n' : n == 'r' ? '\r' : n;
    } else {
      out += s[i];
    }
  }
  return out;
}

}  // namespace

ReplayWindow::ReplayWindow(int capacity) : capacity_(capacity) {
  if (capacity < 0) throw PromptError("replay capacity must be >= 0");
}

void ReplayWindow::push(int slice_index, std::string translation) {
  if (any_pushed_ && slice_index <= last_index_) {
    throw PromptError("replay push out of order: " + std::to_string(slice_index) +
                      " after " + std::to_string(last_index_));
  }
  any_pushed_ = true;
  last_index_ = slice_index;
  if (capacity_ == 0) return;
  entries_.push_back({slice_index, std::move(translation)});
  while (entries_.size() > static_cast<std::size_t>(capacity_)) entries_.pop_front();
}

std::string language_name(const std::string& code) {
  static const std::map<std::string, std::string> kNames = {
      {"en", "English"}, {"zh", "Chinese"}, {"ja", "Japanese"}, {"jp", "Japanese"},
      {"ko", "Korean"},  {"de", "German"},  {"fr", "French"}};
  auto it = kNames.find(code);
  if (it == kNames.end()) throw PromptError("unknown language code: " + code);
  return it->second;
}

TemplateSet TemplateSet::defaults() {
  TemplateSet t;
  t.parts_[TemplatePart::kGlobal] =
      "The first image is a low-resolution global view of the entire {SRC_LANG} source image. "
      "Use it to understand the overall scene, its layout and its topic before translating any "
      "region.";
  t.parts_[TemplatePart::kLocal] =
      "The second image is a high-resolution local slice cropped from the same source image. "
      "Concentrate on the text inside this slice while keeping its position in the global layout "
      "in mind.";
  t.parts_[TemplatePart::kConsistency] =
      "Before answering, check that the translation of this slice agrees with the meaning of the "
      "whole scene shown in the global view. Keep names, terminology and tone consistent across "
      "slices.";
  t.parts_[TemplatePart::kTranslation] =
      "Translate the {SRC_LANG} text in this local slice into {TGT_LANG}, using the global image "
      "for contextual grounding. Output only the {TGT_LANG} translation.";
  t.parts_[TemplatePart::kReplayClause] =
      "Keep wording and terminology in line with the translations of the previous slices:{REPLAY}";
  return t;
}

TemplateSet TemplateSet::load(const std::filesystem::path& dir, const std::string& src_lang,
                              const std::string& tgt_lang) {
  TemplateSet t = defaults();
  std::filesystem::path base = dir / (src_lang + "-" + tgt_lang);
  if (!std::filesystem::is_directory(base)) base = dir / "default";
  if (!std::filesystem::is_directory(base)) {
    throw PromptError("no template directory for " + src_lang + "-" + tgt_lang + " under " +
                      dir.string());
  }
  for (auto part : {TemplatePart::kGlobal, TemplatePart::kLocal, TemplatePart::kConsistency,
                    TemplatePart::kTranslation, TemplatePart::kReplayClause}) {
    const auto path = base / file_name(part);
    if (!std::filesystem::exists(path)) continue;
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    t.set(part, trim_trailing(ss.str()));
  }
  return t;
}

void TemplateSet::set(TemplatePart part, std::string text) {
  if (part != TemplatePart::kReplayClause && text.empty()) {
    throw PromptError(std::string("empty template: ") + file_name(part));
  }
  parts_[part] = std::move(text);
}

std::string instantiate(const std::string& tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i + 1);
      if (close != std::string::npos) {
        auto it = values.find(tmpl.substr(i + 1, close - i - 1));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

PromptBundle build_prompt(int slice_number, const ReplayWindow& window, const LanguagePair& langs,
                          const TemplateSet& templates) {
  if (slice_number < 1) throw PromptError("slice numbers start at 1");
  std::map<std::string, std::string> values{{"SRC_LANG", language_name(langs.src)},
                                            {"TGT_LANG", language_name(langs.tgt)}};
  PromptBundle b;
  b.src_lang = langs.src;
  b.tgt_lang = langs.tgt;
  for (const auto& e : window.entries()) b.replay_block.push_back(e.translation);

  b.global_instruction = instantiate(templates.get(TemplatePart::kGlobal), values);
  b.local_instruction = instantiate(templates.get(TemplatePart::kLocal), values);
  b.consistency_rule = instantiate(templates.get(TemplatePart::kConsistency), values);
  b.translation_instruction = instantiate(templates.get(TemplatePart::kTranslation), values);
  if (slice_number > 1 && !b.replay_block.empty()) {
    std::string replay;
    for (const auto& t : b.replay_block) replay += "{" + t + "}";
    values["REPLAY"] = replay;
    b.translation_instruction += " " + instantiate(templates.get(TemplatePart::kReplayClause), values);
  }
  return b;
}

std::string render_prompt_text(const PromptBundle& b) {
  std::string out;
  auto paragraph = [&](const char* head, const std::string& body) {
    if (!out.empty()) out += "\n\n";
    out += head;
    out += '\n';
    out += body;
  };
  paragraph(kHeadGlobal, b.global_instruction);
  paragraph(kHeadLocal, b.local_instruction);
  paragraph(kHeadConsistency, b.consistency_rule);
  if (!b.replay_block.empty()) {
    std::string body;
    for (std::size_t i = 0; i < b.replay_block.size(); ++i) {
      if (i) body += '\n';
      body += "- " + escape_line(b.replay_block[i]);
    }
    paragraph(kHeadReplay, body);
  }
  paragraph(kHeadTranslation, b.translation_instruction);
  return out;
}

ParsedPrompt parse_prompt_text(const std::string& text) {
  ParsedPrompt p;
  std::istringstream in(text);
  std::string line;
  std::string* target = nullptr;
  bool in_replay = false;
  std::vector<std::string> body;
  auto flush = [&] {
    while (!body.empty() && body.back().empty()) body.pop_back();
    if (in_replay) {
      for (const auto& l : body) {
        if (l.rfind("- ", 0) != 0) throw PromptError("malformed replay line: " + l);
        p.replay_block.push_back(unescape_line(l.substr(2)));
      }
    } else if (target) {
      std::string joined;
      for (std::size_t i = 0; i < body.size(); ++i) joined += (i ? "\n" : "") + body[i];
      *target = joined;
    }
    body.clear();
  };
  while (std::getline(in, line)) {
    std::string* next = nullptr;
    bool replay = false;
    if (line == kHeadGlobal) next = &p.global_instruction;
    else if (line == kHeadLocal) next = &p.local_instruction;
    else if (line == kHeadConsistency) next = &p.consistency_rule;
    else if (line == kHeadTranslation) next = &p.translation_instruction;
    else if (line == kHeadReplay) replay = true;
    if (next || replay) {
      flush();
      target = next;
      in_replay = replay;
      ++p.paragraph_count;
      continue;
    }
    if (!target && !in_replay) throw PromptError("text before first paragraph heading");
    body.push_back(line);
  }
  flush();
  return p;
}

const std::string& MessageSequence::text() const {
  for (const auto& item : items) {
    if (const auto* t = std::get_if<TextSegment>(&item)) return t->text;
  }
  throw PromptError("message sequence has no text segment");
}

MessageSequence render_message_sequence(const PromptBundle& bundle,
                                        std::shared_ptr<const imaging::Image> global_image,
                                        std::shared_ptr<const imaging::Image> slice_image) {
  MessageSequence seq;
  seq.items.emplace_back(IdentifierToken{kGlobalIdentifier});
  seq.items.emplace_back(ImageRef{ViewKind::kGlobal, std::move(global_image)});
  seq.items.emplace_back(IdentifierToken{kLocalIdentifier});
  seq.items.emplace_back(ImageRef{ViewKind::kLocal, std::move(slice_image)});
  seq.items.emplace_back(TextSegment{render_prompt_text(bundle)});
  return seq;
}

bool has_valid_layout(const MessageSequence& seq) {
  int globals = 0;
  int locals = 0;
  for (std::size_t i = 0; i < seq.items.size(); ++i) {
    const auto* id = std::get_if<IdentifierToken>(&seq.items[i]);
    if (!id) continue;
    const bool is_global = id->token == kGlobalIdentifier;
    const bool is_local = id->token == kLocalIdentifier;
    if (!is_global && !is_local) return false;
    if (i + 1 >= seq.items.size()) return false;
    const auto* img = std::get_if<ImageRef>(&seq.items[i + 1]);
    if (!img || img->view != (is_global ? ViewKind::kGlobal : ViewKind::kLocal)) return false;
    (is_global ? globals : locals)++;
  }
  return globals == 1 && locals == 1;
}

}  // namespace glotran::prompt
