#include <gtest/gtest.h>

#include <fstream>

#include "glotran/prompt.hpp"
#include "support/temp_dir.hpp"

using namespace glotran;
using namespace glotran::prompt;

namespace {

std::shared_ptr<const imaging::Image> tiny() { return std::make_shared<imaging::Image>(2, 2); }

}  // namespace

TEST(ReplayWindow, PushAndEvict) {
  ReplayWindow w(2);
  w.push(1, "a");
  EXPECT_EQ(w.entries().front(), (ReplayEntry{1, "a"}));
  w.push(2, "b");
  w.push(3, "c");
  ASSERT_EQ(w.size(), 2u);
  EXPECT_EQ(w.entries()[0], (ReplayEntry{2, "b"}));
  EXPECT_EQ(w.entries()[1], (ReplayEntry{3, "c"}));
}

TEST(ReplayWindow, ZeroCapacityStaysEmpty) {
  ReplayWindow w(0);
  w.push(1, "a");
  w.push(2, "b");
  EXPECT_EQ(w.size(), 0u);
}

TEST(ReplayWindow, RejectsOutOfOrderAndNegativeCapacity) {
  ReplayWindow w(3);
  w.push(2, "x");
  EXPECT_THROW(w.push(2, "y"), PromptError);
  EXPECT_THROW(w.push(1, "y"), PromptError);
  EXPECT_THROW(ReplayWindow(-1), PromptError);
}

TEST(BuildPrompt, FirstSliceHasNoReplayClause) {
  ReplayWindow w(4);
  const PromptBundle b = build_prompt(1, w, {"en", "zh"});
  EXPECT_TRUE(b.replay_block.empty());
  EXPECT_EQ(b.translation_instruction.find("previous slices"), std::string::npos);
  EXPECT_NE(b.translation_instruction.find("Chinese"), std::string::npos);
  EXPECT_NE(b.global_instruction.find("English"), std::string::npos);
  EXPECT_FALSE(b.local_instruction.empty());
  EXPECT_FALSE(b.consistency_rule.empty());
}

TEST(BuildPrompt, SecondSliceEmbedsPriorTranslation) {
  ReplayWindow w(4);
  w.push(1, "斯克里布纳五月刊");
  const PromptBundle b = build_prompt(2, w, {"en", "zh"});
  ASSERT_EQ(b.replay_block.size(), 1u);
  EXPECT_NE(b.translation_instruction.find("{斯克里布纳五月刊}"), std::string::npos);
}

TEST(BuildPrompt, TenthSliceSeesLastFour) {
  ReplayWindow w(4);
  for (int k = 1; k <= 9; ++k) w.push(k, "t" + std::to_string(k));
  const PromptBundle b = build_prompt(10, w, {"en", "zh"});
  EXPECT_EQ(b.replay_block, (std::vector<std::string>{"t6", "t7", "t8", "t9"}));
}

TEST(BuildPrompt, UnknownLanguageAndBadIndex) {
  ReplayWindow w;
  EXPECT_THROW(build_prompt(1, w, {"en", "xx"}), PromptError);
  EXPECT_THROW(build_prompt(0, w, {"en", "zh"}), PromptError);
}

TEST(BuildPrompt, ReplaySizeProperty) {
  for (int eta = 0; eta <= 8; ++eta) {
    ReplayWindow w(eta);
    for (int i = 1; i <= 50; ++i) {
      const PromptBundle b = build_prompt(i, w, {"en", "ja"});
      const int want = std::min(i - 1, eta);
      ASSERT_EQ(static_cast<int>(b.replay_block.size()), want);
      for (int k = 0; k < want; ++k) EXPECT_EQ(b.replay_block[k], "訳" + std::to_string(i - want + k));
      w.push(i, "訳" + std::to_string(i));
    }
  }
}

TEST(Instantiate, SinglePassSubstitution) {
  EXPECT_EQ(instantiate("{A} and {B} and {C}", {{"A", "{B}"}, {"B", "x"}}), "{B} and x and {C}");
  EXPECT_EQ(instantiate("open { brace", {{"A", "1"}}), "open { brace");
}

TEST(Templates, LoadsPairDirectoryThenDefault) {
  testing_support::TempDir dir;
  std::filesystem::create_directories(dir / "default");
  std::filesystem::create_directories(dir / "en-ko");
  std::ofstream(dir / "default" / "global.txt") << "Default global for {SRC_LANG}.\n";
  std::ofstream(dir / "en-ko" / "global.txt") << "Pair global into {TGT_LANG}.";
  ReplayWindow w;
  const auto pair = build_prompt(1, w, {"en", "ko"}, TemplateSet::load(dir.path(), "en", "ko"));
  EXPECT_EQ(pair.global_instruction, "Pair global into Korean.");
  const auto fallback = build_prompt(1, w, {"en", "zh"}, TemplateSet::load(dir.path(), "en", "zh"));
  EXPECT_EQ(fallback.global_instruction, "Default global for English.");
  EXPECT_EQ(fallback.local_instruction, TemplateSet::defaults().get(TemplatePart::kLocal));
  EXPECT_THROW(TemplateSet::load(dir / "nope", "en", "zh"), PromptError);
}

TEST(MessageSequence, LayoutAndFourParagraphs) {
  ReplayWindow w;
  const auto seq = render_message_sequence(build_prompt(1, w, {"en", "zh"}), tiny(), tiny());
  ASSERT_EQ(seq.items.size(), 5u);
  EXPECT_EQ(std::get<IdentifierToken>(seq.items[0]).token, kGlobalIdentifier);
  EXPECT_EQ(std::get<IdentifierToken>(seq.items[2]).token, kLocalIdentifier);
  EXPECT_EQ(std::get<ImageRef>(seq.items[1]).view, ViewKind::kGlobal);
  EXPECT_EQ(std::get<ImageRef>(seq.items[3]).view, ViewKind::kLocal);
  EXPECT_TRUE(has_valid_layout(seq));
  EXPECT_EQ(parse_prompt_text(seq.text()).paragraph_count, 4);
}

TEST(MessageSequence, InvalidLayoutsDetected) {
  MessageSequence seq;
  seq.items.emplace_back(IdentifierToken{kGlobalIdentifier});
  seq.items.emplace_back(ImageRef{ViewKind::kLocal, tiny()});
  EXPECT_FALSE(has_valid_layout(seq));
  MessageSequence twice;
  for (int k = 0; k < 2; ++k) {
    twice.items.emplace_back(IdentifierToken{kGlobalIdentifier});
    twice.items.emplace_back(ImageRef{ViewKind::kGlobal, tiny()});
  }
  twice.items.emplace_back(IdentifierToken{kLocalIdentifier});
  twice.items.emplace_back(ImageRef{ViewKind::kLocal, tiny()});
  EXPECT_FALSE(has_valid_layout(twice));
}

TEST(MessageSequence, RenderParseRoundTrip) {
  ReplayWindow w(3);
  w.push(1, "line one");
  w.push(2, "two\nlines with \\ slash");
  w.push(4, "- dash start");
  const PromptBundle b = build_prompt(5, w, {"en", "zh"});
  const std::string text = render_prompt_text(b);
  EXPECT_EQ(text, render_prompt_text(b));
  const ParsedPrompt p = parse_prompt_text(text);
  EXPECT_EQ(p.paragraph_count, 5);
  EXPECT_EQ(p.global_instruction, b.global_instruction);
  EXPECT_EQ(p.local_instruction, b.local_instruction);
  EXPECT_EQ(p.consistency_rule, b.consistency_rule);
  EXPECT_EQ(p.translation_instruction, b.translation_instruction);
  EXPECT_EQ(p.replay_block, b.replay_block);
}
