// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sacn {

enum class LabelState { blank, negative, positive, uncertain };

inline constexpr std::size_t kNumLabels = 14;

/// One state per observation in canonical order (see label_names()).
using LabelVector = std::array<LabelState, kNumLabels>;
using BinaryLabels = std::array<double, kNumLabels>;

/// Canonical observation names: No Finding ... Support Devices.
const std::array<std::string_view, kNumLabels>& label_names();
/// Alternative 14-name vocabulary accepted in manifest headers
/// (Atelectasis ... Hernia). Positions map one-to-one onto label columns.
const std::array<std::string_view, kNumLabels>& chestxray14_names();

/// Cell text: "" blank, "0" negative, "1" positive, "-1" or "u" uncertain.
/// Surrounding whitespace is ignored; anything else throws invalid_argument.
LabelState parse_label_cell(std::string_view cell);
/// Inverse of parse_label_cell; uncertain is written as "-1".
std::string_view format_label_cell(LabelState s);
char label_symbol(LabelState s);  // ' ', '0', '1', 'u'

enum class UncertaintyPolicy { u_ignore, u_zeros, u_ones };

UncertaintyPolicy parse_policy(std::string_view name);  // "u-ignore" | "u-zeros" | "u-ones"
std::string_view policy_name(UncertaintyPolicy p);

/// Blank and Negative map to 0, Positive to 1, Uncertain per the policy.
/// Under U-Ignore any Uncertain entry drops the whole row (nullopt).
std::optional<BinaryLabels> apply_policy(const LabelVector& labels, UncertaintyPolicy policy);

// ---------------------------------------------------------------------------
// Rule-based report labeler.

enum class Polarity { positive, negative, uncertain };

/// Phrase as lowercase tokens. A token "*" matches any single token; a token
/// ending in '*' matches any token with that prefix.
using Pattern = std::vector<std::string>;

struct Lexicon {
  std::vector<Pattern> negation;       // cue precedes the mention
  std::vector<Pattern> negation_post;  // cue follows the mention
  std::vector<Pattern> uncertainty;
  std::vector<Pattern> uncertainty_post;
  std::vector<Pattern> terminators;  // tokens that close a cue's scope
  std::vector<Pattern> normal;       // phrases that support "No Finding"
  std::array<std::vector<Pattern>, kNumLabels> observations;
  std::size_t window = 6;
  std::size_t post_window = 3;

  /// Section-based text format; see data/default_rules.txt.
  static Lexicon parse(std::istream& in);
  static Lexicon load(const std::string& path);
  /// The lexicon compiled into the library.
  static const Lexicon& builtin();
};

struct Token {
  std::string text;  // lowercased
  std::size_t begin = 0, end = 0;  // character span within the sentence
};

std::vector<Token> tokenize(std::string_view sentence);
/// Splits on '.', '?', '!', ';' and newlines; a '.' between digits is kept.
std::vector<std::string> split_sentences(std::string_view text);

struct Mention {
  std::size_t observation = 0;
  std::size_t sentence = 0;
  std::size_t begin = 0, end = 0;              // character span in the sentence
  std::size_t token_begin = 0, token_end = 0;  // token span, end exclusive
  std::optional<Polarity> polarity;
};

/// Matches every observation pattern (and normal phrase, as observation 0)
/// against every sentence. Overlapping matches for the same observation in
/// one sentence collapse to the longest.
std::vector<Mention> extract_mentions(std::string_view text, const Lexicon& lexicon = Lexicon::builtin());

/// Uncertainty cues are checked before negation cues. A negated mention
/// also negates mentions coordinated after it with "or", "and", "nor" or ",".
Mention classify_mention(const Mention& mention, std::string_view sentence, const Lexicon& lexicon,
                         const std::vector<Mention>& sentence_mentions = {});

/// Per observation: Positive > Uncertain > Negative > Blank. No Finding is
/// Positive only when a normal phrase was matched positively and no other
/// observation is Positive or Uncertain; otherwise Blank.
LabelVector aggregate(const std::vector<Mention>& mentions);

enum class ReportSections { impression, findings_impression, all };
ReportSections parse_sections(std::string_view name);  // "impression" | "findings+impression" | "all"

/// Extracts the requested sections from headed text ("FINDINGS:",
/// "IMPRESSION:"). Falls back to the whole text when no such header exists.
std::string select_sections(std::string_view report, ReportSections sections);

/// extract -> classify -> aggregate.
LabelVector label_report(std::string_view report, const Lexicon& lexicon = Lexicon::builtin(),
                         ReportSections sections = ReportSections::findings_impression);

}  // namespace sacn
