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

#include "sacn/labels.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sacn {

extern const char* const kBuiltinLexicon;  // generated from data/default_rules.txt

namespace {

constexpr std::array<std::string_view, kNumLabels> kNames{
    "No Finding",   "Enlarged Cardiomediastinum", "Cardiomegaly",  "Lung Opacity", "Lung Lesion",
    "Edema",        "Consolidation",              "Pneumonia",     "Atelectasis",  "Pneumothorax",
    "Pleural Effusion", "Pleural Other",          "Fracture",      "Support Devices"};

constexpr std::array<std::string_view, kNumLabels> kChestXray14{
    "Atelectasis", "Cardiomegaly", "Effusion",      "Infiltration", "Mass",     "Nodule",   "Pneumonia",
    "Pneumothorax", "Consolidation", "Edema",       "Emphysema",    "Fibrosis", "Pleural_Thickening", "Hernia"};

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool token_matches(const std::string& pattern, const std::string& token) {
  if (pattern == "*") return true;
  if (pattern.size() > 1 && pattern.back() == '*') {
    return token.compare(0, pattern.size() - 1, pattern, 0, pattern.size() - 1) == 0 &&
           token.size() >= pattern.size() - 1;
  }
  return pattern == token;
}

bool matches_at(const Pattern& p, const std::vector<Token>& tokens, std::size_t at) {
  if (p.empty() || at + p.size() > tokens.size()) return false;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (!token_matches(p[k], tokens[at + k].text)) return false;
  }
  return true;
}

Pattern to_pattern(std::string_view line) {
  // Whitespace split rather than tokenize() so that '*' survives.
  Pattern p;
  std::istringstream ss{std::string(line)};
  std::string word;
  while (ss >> word) p.push_back(lower(word));
  return p;
}

// Cue occurrences ending at or before `limit` (token index, exclusive) and
// no earlier than `limit - window`, with no terminator in between.
bool cue_before(const std::vector<Pattern>& cues, const std::vector<Token>& tokens, std::size_t mention_start,
                std::size_t window, const std::vector<Pattern>& terminators) {
  const std::size_t lo = mention_start > window ? mention_start - window : 0;
  for (std::size_t start = lo; start < mention_start; ++start) {
    for (const Pattern& cue : cues) {
      if (start + cue.size() > mention_start) continue;
      if (!matches_at(cue, tokens, start)) continue;
      bool blocked = false;
      for (std::size_t k = start + cue.size(); k < mention_start && !blocked; ++k) {
        for (const Pattern& t : terminators) {
          if (matches_at(t, tokens, k)) {
            blocked = true;
            break;
          }
        }
      }
      if (!blocked) return true;
    }
  }
  return false;
}

bool cue_after(const std::vector<Pattern>& cues, const std::vector<Token>& tokens, std::size_t mention_end,
               std::size_t window) {
  for (std::size_t start = mention_end; start < tokens.size() && start <= mention_end + window; ++start) {
    for (const Pattern& cue : cues) {
      if (matches_at(cue, tokens, start)) return true;
    }
  }
  return false;
}

bool is_connector(const std::string& t) { return t == "or" || t == "and" || t == "nor" || t == ","; }

}  // namespace

const std::array<std::string_view, kNumLabels>& label_names() { return kNames; }
const std::array<std::string_view, kNumLabels>& chestxray14_names() { return kChestXray14; }

LabelState parse_label_cell(std::string_view cell) {
  const std::string v = lower(trim(cell));
  if (v.empty()) return LabelState::blank;
  if (v == "0" || v == "0.0") return LabelState::negative;
  if (v == "1" || v == "1.0") return LabelState::positive;
  if (v == "-1" || v == "-1.0" || v == "u") return LabelState::uncertain;
  throw std::invalid_argument("unparseable label cell '" + std::string(cell) + "'");
}

std::string_view format_label_cell(LabelState s) {
  switch (s) {
    case LabelState::blank: return "";
    case LabelState::negative: return "0";
    case LabelState::positive: return "1";
    case LabelState::uncertain: return "-1";
  }
  return "";
}

char label_symbol(LabelState s) {
  switch (s) {
    case LabelState::blank: return ' ';
    case LabelState::negative: return '0';
    case LabelState::positive: return '1';
    case LabelState::uncertain: return 'u';
  }
  return ' ';
}

UncertaintyPolicy parse_policy(std::string_view name) {
  const std::string v = lower(trim(name));
  if (v == "u-ignore" || v == "u_ignore") return UncertaintyPolicy::u_ignore;
  if (v == "u-zeros" || v == "u_zeros") return UncertaintyPolicy::u_zeros;
  if (v == "u-ones" || v == "u_ones") return UncertaintyPolicy::u_ones;
  throw std::invalid_argument("unknown uncertainty policy '" + std::string(name) +
                              "' (expected u-ignore, u-zeros or u-ones)");
}

std::string_view policy_name(UncertaintyPolicy p) {
  switch (p) {
    case UncertaintyPolicy::u_ignore: return "u-ignore";
    case UncertaintyPolicy::u_zeros: return "u-zeros";
    case UncertaintyPolicy::u_ones: return "u-ones";
  }
  return "";
}

std::optional<BinaryLabels> apply_policy(const LabelVector& labels, UncertaintyPolicy policy) {
  BinaryLabels out{};
  for (std::size_t i = 0; i < kNumLabels; ++i) {
    switch (labels[i]) {
      case LabelState::blank:
      case LabelState::negative: out[i] = 0.0; break;
      case LabelState::positive: out[i] = 1.0; break;
      case LabelState::uncertain:
        if (policy == UncertaintyPolicy::u_ignore) return std::nullopt;
        out[i] = policy == UncertaintyPolicy::u_ones ? 1.0 : 0.0;
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Lexicon Lexicon::parse(std::istream& in) {
  Lexicon lex;
  std::vector<Pattern>* target = nullptr;
  bool settings = false;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument("lexicon line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') fail("unterminated section header");
      const std::string name = trim(std::string_view(t).substr(1, t.size() - 2));
      settings = false;
      target = nullptr;
      if (name == "settings") {
        settings = true;
      } else if (name == "negation") {
        target = &lex.negation;
      } else if (name == "negation-post") {
        target = &lex.negation_post;
      } else if (name == "uncertainty") {
        target = &lex.uncertainty;
      } else if (name == "uncertainty-post") {
        target = &lex.uncertainty_post;
      } else if (name == "terminators") {
        target = &lex.terminators;
      } else if (name == "normal") {
        target = &lex.normal;
      } else if (name.rfind("observation ", 0) == 0) {
        const std::string obs = trim(std::string_view(name).substr(12));
        const auto it = std::find(kNames.begin(), kNames.end(), obs);
        if (it == kNames.end()) fail("unknown observation '" + obs + "'");
        if (it == kNames.begin()) fail("No Finding is driven by the [normal] section");
        target = &lex.observations[static_cast<std::size_t>(it - kNames.begin())];
      } else {
        fail("unknown section '" + name + "'");
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq != std::string::npos && (settings || target == nullptr)) {
      const std::string key = trim(std::string_view(t).substr(0, eq));
      const std::string value = trim(std::string_view(t).substr(eq + 1));
      std::size_t number = 0;
      const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), number);
      if (ec != std::errc{} || ptr != value.data() + value.size()) fail("bad value for '" + key + "'");
      if (key == "version") {
        if (number != 1) fail("unsupported lexicon version " + value);
      } else if (key == "window") {
        lex.window = number;
      } else if (key == "post_window") {
        lex.post_window = number;
      } else {
        fail("unknown setting '" + key + "'");
      }
      continue;
    }
    if (target == nullptr) fail("entry outside of a phrase section");
    target->push_back(to_pattern(t));
  }
  for (std::size_t i = 1; i < kNumLabels; ++i) {
    if (lex.observations[i].empty()) {
      throw std::invalid_argument("lexicon has no patterns for " + std::string(kNames[i]));
    }
  }
  return lex;
}

Lexicon Lexicon::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open lexicon " + path);
  return parse(in);
}

const Lexicon& Lexicon::builtin() {
  static const Lexicon lex = [] {
    std::istringstream in(kBuiltinLexicon);
    return parse(in);
  }();
  return lex;
}

std::vector<Token> tokenize(std::string_view sentence) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < sentence.size()) {
    const unsigned char c = static_cast<unsigned char>(sentence[i]);
    if (std::isalnum(c)) {
      const std::size_t b = i;
      while (i < sentence.size() && std::isalnum(static_cast<unsigned char>(sentence[i]))) ++i;
      out.push_back({lower(sentence.substr(b, i - b)), b, i});
    } else if (c == ',') {
      out.push_back({",", i, i + 1});
      ++i;
    } else {
      ++i;
    }
  }
  return out;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!trim(current).empty()) out.push_back(current);
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '.' && i > 0 && i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i - 1])) &&
        std::isdigit(static_cast<unsigned char>(text[i + 1]))) {
      current += c;
    } else if (c == '.' || c == '?' || c == '!' || c == ';' || c == '\n' || c == '\r') {
      flush();
    } else {
      current += c;
    }
  }
  flush();
  return out;
}

std::vector<Mention> extract_mentions(std::string_view text, const Lexicon& lexicon) {
  std::vector<Mention> out;
  const auto sentences = split_sentences(text);
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto tokens = tokenize(sentences[s]);
    for (std::size_t obs = 0; obs < kNumLabels; ++obs) {
      const auto& patterns = obs == 0 ? lexicon.normal : lexicon.observations[obs];
      std::vector<std::pair<std::size_t, std::size_t>> spans;
      for (std::size_t at = 0; at < tokens.size(); ++at) {
        for (const Pattern& p : patterns) {
          if (matches_at(p, tokens, at)) spans.emplace_back(at, at + p.size());
        }
      }
      // Longest first, then leftmost; drop spans overlapping a kept one.
      std::sort(spans.begin(), spans.end(), [](const auto& a, const auto& b) {
        const auto la = a.second - a.first, lb = b.second - b.first;
        return la != lb ? la > lb : a.first < b.first;
      });
      std::vector<std::pair<std::size_t, std::size_t>> kept;
      for (const auto& sp : spans) {
        const bool overlaps = std::any_of(kept.begin(), kept.end(), [&](const auto& k) {
          return sp.first < k.second && k.first < sp.second;
        });
        if (!overlaps) kept.push_back(sp);
      }
      std::sort(kept.begin(), kept.end());
      for (const auto& [b, e] : kept) {
        Mention m;
        m.observation = obs;
        m.sentence = s;
        m.token_begin = b;
        m.token_end = e;
        m.begin = tokens[b].begin;
        m.end = tokens[e - 1].end;
        out.push_back(m);
      }
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Mention& a, const Mention& b) {
    return a.sentence != b.sentence ? a.sentence < b.sentence : a.token_begin < b.token_begin;
  });
  return out;
}

namespace {

std::optional<Polarity> direct_polarity(const Mention& m, const std::vector<Token>& tokens, const Lexicon& lex) {
  if (cue_before(lex.uncertainty, tokens, m.token_begin, lex.window, lex.terminators) ||
      cue_after(lex.uncertainty_post, tokens, m.token_end, lex.post_window)) {
    return Polarity::uncertain;
  }
  if (cue_before(lex.negation, tokens, m.token_begin, lex.window, lex.terminators) ||
      cue_after(lex.negation_post, tokens, m.token_end, lex.post_window)) {
    return Polarity::negative;
  }
  return std::nullopt;
}

}  // namespace

Mention classify_mention(const Mention& mention, std::string_view sentence, const Lexicon& lexicon,
                         const std::vector<Mention>& sentence_mentions) {
  const auto tokens = tokenize(sentence);
  if (mention.token_end > tokens.size() || mention.token_begin >= mention.token_end) {
    throw std::out_of_range("mention span outside its sentence");
  }
  Mention out = mention;
  if (auto p = direct_polarity(mention, tokens, lexicon)) {
    out.polarity = *p;
    return out;
  }
  // Coordination: "no A or B" negates B through A when only connectors
  // separate them.
  std::vector<const Mention*> before;
  for (const Mention& other : sentence_mentions) {
    if (other.sentence == mention.sentence && other.token_end <= mention.token_begin) before.push_back(&other);
  }
  std::sort(before.begin(), before.end(), [](const Mention* a, const Mention* b) { return a->token_end > b->token_end; });
  std::size_t gap_end = mention.token_begin;
  for (const Mention* prev : before) {
    if (prev->token_end > gap_end) continue;  // overlapping mention of another observation
    bool only_connectors = true;
    for (std::size_t k = prev->token_end; k < gap_end; ++k) only_connectors = only_connectors && is_connector(tokens[k].text);
    if (!only_connectors) break;
    const auto p = direct_polarity(*prev, tokens, lexicon);
    if (p == Polarity::negative) {
      out.polarity = Polarity::negative;
      return out;
    }
    if (p.has_value()) break;
    gap_end = prev->token_begin;
  }
  out.polarity = Polarity::positive;
  return out;
}

LabelVector aggregate(const std::vector<Mention>& mentions) {
  LabelVector out;
  out.fill(LabelState::blank);
  bool normal_positive = false;
  for (const Mention& m : mentions) {
    if (m.observation >= kNumLabels) throw std::out_of_range("mention observation index out of range");
    const Polarity p = m.polarity.value_or(Polarity::positive);
    if (m.observation == 0) {
      normal_positive = normal_positive || p == Polarity::positive;
      continue;
    }
    LabelState& s = out[m.observation];
    const LabelState incoming = p == Polarity::positive   ? LabelState::positive
                                : p == Polarity::uncertain ? LabelState::uncertain
                                                           : LabelState::negative;
    auto rank = [](LabelState x) {
      switch (x) {
        case LabelState::blank: return 0;
        case LabelState::negative: return 1;
        case LabelState::uncertain: return 2;
        case LabelState::positive: return 3;
      }
      return 0;
    };
    if (rank(incoming) > rank(s)) s = incoming;
  }
  const bool findings = std::any_of(out.begin() + 1, out.end(), [](LabelState s) {
    return s == LabelState::positive || s == LabelState::uncertain;
  });
  out[0] = normal_positive && !findings ? LabelState::positive : LabelState::blank;
  return out;
}

ReportSections parse_sections(std::string_view name) {
  const std::string v = lower(trim(name));
  if (v == "impression") return ReportSections::impression;
  if (v == "findings+impression") return ReportSections::findings_impression;
  if (v == "all") return ReportSections::all;
  throw std::invalid_argument("unknown sections '" + std::string(name) +
                              "' (expected impression, findings+impression or all)");
}

std::string select_sections(std::string_view report, ReportSections sections) {
  if (sections == ReportSections::all) return std::string(report);
  // Locate headers at line starts: "<WORD(S)>:".
  struct Section {
    std::string name;
    std::size_t body_begin, body_end;
  };
  std::vector<Section> found;
  std::size_t pos = 0;
  while (pos <= report.size()) {
    const std::size_t eol = std::min(report.find('\n', pos), report.size());
    const std::string_view line = report.substr(pos, eol - pos);
    const auto colon = line.find(':');
    if (colon != std::string_view::npos) {
      const std::string head = lower(trim(line.substr(0, colon)));
      const bool is_header = !head.empty() && std::all_of(head.begin(), head.end(), [](char c) {
        return std::isalpha(static_cast<unsigned char>(c)) || c == ' ';
      });
      if (is_header) {
        if (!found.empty()) found.back().body_end = pos;
        found.push_back({head, pos + colon + 1, report.size()});
      }
    }
    if (eol == report.size()) break;
    pos = eol + 1;
  }
  std::string out;
  auto take = [&](const char* name) {
    for (const Section& s : found) {
      if (s.name == name) {
        out += std::string(report.substr(s.body_begin, s.body_end - s.body_begin));
        out += "\n";
      }
    }
  };
  if (sections == ReportSections::findings_impression) take("findings");
  take("impression");
  if (trim(out).empty()) return std::string(report);
  return out;
}

LabelVector label_report(std::string_view report, const Lexicon& lexicon, ReportSections sections) {
  const std::string text = select_sections(report, sections);
  const auto sentences = split_sentences(text);
  const auto mentions = extract_mentions(text, lexicon);
  std::vector<Mention> classified;
  classified.reserve(mentions.size());
  for (const Mention& m : mentions) {
    std::vector<Mention> same;
    for (const Mention& o : mentions) {
      if (o.sentence == m.sentence) same.push_back(o);
    }
    classified.push_back(classify_mention(m, sentences[m.sentence], lexicon, same));
  }
  return aggregate(classified);
}

}  // namespace sacn
