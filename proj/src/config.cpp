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

#include "sacn/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "sacn/tensor.hpp"

namespace sacn {

namespace {

using nlohmann::json;

bool is_bare_key_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

class TomlParser {
 public:
  TomlParser(std::string text, std::string source) : s_(std::move(text)), source_(std::move(source)) {}

  json document() {
    json root = json::object();
    std::vector<std::string> table;
    std::set<std::vector<std::string>> defined;
    for (;;) {
      skip_blank_lines();
      if (pos_ >= s_.size()) break;
      const std::size_t at = line_;
      if (s_[pos_] == '[') {
        ++pos_;
        if (peek() == '[') fail("arrays of tables are not supported");
        skip_spaces();
        table = key_path();
        skip_spaces();
        expect(']');
        end_of_line();
        if (!defined.insert(table).second) fail("table [" + join(table) + "] defined twice", at);
        json& t = descend(root, table, table.size(), at);
        if (!t.is_object()) fail("[" + join(table) + "] is not a table", at);
        continue;
      }
      std::vector<std::string> key = key_path();
      skip_spaces();
      expect('=');
      skip_spaces();
      json v = value();
      end_of_line();
      std::vector<std::string> full = table;
      full.insert(full.end(), key.begin(), key.end());
      json& parent = descend(root, full, full.size() - 1, at);
      if (!parent.is_object()) fail("'" + join(full) + "' extends a non-table value", at);
      if (parent.contains(full.back())) fail("duplicate key '" + join(full) + "'", at);
      parent[full.back()] = std::move(v);
    }
    return root;
  }

  json lone_value() {
    skip_spaces();
    json v = value();
    skip_spaces();
    if (pos_ != s_.size()) fail("trailing characters after value");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& msg, std::size_t line = 0) const {
    throw FormatError(source_ + ":" + std::to_string(line ? line : line_) + ": " + msg);
  }

  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }

  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_spaces() {
    while (peek() == ' ' || peek() == '\t') ++pos_;
  }

  void skip_comment() {
    if (peek() == '#') {
      while (pos_ < s_.size() && s_[pos_] != '\n') ++pos_;
    }
  }

  void skip_blank_lines() {
    for (;;) {
      skip_spaces();
      skip_comment();
      if (peek() == '\r') ++pos_;
      if (peek() != '\n') return;
      ++pos_;
      ++line_;
    }
  }

  void end_of_line() {
    skip_spaces();
    skip_comment();
    if (peek() == '\r') ++pos_;
    if (pos_ >= s_.size()) return;
    if (peek() != '\n') fail("expected end of line");
    ++pos_;
    ++line_;
  }

  static std::string join(const std::vector<std::string>& parts) {
    std::string out;
    for (const auto& p : parts) out += (out.empty() ? "" : ".") + p;
    return out;
  }

  json& descend(json& root, const std::vector<std::string>& path, std::size_t depth, std::size_t at) {
    json* node = &root;
    for (std::size_t i = 0; i < depth; ++i) {
      if (!node->is_object()) fail("'" + join(path) + "' extends a non-table value", at);
      if (!node->contains(path[i])) (*node)[path[i]] = json::object();
      node = &(*node)[path[i]];
    }
    return *node;
  }

  std::vector<std::string> key_path() {
    std::vector<std::string> parts;
    for (;;) {
      if (peek() == '"') {
        parts.push_back(basic_string());
      } else if (peek() == '\'') {
        parts.push_back(literal_string());
      } else {
        const std::size_t start = pos_;
        while (is_bare_key_char(peek())) ++pos_;
        if (pos_ == start) fail("expected a key");
        parts.push_back(s_.substr(start, pos_ - start));
      }
      skip_spaces();
      if (peek() != '.') return parts;
      ++pos_;
      skip_spaces();
    }
  }

  std::string basic_string() {
    expect('"');
    if (s_.compare(pos_, 2, "\"\"") == 0) fail("multi-line strings are not supported");
    std::string out;
    for (;;) {
      if (pos_ >= s_.size() || s_[pos_] == '\n') fail("unterminated string");
      const char c = s_[pos_++];
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      const char e = peek();
      ++pos_;
      switch (e) {
        case 'b': out += '\b'; break;
        case 't': out += '\t'; break;
        case 'n': out += '\n'; break;
        case 'f': out += '\f'; break;
        case 'r': out += '\r'; break;
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'u':
        case 'U': {
          const std::size_t digits = e == 'u' ? 4 : 8;
          if (pos_ + digits > s_.size()) fail("truncated unicode escape");
          std::uint32_t cp = 0;
          auto r = std::from_chars(s_.data() + pos_, s_.data() + pos_ + digits, cp, 16);
          if (r.ptr != s_.data() + pos_ + digits) fail("bad unicode escape");
          pos_ += digits;
          append_utf8(out, cp);
          break;
        }
        default:
          fail(std::string("unknown escape \\") + e);
      }
    }
  }

  std::string literal_string() {
    expect('\'');
    if (s_.compare(pos_, 2, "''") == 0) fail("multi-line strings are not supported");
    const std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != '\'' && s_[pos_] != '\n') ++pos_;
    if (peek() != '\'') fail("unterminated string");
    return s_.substr(start, pos_++ - start);
  }

  void skip_array_space() {
    for (;;) {
      skip_spaces();
      skip_comment();
      if (peek() == '\r') ++pos_;
      if (peek() != '\n') return;
      ++pos_;
      ++line_;
    }
  }

  json value() {
    const char c = peek();
    if (c == '"') return basic_string();
    if (c == '\'') return literal_string();
    if (c == '{') fail("inline tables are not supported");
    if (c == '[') {
      ++pos_;
      json arr = json::array();
      for (;;) {
        skip_array_space();
        if (peek() == ']') {
          ++pos_;
          return arr;
        }
        arr.push_back(value());
        skip_array_space();
        if (peek() == ',') {
          ++pos_;
        } else if (peek() != ']') {
          fail("expected ',' or ']' in array");
        }
      }
    }
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (is_bare_key_char(s_[pos_]) || s_[pos_] == '.' || s_[pos_] == '+' || s_[pos_] == ':')) {
      ++pos_;
    }
    const std::string token = s_.substr(start, pos_ - start);
    if (token.empty()) fail("expected a value");
    if (token == "true") return true;
    if (token == "false") return false;
    return number(token);
  }

  json number(const std::string& token) {
    const bool date_like = token.size() >= 7 && std::all_of(token.begin(), token.begin() + 4, ::isdigit) &&
                           token[4] == '-';
    if (token.find(':') != std::string::npos || date_like) {
      fail("dates and times are not supported: " + token);
    }
    std::string t;
    for (std::size_t i = 0; i < token.size(); ++i) {
      if (token[i] != '_') {
        t += token[i];
        continue;
      }
      const bool ok = i > 0 && i + 1 < token.size() && std::isalnum(static_cast<unsigned char>(token[i - 1])) &&
                      std::isalnum(static_cast<unsigned char>(token[i + 1]));
      if (!ok) fail("misplaced '_' in number: " + token);
    }
    bool negative = false;
    std::string body = t;
    if (!body.empty() && (body[0] == '+' || body[0] == '-')) {
      negative = body[0] == '-';
      body.erase(0, 1);
    }
    if (body == "inf") return negative ? -HUGE_VAL : HUGE_VAL;
    if (body == "nan") return std::nan("");
    if (body.size() > 2 && body[0] == '0' && (body[1] == 'x' || body[1] == 'o' || body[1] == 'b')) {
      if (t[0] == '+' || t[0] == '-') fail("signed prefixed integer: " + token);
      const int base = body[1] == 'x' ? 16 : body[1] == 'o' ? 8 : 2;
      std::int64_t v = 0;
      auto r = std::from_chars(body.data() + 2, body.data() + body.size(), v, base);
      if (r.ec != std::errc() || r.ptr != body.data() + body.size()) fail("bad integer: " + token);
      return v;
    }
    const bool is_float = body.find_first_of(".eE") != std::string::npos;
    if (is_float) {
      if (body.front() == '.' || body.back() == '.' || body.find(".e") != std::string::npos ||
          body.find(".E") != std::string::npos) {
        fail("bad float: " + token);
      }
      double v = 0;
      auto r = std::from_chars(body.data(), body.data() + body.size(), v);
      if (r.ec != std::errc() || r.ptr != body.data() + body.size()) fail("bad float: " + token);
      return negative ? -v : v;
    }
    if (body.size() > 1 && body[0] == '0') fail("leading zero in integer: " + token);
    std::int64_t v = 0;
    auto r = std::from_chars(t.data() + (t[0] == '+' ? 1 : 0), t.data() + t.size(), v);
    if (r.ec != std::errc() || r.ptr != t.data() + t.size()) fail("bad value: " + token);
    return v;
  }

  std::string s_;
  std::string source_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

std::string toml_key(const std::string& key) {
  const bool bare = !key.empty() && std::all_of(key.begin(), key.end(), is_bare_key_char);
  return bare ? key : json(key).dump();
}

std::string toml_scalar(const json& v) {
  switch (v.type()) {
    case json::value_t::string:
      return json(v.get<std::string>()).dump();
    case json::value_t::boolean:
      return v.get<bool>() ? "true" : "false";
    case json::value_t::number_integer:
      return std::to_string(v.get<std::int64_t>());
    case json::value_t::number_unsigned:
      return std::to_string(v.get<std::uint64_t>());
    case json::value_t::number_float: {
      const double d = v.get<double>();
      if (std::isnan(d)) return "nan";
      if (std::isinf(d)) return d > 0 ? "inf" : "-inf";
      char buf[64];
      auto r = std::to_chars(buf, buf + sizeof buf, d);
      std::string s(buf, r.ptr);
      if (s.find_first_of(".e") == std::string::npos) s += ".0";
      return s;
    }
    case json::value_t::array: {
      std::string out = "[";
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i].is_null() || v[i].is_object()) throw std::invalid_argument("to_toml: unsupported array element");
        out += (i ? ", " : "") + toml_scalar(v[i]);
      }
      return out + "]";
    }
    default:
      throw std::invalid_argument("to_toml: unsupported value");
  }
}

void emit_table(std::ostringstream& out, const json& obj, const std::string& prefix) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (it->is_null() || it->is_object()) continue;
    out << toml_key(it.key()) << " = " << toml_scalar(*it) << '\n';
  }
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!it->is_object()) continue;
    const std::string name = prefix.empty() ? toml_key(it.key()) : prefix + "." + toml_key(it.key());
    out << '\n' << '[' << name << "]\n";
    emit_table(out, *it, name);
  }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be a table");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* a : allowed) known = known || it.key() == a;
    if (!known) {
      throw std::invalid_argument("config: unknown key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
    }
  }
}

template <class T>
T get_as(const json& j, const char* key, const std::string& where) {
  try {
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      const json& v = j.at(key);
      if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0 && !v.is_number_unsigned())) {
        throw std::invalid_argument("expected a non-negative integer");
      }
      return v.get<T>();
    } else {
      return j.at(key).get<T>();
    }
  } catch (const std::exception& e) {
    throw std::invalid_argument("config: " + where + "." + key + ": " + e.what());
  }
}

void set_path(json& root, const std::string& dotted, const json& value) {
  json* node = &root;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw std::invalid_argument("config: bad key path '" + dotted + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw std::invalid_argument("config: '" + dotted + "' extends a non-table value");
    start = dot + 1;
  }
}

}  // namespace

json parse_toml(std::istream& in, const std::string& source) {
  std::ostringstream buf;
  buf << in.rdbuf();
  return TomlParser(buf.str(), source).document();
}

json load_toml(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  return parse_toml(in, path.string());
}

json parse_toml_value(const std::string& text) { return TomlParser(text, "<value>").lone_value(); }

std::string to_toml(const json& object) {
  if (!object.is_object()) throw std::invalid_argument("to_toml: expected an object");
  std::ostringstream out;
  emit_table(out, object, "");
  return out.str();
}

// ---------------------------------------------------------------------------

std::vector<View> parse_views(const std::string& text) {
  if (text == "all") return {View::frontal, View::lateral, View::unknown};
  std::vector<View> views;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = text.find(',', start);
    std::string part = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    part.erase(0, part.find_first_not_of(' '));
    part.erase(part.find_last_not_of(' ') + 1);
    const View v = parse_view(part);
    if (v == View::unknown && part != "unknown") {
      throw std::invalid_argument("unknown view '" + part + "' (expected all, frontal, lateral or unknown)");
    }
    if (std::find(views.begin(), views.end(), v) == views.end()) views.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return views;
}

std::string format_views(const std::vector<View>& views) {
  if (views.size() == 3) return "all";
  std::string out;
  for (View v : views) out += (out.empty() ? "" : ",") + std::string(view_name(v));
  return out;
}

void RunConfig::validate() const {
  if (profile != "desk" && profile != "full") {
    throw std::invalid_argument("config: profile must be 'desk' or 'full', got '" + profile + "'");
  }
  if (threads < 1) throw std::invalid_argument("config: threads must be >= 1");
  if (views.empty()) throw std::invalid_argument("config: views must not be empty");
  if (tag.empty() || tag.find('/') != std::string::npos) throw std::invalid_argument("config: bad output tag");
  const auto& f = data.fractions;
  if (!(f.train > 0 && f.val > 0 && f.test > 0) || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw std::invalid_argument("config: data.fractions must be three positive numbers summing to 1");
  }
  network.validate();
  train.validate();
  pipeline.augment.validate();
  if (pipeline.height != network.input_height || pipeline.width != network.input_width) {
    throw std::invalid_argument("config: pipeline size must match the network input size");
  }
}

json RunConfig::to_json() const {
  json j;
  j["profile"] = profile;
  j["seed"] = seed;
  j["threads"] = threads;
  j["policy"] = std::string(policy_name(policy));
  j["views"] = format_views(views);
  j["network"] = network.to_json();
  json t = train.to_json();
  t.erase("seed");
  t.erase("threads");
  j["train"] = t;
  json a;
  json ops = json::array();
  for (AugmentOp op : pipeline.augment.enabled) ops.push_back(std::string(augment_op_name(op)));
  a["ops"] = ops;
  a["horizontal_flip_prob"] = pipeline.augment.horizontal_flip_prob;
  a["rotation_max_degrees"] = pipeline.augment.rotation_max_degrees;
  a["scale_min"] = pipeline.augment.scale_min;
  a["scale_max"] = pipeline.augment.scale_max;
  a["crop_size"] = {pipeline.augment.crop_height, pipeline.augment.crop_width};
  a["translate_max"] = pipeline.augment.translate_max;
  a["contrast_max"] = pipeline.augment.contrast_max;
  a["noise_sigma"] = pipeline.augment.noise_sigma;
  a["load_size"] = {pipeline.load_height, pipeline.load_width};
  j["augment"] = a;
  j["data"] = {{"train", data.train},
               {"val", data.val},
               {"test", data.test},
               {"manifest", data.manifest},
               {"auto_split", data.auto_split},
               {"fractions", {data.fractions.train, data.fractions.val, data.fractions.test}}};
  j["output"] = {{"root", output_root}, {"tag", tag}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  check_keys(j, {"profile", "seed", "threads", "policy", "views", "network", "train", "augment", "data", "output"}, "");
  RunConfig c;
  if (j.contains("profile")) c.profile = get_as<std::string>(j, "profile", "config");
  if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j, "seed", "config");
  if (j.contains("threads")) c.threads = get_as<std::size_t>(j, "threads", "config");
  if (j.contains("policy")) c.policy = parse_policy(get_as<std::string>(j, "policy", "config"));
  if (j.contains("views")) c.views = parse_views(get_as<std::string>(j, "views", "config"));

  if (j.contains("network")) {
    const json& n = j.at("network");
    check_keys(n, {"in_channels", "input_size", "stem", "block_layout", "growth_rate", "bottleneck_factor",
                   "compression", "attention", "num_classes"},
               "network");
    if (n.contains("stem")) check_keys(n.at("stem"), {"kernel", "stride", "channels", "max_pool"}, "network.stem");
    if (n.contains("attention")) {
      check_keys(n.at("attention"),
                 {"heads", "channels", "key_dim", "value_dim", "relative_positions", "position_cap", "placement"},
                 "network.attention");
    }
    c.network = NetworkConfig::from_json(n);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, {"batch_size", "lr", "lr_decay", "beta1", "beta2", "epsilon", "max_epochs", "patience",
                   "ensemble_size"},
               "train");
    TrainConfig& tc = c.train;
    if (t.contains("batch_size")) tc.batch_size = get_as<std::size_t>(t, "batch_size", "train");
    if (t.contains("lr")) tc.lr = get_as<double>(t, "lr", "train");
    if (t.contains("lr_decay")) tc.lr_decay = get_as<double>(t, "lr_decay", "train");
    if (t.contains("beta1")) tc.beta1 = get_as<double>(t, "beta1", "train");
    if (t.contains("beta2")) tc.beta2 = get_as<double>(t, "beta2", "train");
    if (t.contains("epsilon")) tc.epsilon = get_as<double>(t, "epsilon", "train");
    if (t.contains("max_epochs")) tc.max_epochs = get_as<std::size_t>(t, "max_epochs", "train");
    if (t.contains("patience")) tc.patience = get_as<std::size_t>(t, "patience", "train");
    if (t.contains("ensemble_size")) tc.ensemble_size = get_as<std::size_t>(t, "ensemble_size", "train");
  }
  c.train.seed = c.seed;
  c.train.threads = c.threads;

  c.pipeline.height = c.network.input_height;
  c.pipeline.width = c.network.input_width;
  if (j.contains("augment")) {
    const json& a = j.at("augment");
    check_keys(a, {"ops", "horizontal_flip_prob", "rotation_max_degrees", "scale_min", "scale_max", "crop_size",
                   "translate_max", "contrast_max", "noise_sigma", "load_size"},
               "augment");
    AugmentConfig& ac = c.pipeline.augment;
    if (a.contains("ops")) {
      ac.enabled.clear();
      for (const auto& op : a.at("ops")) ac.enabled.push_back(parse_augment_op(op.get<std::string>()));
    }
    if (a.contains("horizontal_flip_prob")) ac.horizontal_flip_prob = get_as<double>(a, "horizontal_flip_prob", "augment");
    if (a.contains("rotation_max_degrees")) ac.rotation_max_degrees = get_as<double>(a, "rotation_max_degrees", "augment");
    if (a.contains("scale_min")) ac.scale_min = get_as<double>(a, "scale_min", "augment");
    if (a.contains("scale_max")) ac.scale_max = get_as<double>(a, "scale_max", "augment");
    if (a.contains("translate_max")) ac.translate_max = get_as<double>(a, "translate_max", "augment");
    if (a.contains("contrast_max")) ac.contrast_max = get_as<double>(a, "contrast_max", "augment");
    if (a.contains("noise_sigma")) ac.noise_sigma = get_as<double>(a, "noise_sigma", "augment");
    auto pair = [&](const char* key, std::size_t& h, std::size_t& w) {
      if (!a.contains(key)) return;
      const json& v = a.at(key);
      if (!v.is_array() || v.size() != 2) throw std::invalid_argument(std::string("config: augment.") + key + " must be [h, w]");
      h = v[0].get<std::size_t>();
      w = v[1].get<std::size_t>();
    };
    pair("crop_size", ac.crop_height, ac.crop_width);
    pair("load_size", c.pipeline.load_height, c.pipeline.load_width);
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"train", "val", "test", "manifest", "auto_split", "fractions"}, "data");
    c.data.train = d.value("train", "");
    c.data.val = d.value("val", "");
    c.data.test = d.value("test", "");
    c.data.manifest = d.value("manifest", "");
    c.data.auto_split = d.value("auto_split", false);
    if (d.contains("fractions")) {
      const json& f = d.at("fractions");
      if (!f.is_array() || f.size() != 3) throw std::invalid_argument("config: data.fractions must have three entries");
      c.data.fractions = {f[0].get<double>(), f[1].get<double>(), f[2].get<double>()};
    }
  }
  if (j.contains("output")) {
    const json& o = j.at("output");
    check_keys(o, {"root", "tag"}, "output");
    c.output_root = o.value("root", c.output_root);
    c.tag = o.value("tag", c.tag);
  }
  return c;
}

json default_config_json(const std::string& profile) {
  RunConfig c;
  c.profile = profile;
  if (profile == "full") {
    c.network = NetworkConfig::full();
  } else if (profile != "desk") {
    throw std::invalid_argument("unknown profile '" + profile + "' (expected desk or full)");
  }
  c.pipeline.height = c.network.input_height;
  c.pipeline.width = c.network.input_width;
  return c.to_json();
}

RunConfig resolve_config(const ConfigSources& sources) {
  json file = json::object();
  if (sources.file) {
    file = load_toml(*sources.file);
    if (file.contains("data") && file["data"].is_object()) {
      const auto base = std::filesystem::absolute(*sources.file).parent_path();
      for (const char* key : {"train", "val", "test", "manifest"}) {
        json& v = file["data"][key];
        if (v.is_string() && !v.get<std::string>().empty() && std::filesystem::path(v.get<std::string>()).is_relative()) {
          v = (base / v.get<std::string>()).lexically_normal().string();
        } else if (v.is_null()) {
          file["data"].erase(key);
        }
      }
    }
  }
  std::string profile = "desk";
  if (file.contains("profile") && file["profile"].is_string()) profile = file["profile"].get<std::string>();
  for (const auto& [key, value] : sources.overrides) {
    if (key == "profile" && value.is_string()) profile = value.get<std::string>();
  }
  json merged = default_config_json(profile);
  merged.merge_patch(file);
  for (const auto& [key, value] : sources.overrides) set_path(merged, key, value);
  RunConfig c = RunConfig::from_json(merged);
  c.validate();
  return c;
}

}  // namespace sacn
