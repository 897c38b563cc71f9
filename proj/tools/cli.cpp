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

#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "sacn/config.hpp"
#include "sacn/dataset.hpp"
#include "sacn/gradcheck.hpp"
#include "sacn/labels.hpp"
#include "sacn/manifest.hpp"
#include "sacn/metrics.hpp"
#include "sacn/network.hpp"
#include "sacn/training.hpp"

namespace sacn::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class MissingInput : public std::runtime_error {
 public:
  MissingInput(const std::string& what, const fs::path& path)
      : std::runtime_error(what + " not found: " + path.string()) {}
};

void require_file(const fs::path& path, const std::string& what) {
  if (path.empty() || !fs::exists(path)) throw MissingInput(what, path);
}

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string profile;
  std::string policy;
  std::string views;
  std::vector<std::string> sets;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

std::string absolute_string(const std::string& p) {
  return p.empty() ? p : fs::absolute(p).lexically_normal().string();
}

/// Flags become dotted overrides; `extra` carries command-specific ones.
RunConfig resolve(const Globals& g, std::vector<std::pair<std::string, json>> extra, std::ostream& err) {
  ConfigSources src;
  if (!g.config.empty()) {
    require_file(g.config, "config file");
    src.file = g.config;
  }
  if (!g.profile.empty()) src.overrides.emplace_back("profile", g.profile);
  if (g.seed_opt && g.seed_opt->count()) src.overrides.emplace_back("seed", g.seed);
  if (g.threads_opt && g.threads_opt->count()) src.overrides.emplace_back("threads", g.threads);
  if (!g.policy.empty()) src.overrides.emplace_back("policy", g.policy);
  if (!g.views.empty()) src.overrides.emplace_back("views", g.views);
  for (const std::string& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    const std::string text = s.substr(eq + 1);
    json value;
    try {
      value = parse_toml_value(text);
    } catch (const FormatError&) {
      value = text;  // bare words are taken as strings
    }
    src.overrides.emplace_back(s.substr(0, eq), value);
  }
  for (auto& e : extra) src.overrides.push_back(std::move(e));
  RunConfig c = resolve_config(src);
  if (c.profile == "full") {
    err << "warning: the full profile trains a DenseNet-121-sized network on 224x224 inputs; expect hours per "
           "epoch on a CPU\n";
  }
  return c;
}

std::vector<std::string> canonical_names() {
  std::vector<std::string> names;
  for (auto n : label_names()) names.emplace_back(n);
  return names;
}

std::string utc_stamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path make_run_dir(const RunConfig& c) {
  const char* env = std::getenv("SACN_RUN_DIR");
  const fs::path root = env && *env ? fs::path(env) : fs::path(c.output_root);
  const std::string base = utc_stamp() + "-" + c.tag;
  fs::path dir = root / base;
  for (int k = 1; fs::exists(dir); ++k) dir = root / (base + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

/// Writes to a file, or to `out` when the path is "-".
void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path == "-") {
    out << text;
  } else {
    write_text(path, text);
  }
}

std::vector<ManifestRow> load_rows(const fs::path& path, const std::vector<View>& views) {
  require_file(path, "manifest");
  return filter_views(load_manifest(path), views);
}

/// Checkpoint or plain weight archive -> network.
std::unique_ptr<Network> load_network(const fs::path& path) {
  require_file(path, "checkpoint");
  const Archive archive = load_archive(path);
  if (!archive.manifest.contains("network")) {
    throw FormatError(path.string() + ": archive has no network config");
  }
  auto net = std::make_unique<Network>(Network::build(NetworkConfig::from_json(archive.manifest.at("network")), 0));
  net->import_weights(archive, true);
  return net;
}

std::vector<std::unique_ptr<Network>> load_members(const std::vector<std::string>& paths) {
  std::vector<std::unique_ptr<Network>> nets;
  for (const auto& p : paths) {
    nets.push_back(load_network(p));
    if (!(nets.back()->config() == nets.front()->config())) {
      throw std::invalid_argument("incompatible checkpoint configs: " + p + " differs from " + paths.front());
    }
  }
  return nets;
}

Tensor predict_all(std::vector<std::unique_ptr<Network>>& nets, const Dataset& data, std::size_t batch_size,
                   std::size_t threads) {
  if (nets.size() == 1) return predict_dataset(*nets.front(), data, batch_size, threads);
  std::vector<Network*> members;
  for (auto& n : nets) members.push_back(n.get());
  const std::size_t n = data.size();
  Tensor out({n, kNumLabels});
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor p = ensemble_predict(members, make_batch(data, idx, 0, false, threads).images);
    std::copy_n(p.raw(), p.size(), out.raw() + start * kNumLabels);
  }
  return out;
}

Tensor targets_of(const Dataset& data) {
  Tensor t({data.size(), kNumLabels});
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::copy(data.target(i).begin(), data.target(i).end(), t.raw() + i * kNumLabels);
  }
  return t;
}

PipelineConfig pipeline_for(const NetworkConfig& net) {
  PipelineConfig p;
  p.height = net.input_height;
  p.width = net.input_width;
  return p;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
  std::string train, val, test, manifest, tag;
  bool auto_split = false;
  std::size_t epochs = 0, batch_size = 0, ensemble_size = 0;
  double lr = 0;
};

int cmd_train(const Globals& g, const TrainFlags& f, std::ostream& out, std::ostream& err) {
  std::vector<std::pair<std::string, json>> extra;
  if (!f.train.empty()) extra.emplace_back("data.train", absolute_string(f.train));
  if (!f.val.empty()) extra.emplace_back("data.val", absolute_string(f.val));
  if (!f.test.empty()) extra.emplace_back("data.test", absolute_string(f.test));
  if (!f.manifest.empty()) extra.emplace_back("data.manifest", absolute_string(f.manifest));
  if (f.auto_split) extra.emplace_back("data.auto_split", true);
  if (!f.tag.empty()) extra.emplace_back("output.tag", f.tag);
  if (f.epochs) extra.emplace_back("train.max_epochs", f.epochs);
  if (f.batch_size) extra.emplace_back("train.batch_size", f.batch_size);
  if (f.ensemble_size) extra.emplace_back("train.ensemble_size", f.ensemble_size);
  if (f.lr > 0) extra.emplace_back("train.lr", f.lr);
  const RunConfig c = resolve(g, std::move(extra), err);

  fs::path train_path, val_path, test_path;
  std::vector<ManifestRow> train_rows, val_rows, test_rows;
  if (c.data.auto_split) {
    if (c.data.manifest.empty()) throw std::invalid_argument("auto_split needs data.manifest (--manifest)");
    const Split s = patient_split(load_rows(c.data.manifest, c.views), c.data.fractions, c.seed);
    train_path = val_path = test_path = c.data.manifest;
    train_rows = s.train;
    val_rows = s.val;
    test_rows = s.test;
  } else {
    if (c.data.train.empty() || c.data.val.empty()) {
      throw std::invalid_argument("train needs data.train and data.val (--train/--val), or --auto-split");
    }
    train_path = c.data.train;
    val_path = c.data.val;
    train_rows = load_rows(train_path, c.views);
    val_rows = load_rows(val_path, c.views);
    if (!c.data.test.empty()) {
      test_path = c.data.test;
      test_rows = load_rows(test_path, c.views);
    }
  }

  const ManifestDataset train_set(train_path, train_rows, c.policy, c.pipeline, c.seed);
  const ManifestDataset val_set(val_path, val_rows, c.policy, c.pipeline, c.seed);
  if (train_set.size() == 0 || val_set.size() == 0) {
    throw std::invalid_argument("no usable training or validation rows after filtering and label policy");
  }

  const fs::path run_dir = make_run_dir(c);
  write_text(run_dir / "config.toml", to_toml(c.to_json()));
  if (c.data.auto_split) {
    fs::create_directories(run_dir / "splits");
    auto absolute_rows = [&](std::vector<ManifestRow> rows) {
      for (auto& r : rows) r.path = resolve_image_path(c.data.manifest, r).string();
      return rows;
    };
    save_manifest(run_dir / "splits" / "train.csv", absolute_rows(train_rows));
    save_manifest(run_dir / "splits" / "val.csv", absolute_rows(val_rows));
    save_manifest(run_dir / "splits" / "test.csv", absolute_rows(test_rows));
  }
  err << "run directory: " << run_dir.string() << "\n"
      << "training on " << train_set.size() << " images (" << train_set.dropped() << " dropped), validating on "
      << val_set.size() << "\n";

  Network net = Network::build(c.network, c.seed);
  TrainOptions opts;
  opts.run_dir = run_dir;
  opts.on_epoch = [&err](const LogRecord& r, Network&) {
    err << "epoch " << r.epoch << "  loss " << r.loss << "  lr " << r.lr << "  val mean AUC "
        << r.val_mean_auc.value_or(0.0) << "\n";
    return false;
  };
  const TrainResult result = train(net, train_set, val_set, c.train, opts);

  // Score the best-K ensemble on the test split when there is one.
  std::vector<std::unique_ptr<Network>> members;
  json files = json::array();
  for (const Checkpoint& ck : result.best) {
    members.push_back(std::make_unique<Network>(restore_network(ck)));
    char name[32];
    std::snprintf(name, sizeof name, "epoch-%04zu.sack", ck.epoch);
    files.push_back(std::string("checkpoints/") + name);
  }
  const bool on_test = !test_rows.empty();
  const ManifestDataset eval_set(on_test ? test_path : val_path, on_test ? test_rows : val_rows, c.policy, c.pipeline,
                                 c.seed);
  nlohmann::ordered_json metrics;
  metrics["evaluated_on"] = on_test ? "test" : "val";
  metrics["checkpoints"] = files;
  try {
    const RocResult roc =
        evaluate(predict_all(members, eval_set, c.train.batch_size, c.threads), targets_of(eval_set), canonical_names());
    const nlohmann::ordered_json summary = to_json(roc);
    for (auto it = summary.begin(); it != summary.end(); ++it) metrics[it.key()] = *it;
    out << format_table(roc);
  } catch (const UndefinedAuc& e) {
    metrics["error"] = e.what();
    err << "warning: " << e.what() << "\n";
  }
  write_text(run_dir / "metrics.json", metrics.dump(2) + "\n");
  out << run_dir.string() << "\n";
  return kExitOk;
}

struct EvalFlags {
  std::vector<std::string> checkpoints;
  std::string manifest;
  std::string json_path;
  std::string roc_path;
};

int cmd_eval(const Globals& g, const EvalFlags& f, std::ostream& out, std::ostream& err) {
  const RunConfig c = resolve(g, {}, err);
  auto nets = load_members(f.checkpoints);
  const auto rows = load_rows(f.manifest, c.views);
  const ManifestDataset data(f.manifest, rows, c.policy, pipeline_for(nets.front()->config()), c.seed);
  if (data.size() == 0) throw std::invalid_argument("no rows to evaluate after filtering and label policy");
  const RocResult roc =
      evaluate(predict_all(nets, data, c.train.batch_size, c.threads), targets_of(data), canonical_names());
  out << format_table(roc);
  if (!f.json_path.empty()) emit(f.json_path, to_json(roc).dump(2) + "\n", out);
  if (!f.roc_path.empty()) emit(f.roc_path, roc_csv(roc), out);
  return kExitOk;
}

struct PredictFlags {
  std::vector<std::string> checkpoints;
  std::string manifest;
  std::vector<std::string> images;
  std::string out_path = "-";
};

int cmd_predict(const Globals& g, const PredictFlags& f, std::ostream& out, std::ostream& err) {
  const RunConfig c = resolve(g, {}, err);
  auto nets = load_members(f.checkpoints);
  std::vector<Tensor> images;
  std::vector<std::string> names;
  const PipelineConfig pipe = pipeline_for(nets.front()->config());
  if (!f.manifest.empty()) {
    for (const ManifestRow& r : load_rows(f.manifest, c.views)) {
      const fs::path p = resolve_image_path(f.manifest, r);
      require_file(p, "image");
      images.push_back(eval_transform(p, pipe));
      names.push_back(r.path);
    }
  }
  for (const std::string& p : f.images) {
    require_file(p, "image");
    images.push_back(eval_transform(p, pipe));
    names.push_back(p);
  }
  if (images.empty()) throw std::invalid_argument("predict needs --manifest or image paths");
  const InMemoryDataset data(std::move(images), std::vector<BinaryLabels>(names.size(), BinaryLabels{}));
  const Tensor probs = predict_all(nets, data, c.train.batch_size, c.threads);

  std::ostringstream csv;
  csv << "path";
  for (auto n : label_names()) csv << ',' << csv_escape(n);
  csv << '\n';
  char buf[32];
  for (std::size_t i = 0; i < names.size(); ++i) {
    csv << csv_escape(names[i]);
    for (std::size_t k = 0; k < kNumLabels; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", probs.at(i, k));
      csv << ',' << buf;
    }
    csv << '\n';
  }
  emit(f.out_path, csv.str(), out);
  return kExitOk;
}

struct LabelFlags {
  std::string input;
  std::string rules;
  std::string sections = "findings+impression";
  std::string out_path = "-";
};

int cmd_label_reports(const LabelFlags& f, std::ostream& out) {
  require_file(f.input, "input");
  Lexicon custom;
  if (!f.rules.empty()) {
    require_file(f.rules, "rules file");
    custom = Lexicon::load(f.rules);
  }
  const Lexicon& lexicon = f.rules.empty() ? Lexicon::builtin() : custom;
  const ReportSections sections = parse_sections(f.sections);

  auto read_all = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  std::vector<std::pair<std::string, std::string>> reports;  // id, text
  const fs::path input(f.input);
  if (fs::is_directory(input)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(input)) {
      if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) reports.emplace_back(p.stem().string(), read_all(p));
  } else if (input.extension() == ".csv") {
    std::ifstream in(input, std::ios::binary);
    const auto table = parse_csv(in);
    if (table.empty()) throw FormatError(input.string() + ": empty CSV");
    const auto& header = table.front();
    auto column = [&](std::initializer_list<const char*> names) -> std::optional<std::size_t> {
      for (const char* n : names) {
        for (std::size_t i = 0; i < header.size(); ++i) {
          std::string h = header[i];
          std::transform(h.begin(), h.end(), h.begin(), ::tolower);
          if (h == n) return i;
        }
      }
      return std::nullopt;
    };
    const auto text_col = column({"report", "text"});
    if (!text_col) throw FormatError(input.string() + ": no 'report' column");
    const auto id_col = column({"id", "study_id", "study", "path"});
    for (std::size_t r = 1; r < table.size(); ++r) {
      const auto& row = table[r];
      if (row.size() != header.size()) {
        throw FormatError(input.string() + ": row " + std::to_string(r + 1) + " has " + std::to_string(row.size()) +
                          " fields, header has " + std::to_string(header.size()));
      }
      reports.emplace_back(id_col ? row[*id_col] : std::to_string(r), row[*text_col]);
    }
  } else {
    reports.emplace_back(input.stem().string(), read_all(input));
  }

  std::ostringstream csv;
  csv << "id";
  for (auto n : label_names()) csv << ',' << csv_escape(n);
  csv << '\n';
  for (const auto& [id, text] : reports) {
    const LabelVector labels = label_report(text, lexicon, sections);
    csv << csv_escape(id);
    for (LabelState s : labels) csv << ',' << format_label_cell(s);
    csv << '\n';
  }
  emit(f.out_path, csv.str(), out);
  return kExitOk;
}

struct SplitFlags {
  std::string manifest;
  std::string fractions;
  std::string out_dir;
  std::string prefix;
};

int cmd_split(const Globals& g, const SplitFlags& f, std::ostream& out, std::ostream& err) {
  std::vector<std::pair<std::string, json>> extra;
  if (!f.fractions.empty()) {
    json list = json::array();
    std::stringstream ss(f.fractions);
    std::string part;
    while (std::getline(ss, part, ',')) list.push_back(std::stod(part));
    extra.emplace_back("data.fractions", list);
  }
  const RunConfig c = resolve(g, std::move(extra), err);
  const fs::path manifest(f.manifest);
  const auto rows = load_rows(manifest, c.views);
  const Split s = patient_split(rows, c.data.fractions, c.seed);
  const fs::path dir = f.out_dir.empty() ? fs::absolute(manifest).parent_path() : fs::path(f.out_dir);
  fs::create_directories(dir);
  const std::string prefix = f.prefix.empty() ? manifest.stem().string() : f.prefix;
  const std::pair<const char*, const std::vector<ManifestRow>*> parts[] = {
      {"train", &s.train}, {"val", &s.val}, {"test", &s.test}};
  for (const auto& [name, part] : parts) {
    const fs::path p = dir / (prefix + "-" + name + ".csv");
    save_manifest(p, *part);
    std::set<std::string> patients;
    for (const auto& r : *part) patients.insert(r.patient_id);
    out << name << ": " << part->size() << " rows, " << patients.size() << " patients -> " << p.string() << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(const Globals& g, const std::string& scope, std::size_t seeds, std::ostream& out,
                  std::ostream& err) {
  const RunConfig c = resolve(g, {}, err);
  const auto results = run_gradcheck(parse_gradcheck_scope(scope), c.seed, seeds);
  bool ok = true;
  char line[160];
  std::snprintf(line, sizeof line, "%-18s %12s %10s %8s  %s\n", "check", "max rel err", "threshold", "checked",
                "result");
  out << line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-18s %12.3e %10.0e %8zu  %s\n", r.name.c_str(), r.max_rel, r.threshold,
                  r.checked, r.passed() ? "PASS" : "FAIL");
    out << line;
    ok = ok && r.passed();
  }
  return ok ? kExitOk : kExitError;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-augmented DenseNet toolkit for multi-label chest X-ray classification", "sacn"};
  app.require_subcommand(1);

  Globals g;
  app.add_option("--config", g.config, "TOML config file");
  g.seed_opt = app.add_option("--seed", g.seed, "Random seed");
  g.threads_opt = app.add_option("--threads", g.threads, "Worker threads for image loading");
  app.add_option("--profile", g.profile, "desk (default) or full");
  app.add_option("--policy", g.policy, "Uncertain-label policy: u-ones, u-zeros or u-ignore");
  app.add_option("--views", g.views, "all, or a comma list of frontal, lateral, unknown");
  app.add_option("--set", g.sets, "Override any config key, e.g. --set train.lr=1e-3");

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train a network and keep the best checkpoints");
  train_cmd->add_option("--train", tf.train, "Training manifest CSV");
  train_cmd->add_option("--val", tf.val, "Validation manifest CSV");
  train_cmd->add_option("--test", tf.test, "Test manifest CSV, scored by the final ensemble");
  train_cmd->add_option("--manifest", tf.manifest, "Unsplit manifest for --auto-split");
  train_cmd->add_flag("--auto-split", tf.auto_split, "Split --manifest by patient");
  train_cmd->add_option("--epochs", tf.epochs, "Maximum epochs");
  train_cmd->add_option("--batch-size", tf.batch_size, "Minibatch size");
  train_cmd->add_option("--lr", tf.lr, "Initial learning rate");
  train_cmd->add_option("--ensemble-size", tf.ensemble_size, "Best checkpoints to keep");
  train_cmd->add_option("--tag", tf.tag, "Run directory suffix");

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "Score checkpoints (one, or an ensemble) on a manifest");
  eval_cmd->add_option("checkpoints", ef.checkpoints, "Checkpoint files")->required();
  eval_cmd->add_option("--manifest", ef.manifest, "Manifest CSV with labels")->required();
  eval_cmd->add_option("--json", ef.json_path, "Write metrics JSON here ('-' for stdout)");
  eval_cmd->add_option("--roc", ef.roc_path, "Write ROC points as CSV here ('-' for stdout)");

  PredictFlags pf;
  auto* predict_cmd = app.add_subcommand("predict", "Per-class probabilities for images");
  predict_cmd->add_option("checkpoints", pf.checkpoints, "Checkpoint files")->required();
  predict_cmd->add_option("--manifest", pf.manifest, "Manifest CSV of images");
  predict_cmd->add_option("--image", pf.images, "Image file (repeatable)");
  predict_cmd->add_option("--out", pf.out_path, "Output CSV ('-' for stdout)");

  LabelFlags lf;
  auto* label_cmd = app.add_subcommand("label-reports", "Label free-text reports with the rule-based labeler");
  label_cmd->add_option("input", lf.input, "Report .txt, directory of .txt files, or CSV with a report column")
      ->required();
  label_cmd->add_option("--rules", lf.rules, "Lexicon file replacing the built-in rules");
  label_cmd->add_option("--sections", lf.sections, "impression, findings+impression or all");
  label_cmd->add_option("--out", lf.out_path, "Output CSV ('-' for stdout)");

  SplitFlags sf;
  auto* split_cmd = app.add_subcommand("split", "Patient-wise train/val/test split of a manifest");
  split_cmd->add_option("manifest", sf.manifest, "Manifest CSV")->required();
  split_cmd->add_option("--fractions", sf.fractions, "train,val,test fractions (default 0.7,0.1,0.2)");
  split_cmd->add_option("--out-dir", sf.out_dir, "Output directory (default: beside the manifest)");
  split_cmd->add_option("--prefix", sf.prefix, "Output file prefix (default: manifest name)");

  std::string scope = "all";
  std::size_t seeds = 1;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and a small network");
  grad_cmd->add_option("--scope", scope, "ops, network or all");
  grad_cmd->add_option("--seeds", seeds, "Number of consecutive seeds");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (train_cmd->parsed()) return cmd_train(g, tf, out, err);
    if (eval_cmd->parsed()) return cmd_eval(g, ef, out, err);
    if (predict_cmd->parsed()) return cmd_predict(g, pf, out, err);
    if (label_cmd->parsed()) return cmd_label_reports(lf, out);
    if (split_cmd->parsed()) return cmd_split(g, sf, out, err);
    if (grad_cmd->parsed()) return cmd_gradcheck(g, scope, seeds, out, err);
  } catch (const MissingInput& e) {
    err << "error: " << e.what() << "\n";
    return kExitMissingInput;
  } catch (const TrainingAborted& e) {
    err << "error: " << e.what() << "\n";
    return kExitAborted;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}

}  // namespace sacn::cli
