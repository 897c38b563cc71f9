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

#include "sacn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace sacn {

namespace {

struct Group {
  double score;
  std::uint64_t positives;
  std::uint64_t negatives;
};

// Distinct scores in descending order with their class counts.
std::vector<Group> tie_groups(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("auc: " + std::to_string(scores.size()) + " scores but " + std::to_string(labels.size()) +
                     " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw std::invalid_argument("auc: NaN score at index " + std::to_string(i));
    if (labels[i] != 0.0 && labels[i] != 1.0) {
      throw std::invalid_argument("auc: label at index " + std::to_string(i) + " is not 0 or 1");
    }
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<Group> groups;
  for (std::size_t i : order) {
    if (groups.empty() || groups.back().score != scores[i]) groups.push_back({scores[i], 0, 0});
    (labels[i] == 1.0 ? groups.back().positives : groups.back().negatives) += 1;
  }
  return groups;
}

}  // namespace

std::optional<double> auc(std::span<const double> scores, std::span<const double> labels) {
  const auto groups = tie_groups(scores, labels);
  std::uint64_t p = 0, n = 0;
  for (const Group& g : groups) {
    p += g.positives;
    n += g.negatives;
  }
  if (p == 0 || n == 0) return std::nullopt;
  // Twice the trapezoid area in count units: each group adds a trapezoid of
  // width dn and heights tp_prev, tp_prev + dp.
  std::uint64_t twice_area = 0, tp = 0;
  for (const Group& g : groups) {
    twice_area += g.negatives * (2 * tp + g.positives);
    tp += g.positives;
  }
  return static_cast<double>(twice_area) / (2.0 * static_cast<double>(p) * static_cast<double>(n));
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const double> labels,
                                bool drop_intermediate) {
  const auto groups = tie_groups(scores, labels);
  std::uint64_t p = 0, n = 0;
  for (const Group& g : groups) {
    p += g.positives;
    n += g.negatives;
  }
  if (p == 0 || n == 0) {
    throw UndefinedAuc("roc_curve: need at least one positive and one negative (got " + std::to_string(p) +
                       " positives, " + std::to_string(n) + " negatives)");
  }
  struct Count {
    std::uint64_t fp, tp;
    double threshold;
  };
  std::vector<Count> counts{{0, 0, std::numeric_limits<double>::infinity()}};
  std::uint64_t fp = 0, tp = 0;
  for (const Group& g : groups) {
    fp += g.negatives;
    tp += g.positives;
    counts.push_back({fp, tp, g.score});
  }
  if (drop_intermediate && counts.size() > 2) {
    std::vector<Count> kept{counts.front()};
    for (std::size_t i = 1; i + 1 < counts.size(); ++i) {
      const Count& a = kept.back();
      const Count& b = counts[i];
      const Count& c = counts[i + 1];
      // Exact collinearity in integer counts.
      const bool collinear = (b.fp - a.fp) * (c.tp - b.tp) == (b.tp - a.tp) * (c.fp - b.fp);
      if (!collinear) kept.push_back(b);
    }
    kept.push_back(counts.back());
    counts = std::move(kept);
  }
  std::vector<RocPoint> out;
  out.reserve(counts.size());
  for (const Count& c : counts) {
    out.push_back({static_cast<double>(c.fp) / static_cast<double>(n), static_cast<double>(c.tp) / static_cast<double>(p),
                   c.threshold});
  }
  return out;
}

double trapezoid_area(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  }
  return area;
}

RocResult evaluate(const Tensor& predictions, const Tensor& targets, const std::vector<std::string>& class_names) {
  if (predictions.rank() != 2 || !predictions.same_shape(targets)) {
    throw ShapeError("evaluate: predictions " + to_string(predictions.shape()) + " and targets " +
                     to_string(targets.shape()) + " must both be B x C");
  }
  const std::size_t rows = predictions.dim(0), cols = predictions.dim(1);
  if (class_names.size() != cols) {
    throw ShapeError("evaluate: " + std::to_string(class_names.size()) + " class names for " + std::to_string(cols) +
                     " columns");
  }
  RocResult result;
  double total = 0.0;
  std::vector<double> s(rows), y(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t r = 0; r < rows; ++r) {
      s[r] = predictions.at(r, c);
      y[r] = targets.at(r, c);
    }
    ClassRoc cls;
    cls.name = class_names[c];
    cls.positives = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1.0));
    cls.negatives = rows - cls.positives;
    cls.auc = auc(s, y);
    if (cls.auc) {
      cls.curve = roc_curve(s, y);
      total += *cls.auc;
      ++result.defined_classes;
    }
    result.classes.push_back(std::move(cls));
  }
  if (result.defined_classes == 0) {
    throw UndefinedAuc("evaluate: every class lacks positives or negatives");
  }
  result.mean_auc = total / static_cast<double>(result.defined_classes);
  return result;
}

std::string format_table(const RocResult& result) {
  std::size_t width = std::string("Mean AUC").size();
  for (const ClassRoc& c : result.classes) width = std::max(width, c.name.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "Class" << "  " << std::right << std::setw(8) << "AUC"
      << std::setw(8) << "pos" << std::setw(8) << "neg" << "\n";
  out << std::string(width + 26, '-') << "\n";
  std::vector<std::string> excluded;
  for (const ClassRoc& c : result.classes) {
    out << std::left << std::setw(static_cast<int>(width)) << c.name << "  " << std::right << std::setw(8);
    if (c.auc) {
      out << std::fixed << std::setprecision(4) << *c.auc;
    } else {
      out << "n/a*";
      excluded.push_back(c.name);
    }
    out << std::setw(8) << c.positives << std::setw(8) << c.negatives << "\n";
  }
  out << std::string(width + 26, '-') << "\n";
  out << std::left << std::setw(static_cast<int>(width)) << "Mean AUC" << "  " << std::right << std::setw(8)
      << std::fixed << std::setprecision(4) << result.mean_auc << "\n";
  if (!excluded.empty()) {
    out << "* no positives or no negatives; excluded from the mean (" << result.defined_classes << " of "
        << result.classes.size() << " classes averaged)\n";
  }
  return out.str();
}

nlohmann::ordered_json to_json(const RocResult& result) {
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  nlohmann::ordered_json counts = nlohmann::ordered_json::object();
  for (const ClassRoc& c : result.classes) {
    per_class[c.name] = c.auc ? nlohmann::ordered_json(*c.auc) : nlohmann::ordered_json(nullptr);
    counts[c.name] = {{"positives", c.positives}, {"negatives", c.negatives}};
  }
  nlohmann::ordered_json j;
  j["per_class"] = std::move(per_class);
  j["mean_auc"] = result.mean_auc;
  j["mean_over"] = result.defined_classes;
  j["counts"] = std::move(counts);
  return j;
}

std::string roc_csv(const RocResult& result) {
  std::ostringstream out;
  out << std::setprecision(17) << "class,threshold,fpr,tpr\n";
  for (const ClassRoc& c : result.classes) {
    for (const RocPoint& p : c.curve) {
      out << '"' << c.name << "\"," << (std::isinf(p.threshold) ? std::string("inf") : [&] {
        std::ostringstream t;
        t << std::setprecision(17) << p.threshold;
        return t.str();
      }()) << ',' << p.fpr << ',' << p.tpr << "\n";
    }
  }
  return out.str();
}

}  // namespace sacn
