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

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sacn/tensor.hpp"
#include "json.hpp"

namespace sacn {

/// Thrown when a class has no positives or no negatives.
class UndefinedAuc : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Area under the ROC curve, equal to the Mann-Whitney statistic with tied
/// scores counted as one half. Labels must be 0 or 1. Returns nullopt when
/// either class is empty.
std::optional<double> auc(std::span<const double> scores, std::span<const double> labels);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  /// Scores >= threshold are called positive; +inf for the (0,0) point.
  double threshold = std::numeric_limits<double>::infinity();
};

/// One point per distinct threshold in descending order, starting at (0,0)
/// and ending at (1,1). With drop_intermediate, points lying on the segment
/// between their neighbours are omitted; the area is unchanged.
/// Throws UndefinedAuc for a degenerate class.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const double> labels,
                                bool drop_intermediate = true);

/// Trapezoidal area under a polyline.
double trapezoid_area(const std::vector<RocPoint>& curve);

struct ClassRoc {
  std::string name;
  std::optional<double> auc;  // nullopt for degenerate classes
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::vector<RocPoint> curve;  // empty for degenerate classes
};

struct RocResult {
  std::vector<ClassRoc> classes;
  /// Macro average over the classes with a defined AUC.
  double mean_auc = 0.0;
  std::size_t defined_classes = 0;
};

/// predictions and targets are B x C. Throws ShapeError on mismatched
/// shapes and UndefinedAuc when every class is degenerate.
RocResult evaluate(const Tensor& predictions, const Tensor& targets, const std::vector<std::string>& class_names);

/// Class rows in input order followed by a "Mean AUC" row. Degenerate
/// classes are marked and listed as excluded from the mean.
std::string format_table(const RocResult& result);

/// {"per_class": {name: auc|null}, "mean_auc": x, "mean_over": n, "counts": {...}}
nlohmann::ordered_json to_json(const RocResult& result);

/// class,threshold,fpr,tpr rows for every defined class.
std::string roc_csv(const RocResult& result);

}  // namespace sacn
