#include "msd/vmf_mixture.hpp"

#include <map>
#include <utility>

namespace msd {

double kappa_hat(double r_bar, int dim) {
  if (!(r_bar > 0.0 && r_bar < 1.0))
    fail(ErrorCode::OutOfRange, "mean resultant length must lie in (0, 1)");
  if (dim < 1) fail(ErrorCode::OutOfRange, "dimension must be positive");
  const double d = dim;
  return (r_bar * d - r_bar * r_bar * r_bar) / (1.0 - r_bar * r_bar);
}

namespace {

double pairs(double n) { return n * (n - 1.0) / 2.0; }

}  // namespace

double clustering_ari(std::span<const int> labels_a, std::span<const int> labels_b) {
  if (labels_a.size() != labels_b.size())
    fail(ErrorCode::LengthMismatch, "labelings have different lengths");
  if (labels_a.size() < 2) fail(ErrorCode::LengthMismatch, "ARI needs at least two items");

  std::map<std::pair<int, int>, long> joint;
  std::map<int, long> rows;
  std::map<int, long> cols;
  for (std::size_t i = 0; i < labels_a.size(); ++i) {
    ++joint[{labels_a[i], labels_b[i]}];
    ++rows[labels_a[i]];
    ++cols[labels_b[i]];
  }
  double index = 0.0;
  for (const auto& [cell, n] : joint) index += pairs(double(n));
  double sum_a = 0.0;
  for (const auto& [label, n] : rows) sum_a += pairs(double(n));
  double sum_b = 0.0;
  for (const auto& [label, n] : cols) sum_b += pairs(double(n));

  const double expected = sum_a * sum_b / pairs(double(labels_a.size()));
  const double max_index = 0.5 * (sum_a + sum_b);
  // Only reachable when both labelings are a single cluster or both are all
  // singletons, i.e. they agree perfectly.
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace msd
