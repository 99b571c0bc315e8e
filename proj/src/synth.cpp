#include "msd/synth.hpp"

#include <algorithm>
#include <random>

namespace msd {

namespace {

Vec<double> gaussian_vector(int dim, Engine& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec<double> v(dim);
  for (int i = 0; i < dim; ++i) v[i] = normal(rng);
  return v;
}

/// One vMF draw around `mu` (unit, dimension D).
Vec<double> draw_vmf(const Vec<double>& mu, double kappa, Engine& rng) {
  const int dim = static_cast<int>(mu.size());
  const double dm1 = dim - 1.0;
  const double b = dm1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dm1 * dm1));
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + dm1 * std::log(1.0 - x0 * x0);

  std::gamma_distribution<double> gamma(dm1 / 2.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double w = 0.0, one_minus_w = 0.0;
  for (;;) {
    const double ga = gamma(rng);
    const double gb = gamma(rng);
    const double z = ga / (ga + gb);
    const double denom = 1.0 - (1.0 - b) * z;
    w = (1.0 - (1.0 + b) * z) / denom;
    one_minus_w = 2.0 * b * z / denom;
    const double u = unif(rng);
    if (kappa * w + dm1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
  }

  Vec<double> tangent = gaussian_vector(dim, rng);
  tangent -= tangent.dot(mu) * mu;
  double len = tangent.norm();
  while (!(len > 1e-12)) {
    tangent = gaussian_vector(dim, rng);
    tangent -= tangent.dot(mu) * mu;
    len = tangent.norm();
  }
  tangent /= len;
  const double s = std::sqrt(std::max(0.0, one_minus_w * (1.0 + w)));
  Vec<double> x = w * mu + s * tangent;
  return x / x.norm();
}

void check_index(int index, Index k, const char* what) {
  if (index < 0 || index >= k) fail(ErrorCode::OutOfRange, std::string(what) + " index out of range");
}

}  // namespace

UnitVectord random_direction(int dim, Engine& rng) {
  for (;;) {
    const Vec<double> v = gaussian_vector(dim, rng);
    if (v.norm() > 1e-12) return UnitVectord(v);
  }
}

EmbeddingSetd sample_vmf(const UnitVectord& mu, double kappa, int n, Engine& rng, Modality modality) {
  if (n < 1) fail(ErrorCode::OutOfRange, "sample count must be >= 1");
  if (!(kappa > 0.0)) fail(ErrorCode::OutOfRange, "kappa must be > 0");
  RowMat<double> rows(n, mu.dim());
  for (int i = 0; i < n; ++i) rows.row(i) = draw_vmf(mu.vec(), kappa, rng).transpose();
  return EmbeddingSetd(std::move(rows), modality);
}

EmbeddingSetd sample_vmf(const UnitVectord& mu, double kappa, int n, RngState seed, Modality modality) {
  Engine rng = make_engine(seed);
  return sample_vmf(mu, kappa, n, rng, modality);
}

VmfMixtured apply_perturbation(const VmfMixtured& mixture, const Perturbation& p, Engine& rng) {
  RowMat<double> means = mixture.means();
  Vec<double> weights = mixture.weights();
  const Index k = mixture.k();

  if (const auto* rot = std::get_if<perturb::RotateComponent>(&p)) {
    check_index(rot->index, k, "rotate");
    if (!(rot->angle >= 0.0 && rot->angle <= M_PI)) fail(ErrorCode::OutOfRange, "rotation angle outside [0, pi]");
    if (mixture.dim() <= k) fail(ErrorCode::DimMismatch, "no direction orthogonal to all means");
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(means.transpose());
    const Eigen::MatrixXd basis = qr.householderQ() * Eigen::MatrixXd::Identity(mixture.dim(), k);
    Vec<double> dir;
    do {
      dir = gaussian_vector(static_cast<int>(mixture.dim()), rng);
      dir -= basis * (basis.transpose() * dir);
    } while (!(dir.norm() > 1e-9));
    dir.normalize();
    means.row(rot->index) =
        std::cos(rot->angle) * means.row(rot->index) + std::sin(rot->angle) * dir.transpose();
  } else if (const auto* add = std::get_if<perturb::AddComponent>(&p)) {
    if (add->mu.size() != mixture.dim()) fail(ErrorCode::DimMismatch, "added component has wrong D");
    if (!(add->weight > 0.0 && add->weight < 1.0)) fail(ErrorCode::OutOfRange, "added weight outside (0, 1)");
    means.conservativeResize(k + 1, Eigen::NoChange);
    means.row(k) = UnitVectord(add->mu).vec().transpose();
    weights *= (1.0 - add->weight);
    weights.conservativeResize(k + 1);
    weights[k] = add->weight;
  } else if (const auto* drop = std::get_if<perturb::DropComponent>(&p)) {
    check_index(drop->index, k, "drop");
    if (k < 2) fail(ErrorCode::OutOfRange, "cannot drop the only component");
    RowMat<double> kept(k - 1, mixture.dim());
    Vec<double> kept_w(k - 1);
    for (Index j = 0, r = 0; j < k; ++j) {
      if (j == drop->index) continue;
      kept.row(r) = means.row(j);
      kept_w[r++] = weights[j];
    }
    if (!(kept_w.sum() > 0.0)) fail(ErrorCode::OutOfRange, "dropping leaves no mass");
    means = std::move(kept);
    weights = kept_w / kept_w.sum();
  } else if (const auto* swap = std::get_if<perturb::SwapComponents>(&p)) {
    check_index(swap->i, k, "swap");
    check_index(swap->j, k, "swap");
    std::swap(weights[swap->i], weights[swap->j]);
  }
  return VmfMixtured(std::move(means), std::move(weights), mixture.kappa());
}

LabeledSample sample_mixture(const VmfMixtured& mixture, int n, Engine& rng, Modality modality) {
  if (n < 1) fail(ErrorCode::OutOfRange, "sample count must be >= 1");
  std::discrete_distribution<int> pick(mixture.weights().data(), mixture.weights().data() + mixture.k());
  RowMat<double> rows(n, mixture.dim());
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int comp = pick(rng);
    labels[static_cast<std::size_t>(i)] = comp;
    rows.row(i) = draw_vmf(mixture.means().row(comp).transpose(), mixture.kappa(), rng).transpose();
  }
  return {EmbeddingSetd(std::move(rows), modality), std::move(labels)};
}

LabeledSample sample_mixture(const SynthSpec& spec) {
  if (spec.dim != spec.mixture.dim()) fail(ErrorCode::DimMismatch, "spec dim differs from mixture");
  Engine rng = make_engine(spec.seed);
  const VmfMixtured truth = apply_perturbation(spec.mixture, spec.perturbation, rng);
  return sample_mixture(truth, spec.n_samples, rng);
}

PlantedPair planted_pair(const SynthSpec& base, const Perturbation& perturbation, int n_text) {
  if (base.dim != base.mixture.dim()) fail(ErrorCode::DimMismatch, "spec dim differs from mixture");
  // Independent sub-streams: img and txt_pos do not depend on the perturbation.
  Engine img_rng = make_engine(derive_seed(base.seed, "img"));
  Engine pos_rng = make_engine(derive_seed(base.seed, "txt_pos"));
  Engine neg_rng = make_engine(derive_seed(base.seed, "txt_neg"));
  Engine perturb_rng = make_engine(derive_seed(base.seed, "perturb"));
  const VmfMixtured negative = apply_perturbation(base.mixture, perturbation, perturb_rng);
  return {sample_mixture(base.mixture, base.n_samples, img_rng, Modality::Image).data,
          sample_mixture(base.mixture, n_text, pos_rng).data, sample_mixture(negative, n_text, neg_rng).data};
}

}  // namespace msd
