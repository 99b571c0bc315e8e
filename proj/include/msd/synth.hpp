#pragma once

// Synthetic vMF data with planted perturbations, and a naive reference EM
// step used as an oracle against the optimized fit.

#include <cmath>
#include <variant>
#include <vector>

#include "msd/rng.hpp"
#include "msd/sphere.hpp"
#include "msd/vmf_mixture.hpp"

namespace msd {

namespace perturb {
struct None {};
/// Rotates mean `index` by `angle` toward a direction orthogonal to every
/// component mean.
struct RotateComponent {
  int index;
  double angle;
};
/// Appends a component with weight `weight`; existing weights scale by (1 - weight).
struct AddComponent {
  Vec<double> mu;
  double weight;
};
struct DropComponent {
  int index;
};
/// Exchanges the mixture weights of components i and j.
struct SwapComponents {
  int i;
  int j;
};
}  // namespace perturb

using Perturbation = std::variant<perturb::None, perturb::RotateComponent, perturb::AddComponent,
                                  perturb::DropComponent, perturb::SwapComponents>;

struct SynthSpec {
  int dim = 0;
  VmfMixtured mixture;  // ground truth; its kappa is the sampling concentration
  int n_samples = 1;
  Perturbation perturbation = perturb::None{};
  RngState seed{};
};

/// `mixture` with `p` applied. RotateComponent draws its target direction from `rng`.
VmfMixtured apply_perturbation(const VmfMixtured& mixture, const Perturbation& p, Engine& rng);

/// Wood's rejection sampler for the cosine to mu, with a uniform tangent direction.
EmbeddingSetd sample_vmf(const UnitVectord& mu, double kappa, int n, Engine& rng,
                         Modality modality = Modality::Text);
EmbeddingSetd sample_vmf(const UnitVectord& mu, double kappa, int n, RngState seed,
                         Modality modality = Modality::Text);

/// Uniformly random unit vector.
UnitVectord random_direction(int dim, Engine& rng);

struct LabeledSample {
  EmbeddingSetd data;
  std::vector<int> labels;
};

LabeledSample sample_mixture(const VmfMixtured& mixture, int n, Engine& rng,
                             Modality modality = Modality::Text);

/// Samples spec.n_samples points from the (perturbed) spec mixture.
LabeledSample sample_mixture(const SynthSpec& spec);

struct PlantedPair {
  EmbeddingSetd img;
  EmbeddingSetd txt_pos;
  EmbeddingSetd txt_neg;
};

/// img (base.n_samples) and txt_pos (n_text) are independent draws from the
/// base mixture; txt_neg (n_text) comes from the perturbed mixture.
PlantedPair planted_pair(const SynthSpec& base, const Perturbation& perturbation, int n_text);

/// One EM iteration written as plain loops over the direct-space E-step and
/// the resultant-direction M-step. No reinitialization, no log-space tricks.
template <typename Scalar>
VmfMixture<Scalar> brute_force_em_step(const RowMat<Scalar>& data, const VmfMixture<Scalar>& mixture) {
  const Index n = data.rows();
  const Index d = data.cols();
  const Index k = mixture.k();
  const Scalar kappa = mixture.kappa();

  std::vector<std::vector<Scalar>> gamma(static_cast<std::size_t>(n), std::vector<Scalar>(static_cast<std::size_t>(k)));
  for (Index i = 0; i < n; ++i) {
    Scalar denom = 0;
    for (Index j = 0; j < k; ++j) {
      Scalar dot = 0;
      for (Index c = 0; c < d; ++c) dot += mixture.means()(j, c) * data(i, c);
      const Scalar term = mixture.weights()[j] * std::exp(kappa * dot);
      gamma[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = term;
      denom += term;
    }
    for (Index j = 0; j < k; ++j) gamma[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] /= denom;
  }

  RowMat<Scalar> means(k, d);
  Vec<Scalar> weights(k);
  for (Index j = 0; j < k; ++j) {
    Scalar count = 0;
    std::vector<Scalar> resultant(static_cast<std::size_t>(d), Scalar(0));
    for (Index i = 0; i < n; ++i) {
      const Scalar g = gamma[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      count += g;
      for (Index c = 0; c < d; ++c) resultant[static_cast<std::size_t>(c)] += g * data(i, c);
    }
    Scalar len2 = 0;
    for (Scalar r : resultant) len2 += r * r;
    const Scalar len = std::sqrt(len2);
    for (Index c = 0; c < d; ++c)
      means(j, c) = len > Scalar(0) ? resultant[static_cast<std::size_t>(c)] / len : mixture.means()(j, c);
    weights[j] = count / Scalar(n);
  }
  return VmfMixture<Scalar>(std::move(means), std::move(weights), kappa);
}

}  // namespace msd
