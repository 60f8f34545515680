#pragma once

namespace coverlab::tolerance {

// Relative tolerance for algebraic identities between estimator forms.
inline constexpr double kIdentityRelative = 1e-12;

// Absolute tolerance for the likelihood factorization log L = log L1 + log L2.
inline constexpr double kLikelihood = 1e-10;

// Relative tolerance for weight conservation in noninterview adjustment.
inline constexpr double kWeightConservation = 1e-9;

// Log-likelihood values closer than this are treated as tied in grid searches.
inline constexpr double kLogLikelihoodTie = 1e-9;

}  // namespace coverlab::tolerance
