#pragma once

// Flat LCDM expansion history and the comoving kick-drift-kick leapfrog.
//
// Momentum convention: p = a^2 dx/dt. Equations of motion in internal units
//   dx/dt = p / a^2,   dp/dt = g / a
// where g is the comoving peculiar acceleration (G = rho_bar = 1). Time is in
// internal units, in which H0 = sqrt(8 pi / (3 omega0)).

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "treegrid/domain.hpp"

namespace treegrid {

struct ScaleFactorState {
  double a = 1.0;
  double z = 0.0;

  static ScaleFactorState from_a(double a);
  static ScaleFactorState from_z(double z);
};

/// H(a)/H0 for a flat universe.
inline double hubble_rate(double a, const CosmologyParams& cosmo) {
  if (!(a > 0.0)) throw InvalidInput("scale factor must be positive");
  return std::sqrt(cosmo.omega0 / (a * a * a) + cosmo.lambda0);
}

inline double a_of_z(double z) {
  if (!(z > -1.0)) throw InvalidInput("redshift must exceed -1");
  return 1.0 / (1.0 + z);
}

inline double z_of_a(double a) {
  if (!(a > 0.0)) throw InvalidInput("scale factor must be positive");
  return 1.0 / a - 1.0;
}

inline ScaleFactorState ScaleFactorState::from_a(double a) {
  if (!(a > 0.0 && a <= 1.0)) throw InvalidInput("scale factor must lie in (0, 1]");
  return {a, z_of_a(a)};
}

inline ScaleFactorState ScaleFactorState::from_z(double z) {
  const double a = a_of_z(z);
  if (a > 1.0) throw InvalidInput("scale factor must lie in (0, 1]");
  return {a, z};
}

/// Hubble constant expressed in internal time units.
inline double internal_h0(const CosmologyParams& cosmo) {
  return std::sqrt(8.0 * std::numbers::pi / (3.0 * cosmo.omega0));
}

struct StepCoefficients {
  double drift = 0.0;  // integral of dt / a^2
  double kick = 0.0;   // integral of dt / a
};

namespace detail {

// 4-point Gauss-Legendre nodes/weights on [-1, 1].
inline constexpr std::array<double, 4> kGlNodes = {
    -0.8611363115940526, -0.3399810435848563, 0.3399810435848563, 0.8611363115940526};
inline constexpr std::array<double, 4> kGlWeights = {
    0.3478548451374538, 0.6521451548625461, 0.6521451548625461, 0.3478548451374538};
inline constexpr int kPanels = 16;  // 16 panels x 4 nodes = 64 evaluations

}  // namespace detail

/// Leapfrog coefficients over [a_start, a_end], integrated in ln(a) with a
/// 64-point composite Gauss-Legendre rule.
inline StepCoefficients step_coefficients(double a_start, double a_end,
                                          const CosmologyParams& cosmo) {
  if (!(a_start > 0.0) || !(a_end <= 1.0)) throw InvalidInput("scale factors must lie in (0, 1]");
  if (a_end < a_start) throw InvalidInput("inverted scale-factor interval");
  StepCoefficients out;
  if (a_end == a_start) return out;

  const double h0 = internal_h0(cosmo);
  const double u0 = std::log(a_start);
  const double u1 = std::log(a_end);
  const double panel = (u1 - u0) / detail::kPanels;
  for (int p = 0; p < detail::kPanels; ++p) {
    const double mid = u0 + (p + 0.5) * panel;
    for (std::size_t k = 0; k < detail::kGlNodes.size(); ++k) {
      const double u = mid + 0.5 * panel * detail::kGlNodes[k];
      const double a = std::exp(u);
      // dt = da / (a H) = du / H
      const double dt_du = 1.0 / (h0 * hubble_rate(a, cosmo));
      const double w = 0.5 * panel * detail::kGlWeights[k] * dt_du;
      out.drift += w / (a * a);
      out.kick += w / a;
    }
  }
  return out;
}

/// Coefficients with the expansion switched off (a = 1, fixed dt).
inline StepCoefficients frozen_step_coefficients(double dt) { return {dt, dt}; }

/// n_steps + 1 scale factors equally spaced in ln(a).
inline std::vector<double> log_a_schedule(double a_begin, double a_end, std::size_t n_steps) {
  if (!(a_begin > 0.0) || !(a_end > 0.0)) throw InvalidInput("scale factors must be positive");
  std::vector<double> a(n_steps + 1);
  const double l0 = std::log(a_begin);
  const double l1 = std::log(a_end);
  for (std::size_t i = 0; i <= n_steps; ++i)
    a[i] = std::exp(l0 + (l1 - l0) * static_cast<double>(i) / static_cast<double>(n_steps == 0 ? 1 : n_steps));
  a.front() = a_begin;
  a.back() = a_end;
  return a;
}

inline void kick(std::span<Particle> particles, std::span<const Vec3> accels, double kick_coeff) {
  if (particles.size() != accels.size()) throw InvalidInput("kick: particle/acceleration length mismatch");
  for (std::size_t i = 0; i < particles.size(); ++i) particles[i].mom += accels[i] * kick_coeff;
}

inline void drift(std::span<Particle> particles, double drift_coeff) {
  for (auto& p : particles) p.pos = wrap_position(p.pos + p.mom * drift_coeff);
}

}  // namespace treegrid
