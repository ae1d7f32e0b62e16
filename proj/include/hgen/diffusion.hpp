#pragma once

// Shared diffusion machinery: noise schedules, forward noising, the DDPM
// posterior, and deterministic DDIM / pseudo-linear-multistep updates.

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "hgen/rng.hpp"
#include "hgen/tensor.hpp"

namespace hgen::diff {

enum class ScheduleKind { kLinearBeta, kCosine };

struct NoiseSchedule {
    int64_t T = 0;
    std::vector<double> alphas;      // alpha_t in (0,1), index t-1
    std::vector<double> alpha_bars;  // strictly decreasing cumulative products

    double alpha(int64_t t) const { return alphas[static_cast<size_t>(t - 1)]; }
    double alpha_bar(int64_t t) const {  // alpha_bar(0) == 1 by convention
        return t == 0 ? 1.0 : alpha_bars[static_cast<size_t>(t - 1)];
    }
    double beta(int64_t t) const { return 1.0 - alpha(t); }

    void validate() const;
};

// Linear-beta default: beta from 1e-4 to 2e-2 over T steps.
NoiseSchedule build_schedule(int64_t T, ScheduleKind kind = ScheduleKind::kLinearBeta,
                             double beta_start = 1e-4, double beta_end = 2e-2);

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps; eps ~ N(0,I)
std::vector<double> q_sample(const std::vector<double>& x0, int64_t t,
                             const NoiseSchedule& sched, Rng& rng);
std::vector<double> q_sample_with_eps(const std::vector<double>& x0, int64_t t,
                                      const NoiseSchedule& sched,
                                      const std::vector<double>& eps);

// Standard DDPM posterior q(x_{t-1} | x_t, x0): mean coefficients and variance.
struct PosteriorCoeffs {
    double coef_x0 = 0.0;
    double coef_xt = 0.0;
    double variance = 0.0;
};
PosteriorCoeffs posterior_coeffs(const NoiseSchedule& sched, int64_t t);

// Deterministic DDIM update from step t to t_prev using a noise estimate.
std::vector<double> ddim_step(const std::vector<double>& x_t,
                              const std::vector<double>& eps, int64_t t, int64_t t_prev,
                              const NoiseSchedule& sched);

// Adams-Bashforth combination of the most recent noise predictions
// (newest first): 1st e0; 2nd (3e0-e1)/2; 3rd (23e0-16e1+5e2)/12;
// 4th (55e0-59e1+37e2-9e3)/24.
std::vector<double> plms_effective_eps(const std::deque<std::vector<double>>& history);

// One PLMS step: effective eps from the history, then the DDIM-form update.
std::vector<double> plms_step(const std::deque<std::vector<double>>& history,
                              const std::vector<double>& x_t, int64_t t, int64_t t_prev,
                              const NoiseSchedule& sched);

// Uniform sub-sequence of timesteps T..1 of the requested length, descending.
std::vector<int64_t> sample_timesteps(int64_t T, int64_t steps);

}  // namespace hgen::diff
