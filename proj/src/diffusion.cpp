#include "hgen/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace hgen::diff {

void NoiseSchedule::validate() const {
    if (T < 1 || static_cast<int64_t>(alphas.size()) != T ||
        static_cast<int64_t>(alpha_bars.size()) != T)
        throw SchemaError("schedule: T and array lengths disagree");
    for (double a : alphas)
        if (!(a > 0.0 && a < 1.0)) throw SchemaError("schedule: alpha outside (0,1)");
    if (alpha_bars[0] != alphas[0])
        throw SchemaError("schedule: alpha_bars[0] must equal alphas[0]");
    for (int64_t t = 1; t < T; ++t)
        if (alpha_bars[static_cast<size_t>(t)] >= alpha_bars[static_cast<size_t>(t - 1)])
            throw SchemaError("schedule: alpha_bars not strictly decreasing");
}

NoiseSchedule build_schedule(int64_t T, ScheduleKind kind, double beta_start,
                             double beta_end) {
    if (T < 1) throw SchemaError("build_schedule: T must be >= 1");
    NoiseSchedule s;
    s.T = T;
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        double beta;
        if (kind == ScheduleKind::kLinearBeta) {
            double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
            beta = beta_start + (beta_end - beta_start) * frac;
        } else {
            // cosine alpha_bar profile, converted to per-step betas
            auto f = [T](double u) {
                double x = (u / static_cast<double>(T) + 0.008) / 1.008;
                double c = std::cos(x * M_PI / 2.0);
                return c * c;
            };
            beta = 1.0 - f(static_cast<double>(t + 1)) / f(static_cast<double>(t));
            beta = std::min(beta, 0.999);
        }
        if (!(beta > 0.0 && beta < 1.0))
            throw SchemaError("build_schedule: parameters give alpha outside (0,1)");
        s.alphas[static_cast<size_t>(t)] = 1.0 - beta;
        s.alpha_bars[static_cast<size_t>(t)] =
            (t == 0 ? 1.0 : s.alpha_bars[static_cast<size_t>(t - 1)]) *
            s.alphas[static_cast<size_t>(t)];
    }
    s.validate();
    return s;
}

std::vector<double> q_sample_with_eps(const std::vector<double>& x0, int64_t t,
                                      const NoiseSchedule& sched,
                                      const std::vector<double>& eps) {
    if (t < 1 || t > sched.T) throw std::invalid_argument("q_sample: t outside [1,T]");
    if (eps.size() != x0.size()) throw DimensionError("q_sample: eps size mismatch");
    double ab = sched.alpha_bar(t);
    double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
    std::vector<double> out(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = c0 * x0[i] + c1 * eps[i];
    return out;
}

std::vector<double> q_sample(const std::vector<double>& x0, int64_t t,
                             const NoiseSchedule& sched, Rng& rng) {
    std::vector<double> eps(x0.size());
    for (auto& e : eps) e = rng.gaussian();
    return q_sample_with_eps(x0, t, sched, eps);
}

PosteriorCoeffs posterior_coeffs(const NoiseSchedule& sched, int64_t t) {
    if (t < 1 || t > sched.T) throw std::invalid_argument("posterior_coeffs: t outside [1,T]");
    double ab_t = sched.alpha_bar(t);
    double ab_prev = sched.alpha_bar(t - 1);
    double beta_t = sched.beta(t);
    PosteriorCoeffs c;
    c.coef_x0 = std::sqrt(ab_prev) * beta_t / (1.0 - ab_t);
    c.coef_xt = std::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab_t);
    c.variance = beta_t * (1.0 - ab_prev) / (1.0 - ab_t);
    return c;
}

std::vector<double> ddim_step(const std::vector<double>& x_t,
                              const std::vector<double>& eps, int64_t t, int64_t t_prev,
                              const NoiseSchedule& sched) {
    if (t_prev < 0 || t_prev >= t) throw std::invalid_argument("ddim_step: need 0 <= t_prev < t");
    if (eps.size() != x_t.size()) throw DimensionError("ddim_step: eps size mismatch");
    double ab_t = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
    double s_t = std::sqrt(ab_t), s_prev = std::sqrt(ab_prev);
    double r_t = std::sqrt(1.0 - ab_t), r_prev = std::sqrt(1.0 - ab_prev);
    std::vector<double> out(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) {
        double x0 = (x_t[i] - r_t * eps[i]) / s_t;
        out[i] = s_prev * x0 + r_prev * eps[i];
    }
    return out;
}

std::vector<double> plms_effective_eps(const std::deque<std::vector<double>>& history) {
    if (history.empty() || history.size() > 4)
        throw std::invalid_argument("plms: history length must be 1..4");
    const size_t n = history.front().size();
    for (const auto& h : history)
        if (h.size() != n) throw DimensionError("plms: history entry size mismatch");

    // Backward-difference form of the Adams-Bashforth weights
    // (gamma_j = 1, 1/2, 5/12, 3/8).  Expanded this reproduces
    // {1}, {3/2,-1/2}, {23/12,-16/12,5/12}, {55/24,-59/24,37/24,-9/24},
    // and a constant history yields e0 exactly since every difference is zero.
    static const double kGamma[4] = {1.0, 1.0 / 2.0, 5.0 / 12.0, 3.0 / 8.0};
    static const double kBinom[4][4] = {  // signed binomials of (1-B)^j
        {1, 0, 0, 0}, {1, -1, 0, 0}, {1, -2, 1, 0}, {1, -3, 3, -1}};

    std::vector<double> eff(history.front());
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 1; j < history.size(); ++j) {
            double diff = 0.0;
            for (size_t k = 0; k <= j; ++k) diff += kBinom[j][k] * history[k][i];
            eff[i] += kGamma[j] * diff;
        }
    }
    return eff;
}

std::vector<double> plms_step(const std::deque<std::vector<double>>& history,
                              const std::vector<double>& x_t, int64_t t, int64_t t_prev,
                              const NoiseSchedule& sched) {
    return ddim_step(x_t, plms_effective_eps(history), t, t_prev, sched);
}

std::vector<int64_t> sample_timesteps(int64_t T, int64_t steps) {
    if (steps < 1 || steps > T)
        throw std::invalid_argument("sample_timesteps: need 1 <= steps <= T");
    std::vector<int64_t> ts;
    ts.reserve(static_cast<size_t>(steps));
    for (int64_t i = 0; i < steps; ++i) {
        // descending from T to 1
        double frac = steps == 1 ? 1.0
                                 : static_cast<double>(steps - 1 - i) /
                                       static_cast<double>(steps - 1);
        int64_t t = 1 + static_cast<int64_t>(std::llround(frac * static_cast<double>(T - 1)));
        ts.push_back(t);
    }
    for (size_t i = 1; i < ts.size(); ++i)
        if (ts[i] >= ts[i - 1]) ts[i] = ts[i - 1] - 1;
    if (ts.back() < 1) throw std::invalid_argument("sample_timesteps: degenerate subsequence");
    return ts;
}

}  // namespace hgen::diff
