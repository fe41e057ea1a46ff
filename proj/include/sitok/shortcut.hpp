#pragma once

// Few-step decoding support: dyadic step-size grid, (t, d) sampling, and the
// self-consistency target (average of two half-size steps, gradients
// stopped).  The velocity model itself lives in diffusion.hpp; everything
// here treats it as a callable v(x, t, d) so the targets can also be checked
// against analytic fields.

#include <cmath>
#include <vector>

#include "sitok/autodiff.hpp"
#include "sitok/rng.hpp"

namespace sitok {

struct ShortcutConfig {
    int base_steps = 128;                     // M; grid is {2^j / M} up to 1/2
    double self_consistency_fraction = 0.25;  // share of samples on the consistency term
};

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

// d values {1/M, 2/M, 4/M, ..., 1/2}.
inline std::vector<double> shortcut_d_grid(int base_steps) {
    if (!is_power_of_two(base_steps) || base_steps < 2)
        throw usage_error("shortcut: base step count must be a power of two >= 2");
    std::vector<double> grid;
    for (int step = 1; step * 2 <= base_steps; step *= 2)
        grid.push_back(double(step) / double(base_steps));
    return grid;
}

// Uniform d from the grid, then t uniform over multiples of d with
// t + 2d <= 1 (so both half-steps stay inside [0, 1]).
struct ShortcutDraw {
    double t = 0.0;
    double d = 0.0;
};

inline ShortcutDraw sample_shortcut_td(Rng& rng, int base_steps) {
    const auto grid = shortcut_d_grid(base_steps);
    ShortcutDraw out;
    out.d = grid[rng.uniform_int(0, std::int64_t(grid.size()) - 1)];
    const int n_slots = int(std::llround(1.0 / out.d)) - 1;  // t/d in [0, 1/d - 2]
    out.t = out.d * double(rng.uniform_int(0, n_slots - 1));
    return out;
}

// Consistency target: run two steps of size d and average the velocities.
// velocity_fn(x, t, d) must return a tensor of x's shape; evaluation happens
// with the tape suspended, so the result carries no gradient.
template <class Real>
struct ShortcutTarget {
    Tensor<Real> target;  // stopgrad((v1 + v2) / 2)
    Tensor<Real> x_next;  // x_t + v1 * d
};

// N uniform Euler steps from t=0, each telling the model the step size it is
// about to take.  With N equal to the base grid size this reduces to plain
// flow sampling; small N is the few-step decode path.
template <class Real, class VelocityFn>
Tensor<Real> few_step_sample(VelocityFn&& velocity_fn, Tensor<Real> x, int steps) {
    if (steps < 1) throw usage_error("few_step_sample: need at least one step");
    const Real d = Real(1) / Real(steps);
    for (int i = 0; i < steps; ++i) {
        const Real t = Real(i) / Real(steps);
        Tensor<Real> v = velocity_fn(x, t, d);
        if (!v.same_shape(x)) throw numerical_error("few_step_sample: velocity shape mismatch");
        for (std::size_t j = 0; j < x.data.size(); ++j) x.data[j] += d * v.data[j];
    }
    return x;
}

template <class Real, class VelocityFn>
ShortcutTarget<Real> shortcut_target(VelocityFn&& velocity_fn, const Tensor<Real>& x_t,
                                     Real t, Real d) {
    if (double(t) + 2.0 * double(d) > 1.0 + 1e-12)
        throw usage_error("shortcut: t + 2d exceeds 1");
    ad::TapeSuspend<Real> guard;
    ShortcutTarget<Real> out;
    Tensor<Real> v1 = velocity_fn(x_t, t, d);
    out.x_next = x_t;
    for (std::size_t i = 0; i < out.x_next.data.size(); ++i)
        out.x_next.data[i] += d * v1.data[i];
    Tensor<Real> v2 = velocity_fn(out.x_next, Real(t + d), d);
    out.target = Tensor<Real>(x_t.shape);
    for (std::size_t i = 0; i < out.target.data.size(); ++i)
        out.target.data[i] = (v1.data[i] + v2.data[i]) / Real(2);
    return out;
}

}  // namespace sitok
