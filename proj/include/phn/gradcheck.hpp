#pragma once

#include <cstddef>
#include <functional>
#include <optional>

#include "phn/params.hpp"

namespace phn {

struct FdOptions {
    double h = 1e-4;
    // When set, probe at most this many coordinates per parameter tensor
    // (seeded choice) instead of every coordinate.
    std::optional<std::size_t> coords_per_tensor;
    std::uint64_t probe_seed = 0;
    // A perturbation of size h can push an activation across the LeakyReLU
    // kink, making the central difference wrong by O(1) even though the
    // analytic gradient is exact. Coordinates whose relative error exceeds
    // refine_threshold are re-probed with h shrunk 16x (up to refine_steps
    // times): a kink hit vanishes as h shrinks, a genuine gradient bug does
    // not. Set refine_steps to 0 for the strict single-h check.
    double refine_threshold = 1e-6;
    std::size_t refine_steps = 2;
};

struct FdReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
};

// Central-difference check of reverse-mode gradients.
//
// loss_fn must recompute the scalar objective from the current parameter
// values; when its argument is true it must also accumulate gradients into
// the store (which arrives zeroed). Relative error per coordinate is
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
FdReport finite_difference_check(ParameterStore& params,
                                 const std::function<double(bool with_grad)>& loss_fn,
                                 const FdOptions& options = {});

}  // namespace phn
