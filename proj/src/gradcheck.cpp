#include "phn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "phn/errors.hpp"
#include "phn/rng.hpp"

namespace phn {

FdReport finite_difference_check(ParameterStore& params,
                                 const std::function<double(bool)>& loss_fn,
                                 const FdOptions& options) {
    if (!(options.h > 0.0)) {
        throw ConfigError("finite_difference_check: h must be positive");
    }
    params.zero_grads();
    const double base = loss_fn(true);
    if (!std::isfinite(base)) {
        throw NumericError("finite_difference_check: non-finite loss " + std::to_string(base));
    }

    RngStream probe_rng(options.probe_seed);
    FdReport report;
    const double h = options.h;
    for (std::size_t pi = 0; pi < params.count(); ++pi) {
        Parameter& p = params.at(pi);
        if (!p.trainable) continue;

        std::vector<std::size_t> coords;
        if (options.coords_per_tensor && *options.coords_per_tensor < p.value.size()) {
            for (std::size_t c = 0; c < *options.coords_per_tensor; ++c) {
                coords.push_back(static_cast<std::size_t>(probe_rng.below(p.value.size())));
            }
        } else {
            coords.resize(p.value.size());
            for (std::size_t c = 0; c < coords.size(); ++c) coords[c] = c;
        }

        for (std::size_t c : coords) {
            const double analytic = p.grad[c];
            auto probe = [&](double step) {
                const double saved = p.value[c];
                p.value[c] = saved + step;
                const double up = loss_fn(false);
                p.value[c] = saved - step;
                const double down = loss_fn(false);
                p.value[c] = saved;
                if (!std::isfinite(up) || !std::isfinite(down)) {
                    throw NumericError("finite_difference_check: non-finite loss while probing '" +
                                       p.name + "'");
                }
                const double numeric = (up - down) / (2.0 * step);
                const double denom = std::max(1e-8, std::abs(analytic) + std::abs(numeric));
                return std::abs(analytic - numeric) / denom;
            };
            double step = h;
            double rel = probe(step);
            for (std::size_t r = 0; r < options.refine_steps && rel > options.refine_threshold; ++r) {
                step /= 16.0;
                rel = std::min(rel, probe(step));
            }
            report.max_rel_error = std::max(report.max_rel_error, rel);
            ++report.coords_checked;
        }
    }
    return report;
}

}  // namespace phn
