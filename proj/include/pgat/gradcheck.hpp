#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "pgat/autodiff.hpp"

namespace pgat::ad {

struct ProbeInput {
    Shape shape;
    std::vector<double> values;
};

// Rebuilds the function under test on a fresh or given graph. Must be
// deterministic in its structure for a fixed closure state.
using GraphFn = std::function<Tensor(Graph&, const std::vector<Tensor>&)>;

// Max over all input coordinates of
//   |analytic - central| / max(1, |analytic|, |central|).
// Central differences are taken by tape replay. When the graph contains
// stop_gradient nodes the replay freezes them at their recorded values, so
// the reference derivative agrees with stop-gradient semantics; plain
// replay (stop_grad_aware=false) measures the underlying function instead.
double grad_check(const GraphFn& fn, const std::vector<ProbeInput>& inputs, double eps,
                  bool stop_grad_aware = true);

double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& expected);

// Randomized composition of primitives (depth <= 6) with a scalar root,
// safe margins at relu kinks / max ties, and optional stop_gradient nodes.
struct RandomCase {
    GraphFn fn;
    std::vector<ProbeInput> inputs;
    uint64_t effective_seed = 0;
    bool has_stop_grad = false;
};

RandomCase make_random_case(uint64_t seed, bool allow_stop_grad);

struct GradCheckSuiteResult {
    int cases = 0;
    int stop_grad_cases = 0;
    double max_err = 0.0;
    uint64_t worst_seed = 0;
};

GradCheckSuiteResult run_gradcheck_suite(int trials, uint64_t seed, bool include_stop_grad, double eps);

}  // namespace pgat::ad
