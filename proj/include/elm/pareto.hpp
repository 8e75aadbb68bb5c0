#pragma once

#include <string>
#include <vector>

#include "elm/arch.hpp"

namespace elm {

// One evaluated candidate. Both objectives point down: lower quality (loss or
// perplexity) and lower cost (parameters or latency) are better.
struct ParetoPoint {
    SubNetworkConfig theta;
    double quality = 0.0;
    double cost = 0.0;
    std::string source; // grid bin index or baseline tag
};

// p dominates q when p is no worse on both axes and strictly better on one.
bool dominates(const ParetoPoint& p, const ParetoPoint& q);

// Exactly the non-dominated subset, sorted by cost ascending; points that tie
// on both axes are all kept, in input order. Every quality and cost must be
// finite.
std::vector<ParetoPoint> pareto_front(const std::vector<ParetoPoint>& points);

} // namespace elm
