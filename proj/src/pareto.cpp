#include "elm/pareto.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "elm/error.hpp"

namespace elm {

bool dominates(const ParetoPoint& p, const ParetoPoint& q) {
    return p.quality <= q.quality && p.cost <= q.cost &&
           (p.quality < q.quality || p.cost < q.cost);
}

std::vector<ParetoPoint> pareto_front(const std::vector<ParetoPoint>& points) {
    for (size_t i = 0; i < points.size(); ++i) {
        if (!std::isfinite(points[i].quality) || !std::isfinite(points[i].cost))
            throw InputError("pareto point " + std::to_string(i) + " (" + points[i].source +
                             ") has a non-finite objective");
    }

    std::vector<size_t> order(points.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (points[a].cost != points[b].cost) return points[a].cost < points[b].cost;
        return a < b;
    });

    // Sweep equal-cost groups in cost order. A point survives iff it has its
    // group's best quality and that beats everything strictly cheaper; within
    // a group the runners-up are dominated by the group minimum, and a group
    // minimum that only ties a cheaper point loses on cost.
    std::vector<ParetoPoint> front;
    double best_cheaper = std::numeric_limits<double>::infinity();
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        double group_min = std::numeric_limits<double>::infinity();
        while (j < order.size() && points[order[j]].cost == points[order[i]].cost) {
            group_min = std::min(group_min, points[order[j]].quality);
            ++j;
        }
        if (group_min < best_cheaper) {
            for (size_t t = i; t < j; ++t)
                if (points[order[t]].quality == group_min) front.push_back(points[order[t]]);
            best_cheaper = group_min;
        }
        i = j;
    }
    return front;
}

} // namespace elm
