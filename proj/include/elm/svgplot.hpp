#pragma once

#include <string>
#include <vector>

namespace elm {

// One series of points; connected series are drawn as a polyline through the
// points in their given order, markers are drawn either way.
struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    bool connect = false;
};

// Renders a self-contained scatter/line SVG: axes with tick labels, the
// series in a fixed palette, and a legend. Series with mismatched x/y sizes
// or non-finite values are rejected.
std::string render_scatter_svg(const std::string& title, const std::string& x_label,
                               const std::string& y_label,
                               const std::vector<PlotSeries>& series, int width = 760,
                               int height = 500);

} // namespace elm
