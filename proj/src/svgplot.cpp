#include "elm/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "elm/error.hpp"

namespace elm {

namespace {

const char* kPalette[] = {"#3b6fb6", "#d95f02", "#1b9e77", "#c23b5f", "#7570b3", "#8c613c"};

std::string num(double x) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", x);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

} // namespace

std::string render_scatter_svg(const std::string& title, const std::string& x_label,
                               const std::string& y_label,
                               const std::vector<PlotSeries>& series, int width, int height) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size())
            throw InputError("plot series '" + s.label + "' has mismatched x/y sizes");
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
                throw InputError("plot series '" + s.label + "' has a non-finite point");
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (!std::isfinite(xmin)) { // no points at all
        xmin = 0.0; xmax = 1.0; ymin = 0.0; ymax = 1.0;
    }
    if (xmin == xmax) { xmin -= 0.5; xmax += 0.5; }
    if (ymin == ymax) { ymin -= 0.5; ymax += 0.5; }
    const double xpad = 0.05 * (xmax - xmin), ypad = 0.05 * (ymax - ymin);
    xmin -= xpad; xmax += xpad;
    ymin -= ypad; ymax += ypad;

    const double ml = 72, mr = 20, mt = 36, mb = 52; // margins
    const double pw = width - ml - mr, ph = height - mt - mb;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"15\">" << escape(title) << "</text>\n";

    const int ticks = 5;
    o << "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#333\">\n";
    for (int i = 0; i <= ticks; ++i) {
        const double fx = xmin + (xmax - xmin) * i / ticks;
        const double gx = px(fx);
        o << "<line x1=\"" << num(gx) << "\" y1=\"" << num(mt) << "\" x2=\"" << num(gx)
          << "\" y2=\"" << num(mt + ph) << "\" stroke=\"#ddd\"/>\n";
        o << "<text x=\"" << num(gx) << "\" y=\"" << num(mt + ph + 16)
          << "\" text-anchor=\"middle\">" << num(fx) << "</text>\n";
        const double fy = ymin + (ymax - ymin) * i / ticks;
        const double gy = py(fy);
        o << "<line x1=\"" << num(ml) << "\" y1=\"" << num(gy) << "\" x2=\"" << num(ml + pw)
          << "\" y2=\"" << num(gy) << "\" stroke=\"#ddd\"/>\n";
        o << "<text x=\"" << num(ml - 6) << "\" y=\"" << num(gy + 4)
          << "\" text-anchor=\"end\">" << num(fy) << "</text>\n";
    }
    o << "</g>\n";
    o << "<rect x=\"" << num(ml) << "\" y=\"" << num(mt) << "\" width=\"" << num(pw)
      << "\" height=\"" << num(ph) << "\" fill=\"none\" stroke=\"#444\"/>\n";
    o << "<text x=\"" << num(ml + pw / 2) << "\" y=\"" << num(double(height) - 12)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << escape(x_label) << "</text>\n";
    o << "<text x=\"16\" y=\"" << num(mt + ph / 2)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
      << "transform=\"rotate(-90 16 " << num(mt + ph / 2) << ")\">" << escape(y_label)
      << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        if (s.connect && s.x.size() > 1) {
            o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
            for (size_t i = 0; i < s.x.size(); ++i)
                o << num(px(s.x[i])) << "," << num(py(s.y[i])) << " ";
            o << "\"/>\n";
        }
        for (size_t i = 0; i < s.x.size(); ++i)
            o << "<circle cx=\"" << num(px(s.x[i])) << "\" cy=\"" << num(py(s.y[i]))
              << "\" r=\"3.4\" fill=\"" << color << "\" fill-opacity=\"0.85\"/>\n";
    }

    double ly = mt + 10;
    o << "<g font-family=\"sans-serif\" font-size=\"12\">\n";
    for (size_t si = 0; si < series.size(); ++si) {
        const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        o << "<circle cx=\"" << num(ml + pw - 150) << "\" cy=\"" << num(ly - 4)
          << "\" r=\"4\" fill=\"" << color << "\"/>\n";
        o << "<text x=\"" << num(ml + pw - 140) << "\" y=\"" << num(ly) << "\">"
          << escape(series[si].label) << "</text>\n";
        ly += 18;
    }
    o << "</g>\n</svg>\n";
    return o.str();
}

} // namespace elm
