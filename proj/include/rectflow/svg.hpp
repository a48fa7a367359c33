#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "rectflow/csvio.hpp"
#include "rectflow/errors.hpp"

namespace rectflow::io {

/// One polyline of a static chart.
struct Series {
    std::vector<double> x, y;
    std::string color = "#1f77b4";
    bool dashed = false;
    double width = 1.5;
};

namespace detail {

struct Bounds {
    double xlo = 0.0, xhi = 1.0, ylo = 0.0, yhi = 1.0;
};

inline Bounds bounds_of(const std::vector<Series>& series) {
    Bounds b{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
             std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            b.xlo = std::min(b.xlo, s.x[i]);
            b.xhi = std::max(b.xhi, s.x[i]);
            b.ylo = std::min(b.ylo, s.y[i]);
            b.yhi = std::max(b.yhi, s.y[i]);
        }
    if (!(b.xhi > b.xlo)) b.xhi = b.xlo + 1.0;
    if (!(b.yhi > b.ylo)) b.yhi = b.ylo + 1.0;
    const double padx = 0.05 * (b.xhi - b.xlo), pady = 0.05 * (b.yhi - b.ylo);
    b.xlo -= padx;
    b.xhi += padx;
    b.ylo -= pady;
    b.yhi += pady;
    return b;
}

inline void emit_cell(std::ofstream& out, const std::vector<Series>& series, double ox,
                      double oy, double w, double h) {
    const Bounds b = bounds_of(series);
    out << "<rect x=\"" << format_double(ox) << "\" y=\"" << format_double(oy)
        << "\" width=\"" << format_double(w) << "\" height=\"" << format_double(h)
        << "\" fill=\"none\" stroke=\"#888\" stroke-width=\"1\"/>\n";
    for (const auto& s : series) {
        out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\""
            << format_double(s.width) << "\"";
        if (s.dashed) out << " stroke-dasharray=\"5,4\"";
        out << " points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            const double px = ox + (s.x[i] - b.xlo) / (b.xhi - b.xlo) * w;
            const double py = oy + h - (s.y[i] - b.ylo) / (b.yhi - b.ylo) * h;
            out << format_double(px) << ',' << format_double(py) << ' ';
        }
        out << "\"/>\n";
    }
}

}  // namespace detail

/// Static line chart in a fixed 800x600 viewBox, one panel per series group.
inline void write_svg_panels(const std::filesystem::path& path,
                             const std::vector<std::vector<Series>>& panels, int cols) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ExperimentError("cannot open " + path.string());
    const int rows = static_cast<int>((panels.size() + cols - 1) / cols);
    const double margin = 10.0;
    const double cw = (800.0 - margin * (cols + 1)) / cols;
    const double ch = (600.0 - margin * (rows + 1)) / rows;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 600\">\n";
    for (std::size_t p = 0; p < panels.size(); ++p) {
        const int r = static_cast<int>(p) / cols, c = static_cast<int>(p) % cols;
        detail::emit_cell(out, panels[p], margin + c * (cw + margin),
                          margin + r * (ch + margin), cw, ch);
    }
    out << "</svg>\n";
}

inline void write_svg_chart(const std::filesystem::path& path,
                            const std::vector<Series>& series) {
    write_svg_panels(path, {series}, 1);
}

}  // namespace rectflow::io
