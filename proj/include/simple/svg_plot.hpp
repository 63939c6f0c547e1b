#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace simple {

/// Minimal deterministic SVG chart writer: fixed canvas, explicit data
/// ranges, text output so regenerated plots are byte-identical.
class SvgPlot {
public:
    SvgPlot(std::string title, std::string x_label, std::string y_label)
        : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)) {}

    void set_range(double x0, double x1, double y0, double y1) {
        if (x1 <= x0) x1 = x0 + 1;
        if (y1 <= y0) y1 = y0 + 1;
        x0_ = x0;
        x1_ = x1;
        y0_ = y0;
        y1_ = y1;
    }

    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color,
                  double width = 1.5, double opacity = 1.0) {
        if (pts.empty()) return;
        std::ostringstream os;
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width
           << "\" stroke-opacity=\"" << opacity << "\" points=\"";
        for (const auto& [x, y] : pts) os << fmt(px(x)) << "," << fmt(py(y)) << " ";
        os << "\"/>\n";
        body_ += os.str();
    }

    /// Filled band between lower and upper curves (x must align).
    void band(const std::vector<std::pair<double, double>>& lower,
              const std::vector<std::pair<double, double>>& upper, const std::string& color) {
        if (lower.empty() || upper.empty()) return;
        std::ostringstream os;
        os << "<polygon fill=\"" << color << "\" fill-opacity=\"0.25\" stroke=\"none\" points=\"";
        for (const auto& [x, y] : lower) os << fmt(px(x)) << "," << fmt(py(y)) << " ";
        for (auto it = upper.rbegin(); it != upper.rend(); ++it) os << fmt(px(it->first)) << "," << fmt(py(it->second)) << " ";
        os << "\"/>\n";
        body_ += os.str();
    }

    void bar(double x_center, double bar_width, double y_value, const std::string& color) {
        const double x0 = px(x_center - bar_width / 2);
        const double x1 = px(x_center + bar_width / 2);
        const double ybase = py(std::max(y0_, 0.0));
        const double ytop = py(y_value);
        std::ostringstream os;
        os << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(std::min(ytop, ybase)) << "\" width=\""
           << fmt(x1 - x0) << "\" height=\"" << fmt(std::abs(ybase - ytop)) << "\" fill=\"" << color
           << "\"/>\n";
        body_ += os.str();
    }

    void hline(double y, const std::string& color, double width = 1.5, bool dashed = true) {
        std::ostringstream os;
        os << "<line x1=\"" << fmt(px(x0_)) << "\" y1=\"" << fmt(py(y)) << "\" x2=\"" << fmt(px(x1_))
           << "\" y2=\"" << fmt(py(y)) << "\" stroke=\"" << color << "\" stroke-width=\"" << width << "\"";
        if (dashed) os << " stroke-dasharray=\"6,4\"";
        os << "/>\n";
        body_ += os.str();
    }

    void label(double x, double y, const std::string& text, const std::string& color = "#333") {
        std::ostringstream os;
        os << "<text x=\"" << fmt(px(x)) << "\" y=\"" << fmt(py(y) - 4) << "\" font-size=\"10\" fill=\""
           << color << "\">" << text << "</text>\n";
        body_ += os.str();
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
        os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
           << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
        os << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
        os << "<text x=\"" << kW / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\" fill=\"#111\">"
           << title_ << "</text>\n";
        // Axes.
        os << "<line x1=\"" << kMargin << "\" y1=\"" << kH - kMargin << "\" x2=\"" << kW - kMargin
           << "\" y2=\"" << kH - kMargin << "\" stroke=\"#444\"/>\n";
        os << "<line x1=\"" << kMargin << "\" y1=\"" << kMargin << "\" x2=\"" << kMargin << "\" y2=\""
           << kH - kMargin << "\" stroke=\"#444\"/>\n";
        for (int i = 0; i <= 4; ++i) {
            const double fx = x0_ + (x1_ - x0_) * i / 4.0;
            const double fy = y0_ + (y1_ - y0_) * i / 4.0;
            os << "<text x=\"" << fmt(px(fx)) << "\" y=\"" << kH - kMargin + 14
               << "\" text-anchor=\"middle\" font-size=\"9\" fill=\"#555\">" << fmt(fx) << "</text>\n";
            os << "<text x=\"" << kMargin - 6 << "\" y=\"" << fmt(py(fy) + 3)
               << "\" text-anchor=\"end\" font-size=\"9\" fill=\"#555\">" << fmt(fy) << "</text>\n";
        }
        os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 6 << "\" text-anchor=\"middle\" font-size=\"11\" fill=\"#333\">"
           << x_label_ << "</text>\n";
        os << "<text x=\"12\" y=\"" << kH / 2 << "\" font-size=\"11\" fill=\"#333\" transform=\"rotate(-90 12 "
           << kH / 2 << ")\" text-anchor=\"middle\">" << y_label_ << "</text>\n";
        os << body_;
        os << "</svg>\n";
    }

private:
    static constexpr int kW = 560, kH = 360, kMargin = 48;

    double px(double x) const { return kMargin + (x - x0_) / (x1_ - x0_) * (kW - 2 * kMargin); }
    double py(double y) const { return kH - kMargin - (y - y0_) / (y1_ - y0_) * (kH - 2 * kMargin); }

    static std::string fmt(double v) {
        std::ostringstream os;
        os << std::setprecision(6) << v;
        return os.str();
    }

    std::string title_, x_label_, y_label_;
    double x0_ = 0, x1_ = 1, y0_ = 0, y1_ = 1;
    std::string body_;
};

}  // namespace simple
