/*
 * Copyright 2026 The MetaDrug Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

namespace metadrug::svg {

// Minimal deterministic SVG renderer for the experiment plots. Output is
// plain text with fixed-precision coordinates, so regenerating a plot from
// the same data is byte-stable.

struct Series {
  std::string label;
  std::vector<double> x, y;
};

struct LinePanel {
  std::string title;
  std::string x_label;
  std::vector<Series> series;
};

struct BarPanel {
  std::string title;
  std::vector<std::string> labels;
  std::vector<double> values;
};

namespace detail {

inline const char* color(std::size_t i) {
  static const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c",
                                   "#d62728", "#9467bd", "#8c564b"};
  return kPalette[i % 6];
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

struct Rect {
  double x0, y0, w, h;
};

inline void panel_frame(std::string& out, const Rect& r, const std::string& title) {
  out += "<rect x=\"" + fmt(r.x0) + "\" y=\"" + fmt(r.y0) + "\" width=\"" + fmt(r.w) +
         "\" height=\"" + fmt(r.h) + "\" fill=\"none\" stroke=\"#444444\"/>\n";
  out += "<text x=\"" + fmt(r.x0 + r.w / 2) + "\" y=\"" + fmt(r.y0 - 6) +
         "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">" + title +
         "</text>\n";
}

}  // namespace detail

inline std::string render_line_panels(const std::vector<LinePanel>& panels, int cols = 2) {
  const double pw = 320, ph = 220, margin = 48;
  const int rows = (static_cast<int>(panels.size()) + cols - 1) / cols;
  const double width = cols * (pw + margin) + margin;
  const double height = rows * (ph + margin + 24) + margin;
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                    detail::fmt(width) + "\" height=\"" + detail::fmt(height) + "\">\n";
  for (std::size_t pi = 0; pi < panels.size(); ++pi) {
    const auto& panel = panels[pi];
    const int r = static_cast<int>(pi) / cols, c = static_cast<int>(pi) % cols;
    detail::Rect rect{margin + c * (pw + margin), margin + r * (ph + margin + 24), pw, ph};
    detail::panel_frame(out, rect, panel.title);
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : panel.series) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (first) {
          xmin = xmax = s.x[i];
          ymin = ymax = s.y[i];
          first = false;
        }
        xmin = std::min(xmin, s.x[i]);
        xmax = std::max(xmax, s.x[i]);
        ymin = std::min(ymin, s.y[i]);
        ymax = std::max(ymax, s.y[i]);
      }
    }
    if (xmax == xmin) xmax = xmin + 1;
    const double pad = (ymax - ymin) * 0.1 + 1e-9;
    ymin -= pad;
    ymax += pad;
    auto sx = [&](double x) { return rect.x0 + (x - xmin) / (xmax - xmin) * rect.w; };
    auto sy = [&](double y) { return rect.y0 + rect.h - (y - ymin) / (ymax - ymin) * rect.h; };
    // axis tick labels
    out += "<text x=\"" + detail::fmt(rect.x0 - 4) + "\" y=\"" + detail::fmt(sy(ymin) + 4) +
           "\" text-anchor=\"end\" font-size=\"10\" font-family=\"sans-serif\">" +
           detail::fmt_tick(ymin) + "</text>\n";
    out += "<text x=\"" + detail::fmt(rect.x0 - 4) + "\" y=\"" + detail::fmt(sy(ymax) + 4) +
           "\" text-anchor=\"end\" font-size=\"10\" font-family=\"sans-serif\">" +
           detail::fmt_tick(ymax) + "</text>\n";
    out += "<text x=\"" + detail::fmt(rect.x0 + rect.w / 2) + "\" y=\"" +
           detail::fmt(rect.y0 + rect.h + 28) +
           "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" +
           panel.x_label + "</text>\n";
    for (std::size_t si = 0; si < panel.series.size(); ++si) {
      const auto& s = panel.series[si];
      std::string points;
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        points += detail::fmt(sx(s.x[i])) + "," + detail::fmt(sy(s.y[i])) + " ";
      }
      out += "<polyline fill=\"none\" stroke=\"" + std::string(detail::color(si)) +
             "\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        out += "<circle cx=\"" + detail::fmt(sx(s.x[i])) + "\" cy=\"" +
               detail::fmt(sy(s.y[i])) + "\" r=\"2.5\" fill=\"" +
               std::string(detail::color(si)) + "\"/>\n";
      }
      out += "<text x=\"" + detail::fmt(rect.x0 + 8) + "\" y=\"" +
             detail::fmt(rect.y0 + 14 + 13 * static_cast<double>(si)) +
             "\" font-size=\"11\" font-family=\"sans-serif\" fill=\"" +
             std::string(detail::color(si)) + "\">" + s.label + "</text>\n";
    }
  }
  out += "</svg>\n";
  return out;
}

inline std::string render_bar_panels(const std::vector<BarPanel>& panels, int cols = 2) {
  const double pw = 340, ph = 220, margin = 48;
  const int rows = (static_cast<int>(panels.size()) + cols - 1) / cols;
  const double width = cols * (pw + margin) + margin;
  const double height = rows * (ph + margin + 40) + margin;
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                    detail::fmt(width) + "\" height=\"" + detail::fmt(height) + "\">\n";
  for (std::size_t pi = 0; pi < panels.size(); ++pi) {
    const auto& panel = panels[pi];
    const int r = static_cast<int>(pi) / cols, c = static_cast<int>(pi) % cols;
    detail::Rect rect{margin + c * (pw + margin), margin + r * (ph + margin + 40), pw, ph};
    detail::panel_frame(out, rect, panel.title);
    double vmax = 0.0;
    for (double v : panel.values) vmax = std::max(vmax, v);
    if (vmax <= 0.0) vmax = 1.0;
    vmax *= 1.1;
    const std::size_t n = panel.values.size();
    const double slot = rect.w / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double h = panel.values[i] / vmax * rect.h;
      const double x = rect.x0 + slot * static_cast<double>(i) + slot * 0.15;
      out += "<rect x=\"" + detail::fmt(x) + "\" y=\"" + detail::fmt(rect.y0 + rect.h - h) +
             "\" width=\"" + detail::fmt(slot * 0.7) + "\" height=\"" + detail::fmt(h) +
             "\" fill=\"" + std::string(detail::color(i)) + "\"/>\n";
      out += "<text x=\"" + detail::fmt(x + slot * 0.35) + "\" y=\"" +
             detail::fmt(rect.y0 + rect.h - h - 4) +
             "\" text-anchor=\"middle\" font-size=\"10\" font-family=\"sans-serif\">" +
             detail::fmt_tick(panel.values[i]) + "</text>\n";
      out += "<text x=\"" + detail::fmt(x + slot * 0.35) + "\" y=\"" +
             detail::fmt(rect.y0 + rect.h + 14) +
             "\" text-anchor=\"middle\" font-size=\"9\" font-family=\"sans-serif\" transform=\"rotate(20 " +
             detail::fmt(x + slot * 0.35) + " " + detail::fmt(rect.y0 + rect.h + 14) + ")\">" +
             panel.labels[i] + "</text>\n";
    }
  }
  out += "</svg>\n";
  return out;
}

}  // namespace metadrug::svg
