#include "cakes/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace cakes {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Stable colour per shape string; fixed entries for the default candidates.
std::string colour_for(const std::string& shape) {
  static const std::pair<const char*, const char*> fixed[] = {
      {"3x3x3", "#4c72b0"}, {"1x3x3", "#dd8452"}, {"3x1x3", "#55a868"}, {"3x3x1", "#c44e52"},
      {"1x1x3", "#8172b3"}, {"1x3x1", "#937860"}, {"3x1x1", "#da8bc3"}, {"1x1x1", "#8c8c8c"}};
  for (auto [s, c] : fixed)
    if (shape == s) return c;
  std::uint32_t h = 2166136261u;
  for (char ch : shape) h = (h ^ static_cast<unsigned char>(ch)) * 16777619u;
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%06x", h & 0xffffffu);
  return buf;
}

}  // namespace

std::string composition_svg(const CostReport& report) {
  std::vector<const LayerCost*> layers;
  for (const auto& l : report.layers)
    if (l.replaceable) layers.push_back(&l);
  if (layers.empty()) throw ConfigError("layers", "report has no replaceable layers to plot");
  const double bar_w = 40.0, gap = 20.0, left = 50.0, top = 20.0;
  const double width = left + static_cast<double>(layers.size()) * (bar_w + gap) + 120.0;
  std::vector<std::string> legend;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width) << "\" height=\"" << fmt(kBarHeight + 80)
    << "\">\n";
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerCost& l = *layers[i];
    std::size_t total = 0;
    for (const auto& [shape, n] : l.shape_counts) total += n;
    const double x = left + static_cast<double>(i) * (bar_w + gap);
    double y = top;
    s << "<g data-bar=\"" << l.name << "\">\n";
    for (const auto& [shape, n] : l.shape_counts) {
      const double h = kBarHeight * static_cast<double>(n) / static_cast<double>(total);
      s << "<rect data-layer=\"" << l.name << "\" data-shape=\"" << shape << "\" x=\"" << fmt(x) << "\" y=\""
        << fmt(y) << "\" width=\"" << fmt(bar_w) << "\" height=\"" << fmt(h) << "\" fill=\"" << colour_for(shape)
        << "\"/>\n";
      y += h;
      if (std::find(legend.begin(), legend.end(), shape) == legend.end()) legend.push_back(shape);
    }
    s << "</g>\n<text x=\"" << fmt(x) << "\" y=\"" << fmt(top + kBarHeight + 16) << "\" font-size=\"10\">" << l.name
      << "</text>\n";
  }
  std::sort(legend.begin(), legend.end());
  const double lx = left + static_cast<double>(layers.size()) * (bar_w + gap) + 10.0;
  for (std::size_t k = 0; k < legend.size(); ++k) {
    const double ly = top + 16.0 * static_cast<double>(k);
    s << "<rect x=\"" << fmt(lx) << "\" y=\"" << fmt(ly) << "\" width=\"10\" height=\"10\" fill=\""
      << colour_for(legend[k]) << "\"/><text x=\"" << fmt(lx + 14) << "\" y=\"" << fmt(ly + 9)
      << "\" font-size=\"10\">" << legend[k] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string loss_curve_svg(const TrainLog& log) {
  if (log.rows.empty()) throw ConfigError("log", "training log is empty");
  const double w = 600.0, h = 300.0, left = 50.0, top = 20.0;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& r : log.rows) {
    lo = std::min({lo, r.loss, r.task_loss});
    hi = std::max({hi, r.loss, r.task_loss});
  }
  if (!(hi > lo)) hi = lo + 1.0;
  const double steps = static_cast<double>(std::max<std::size_t>(log.rows.size() - 1, 1));
  auto px = [&](std::size_t i) { return left + w * static_cast<double>(i) / steps; };
  auto py = [&](double v) { return top + h * (hi - v) / (hi - lo); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(w + left + 20) << "\" height=\"" << fmt(h + 60)
    << "\">\n";
  s << "<rect x=\"" << fmt(left) << "\" y=\"" << fmt(top) << "\" width=\"" << fmt(w) << "\" height=\"" << fmt(h)
    << "\" fill=\"none\" stroke=\"#999\"/>\n";
  for (int series = 0; series < 2; ++series) {
    s << "<polyline data-series=\"" << (series == 0 ? "loss" : "task_loss") << "\" fill=\"none\" stroke=\""
      << (series == 0 ? "#4c72b0" : "#dd8452") << "\" points=\"";
    for (std::size_t i = 0; i < log.rows.size(); ++i) {
      const double v = series == 0 ? log.rows[i].loss : log.rows[i].task_loss;
      s << (i ? " " : "") << fmt(px(i)) << "," << fmt(py(v));
    }
    s << "\"/>\n";
  }
  s << "<text x=\"" << fmt(left) << "\" y=\"" << fmt(top + h + 16) << "\" font-size=\"10\">iteration "
    << log.rows.front().iteration << " .. " << log.rows.back().iteration << "</text>\n";
  s << "<text x=\"5\" y=\"" << fmt(top + 10) << "\" font-size=\"10\">" << fmt(hi) << "</text>\n";
  s << "<text x=\"5\" y=\"" << fmt(top + h) << "\" font-size=\"10\">" << fmt(lo) << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

TrainLog parse_log_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "iteration,learning_rate,loss,task_loss,penalty")
    throw ConfigError("log.csv", "unexpected header");
  TrainLog log;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    LogRow r;
    unsigned long long it = 0;
    if (std::sscanf(line.c_str(), "%llu,%lf,%lf,%lf,%lf", &it, &r.learning_rate, &r.loss, &r.task_loss, &r.penalty) !=
        5)
      throw ConfigError("log.csv:" + std::to_string(lineno), "malformed row");
    r.iteration = static_cast<std::size_t>(it);
    log.rows.push_back(r);
  }
  return log;
}

}  // namespace cakes
