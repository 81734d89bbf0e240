#pragma once

#include <string>

#include "cakes/search.hpp"
#include "cakes/tasks.hpp"

namespace cakes {

constexpr double kBarHeight = 300.0;

/// One stacked bar per replaceable layer; each segment's height is
/// kBarHeight times its share of the layer's channels. Segments carry
/// data-layer / data-shape attributes. Throws ConfigError on an empty report.
std::string composition_svg(const CostReport& report);

/// Total and task loss against iteration.
std::string loss_curve_svg(const TrainLog& log);

// Parses the CSV written by TrainLog::to_csv.
TrainLog parse_log_csv(const std::string& text);

}  // namespace cakes
