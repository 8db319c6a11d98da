#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>

#include "presc/process.hpp"

namespace presc {

/// Exact conditional means of labels per (prefix key, action), optionally weighted.
class TabularEstimator {
 public:
  void fit(const std::string& key, Action action, double label, double weight = 1.0) {
    auto& c = cells_[key][static_cast<std::size_t>(action)];
    c.weight += weight;
    c.weighted_sum += weight * label;
    ++c.count;
  }

  /// Mean label, or nullopt when the pair was never observed.
  std::optional<double> predict(const std::string& key, Action action) const {
    auto it = cells_.find(key);
    if (it == cells_.end()) return std::nullopt;
    const auto& c = it->second[static_cast<std::size_t>(action)];
    if (c.count == 0 || c.weight <= 0.0) return std::nullopt;
    return c.weighted_sum / c.weight;
  }

  long count(const std::string& key, Action action) const {
    auto it = cells_.find(key);
    return it == cells_.end() ? 0 : it->second[static_cast<std::size_t>(action)].count;
  }

  std::size_t size() const { return cells_.size(); }

 private:
  struct Cell {
    double weight = 0.0;
    double weighted_sum = 0.0;
    long count = 0;
  };
  std::map<std::string, std::array<Cell, 2>> cells_;
};

}  // namespace presc
