#pragma once

#include <array>
#include <stdexcept>
#include <vector>

namespace temporl::metrics {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Position = std::array<double, 2>;
using PositionTrajectory = std::vector<Position>;

struct CoverageConfig {
  int buckets = 100;  // perfect square; the box is tiled sqrt(n) x sqrt(n)
  double box_min_x = 0.0, box_min_y = 0.0;
  double box_max_x = 1.0, box_max_y = 1.0;
};

struct GyrationConfig {
  double diagonal = 1.0;  // of the reachable-state bounding box
};

// |visited buckets| / n over the union of all trajectory states.
double coverage(const std::vector<PositionTrajectory>& trajectories,
                const CoverageConfig& config);

// (1 / (delta * n)) * sum_traj (1 / (|traj| - 1)) * sum_s d^2(s, mean).
double gyration_sq(const std::vector<PositionTrajectory>& trajectories,
                   const GyrationConfig& config);

// One-sided power spectrum per frequency bin 0..L/2, averaged over action
// dimensions and sequences. Normalized so bins sum to the mean squared
// signal energy (Parseval). Direct O(L^2) DFT.
std::vector<double> action_psd(const std::vector<std::vector<std::vector<double>>>& sequences);

// Fraction of total PSD power in the lowest `fraction` of frequency bins.
double low_frequency_fraction(const std::vector<double>& psd, double fraction);

}  // namespace temporl::metrics
