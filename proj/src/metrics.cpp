#include "temporl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace temporl::metrics {

double coverage(const std::vector<PositionTrajectory>& trajectories,
                const CoverageConfig& config) {
  if (trajectories.empty()) throw MetricsError("coverage: no trajectories");
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(config.buckets))));
  if (grid * grid != config.buckets)
    throw MetricsError("coverage: bucket count must be a perfect square");
  const double sx = (config.box_max_x - config.box_min_x) / grid;
  const double sy = (config.box_max_y - config.box_min_y) / grid;
  if (sx <= 0.0 || sy <= 0.0) throw MetricsError("coverage: degenerate bounding box");

  std::unordered_set<int> visited;
  for (const auto& traj : trajectories)
    for (const auto& p : traj) {
      int bx = static_cast<int>((p[0] - config.box_min_x) / sx);
      int by = static_cast<int>((p[1] - config.box_min_y) / sy);
      bx = std::clamp(bx, 0, grid - 1);
      by = std::clamp(by, 0, grid - 1);
      visited.insert(by * grid + bx);
    }
  return static_cast<double>(visited.size()) / config.buckets;
}

double gyration_sq(const std::vector<PositionTrajectory>& trajectories,
                   const GyrationConfig& config) {
  if (trajectories.empty()) throw MetricsError("gyration_sq: no trajectories");
  if (config.diagonal <= 0.0) throw MetricsError("gyration_sq: diagonal must be > 0");
  double total = 0.0;
  for (const auto& traj : trajectories) {
    if (traj.size() < 2) throw MetricsError("gyration_sq: trajectory shorter than 2");
    double mx = 0.0, my = 0.0;
    for (const auto& p : traj) {
      mx += p[0];
      my += p[1];
    }
    mx /= static_cast<double>(traj.size());
    my /= static_cast<double>(traj.size());
    double sq = 0.0;
    for (const auto& p : traj) {
      const double dx = p[0] - mx, dy = p[1] - my;
      sq += dx * dx + dy * dy;
    }
    total += sq / (static_cast<double>(traj.size()) - 1.0);
  }
  return total / (config.diagonal * static_cast<double>(trajectories.size()));
}

std::vector<double> action_psd(
    const std::vector<std::vector<std::vector<double>>>& sequences) {
  if (sequences.empty()) throw MetricsError("action_psd: no sequences");
  const std::size_t len = sequences.front().size();
  if (len == 0) throw MetricsError("action_psd: empty sequence");
  const std::size_t dims = sequences.front().front().size();
  for (const auto& seq : sequences)
    if (seq.size() != len) throw MetricsError("action_psd: ragged sequence lengths");

  const std::size_t n_bins = len / 2 + 1;
  std::vector<double> psd(n_bins, 0.0);
  const double two_pi = 2.0 * 3.14159265358979323846;
  std::size_t count = 0;
  std::vector<double> signal(len);

  for (const auto& seq : sequences) {
    for (std::size_t d = 0; d < dims; ++d) {
      for (std::size_t t = 0; t < len; ++t) signal[t] = seq[t][d];
      for (std::size_t k = 0; k < n_bins; ++k) {
        double re = 0.0, im = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
          const double phase = two_pi * static_cast<double>(k) * static_cast<double>(t) /
                               static_cast<double>(len);
          re += signal[t] * std::cos(phase);
          im -= signal[t] * std::sin(phase);
        }
        // |X_k|^2 / L^2 with one-sided folding; bins then sum to the mean
        // squared signal energy.
        double p = (re * re + im * im) / (static_cast<double>(len) * static_cast<double>(len));
        const bool interior = k != 0 && !(len % 2 == 0 && k == len / 2);
        if (interior) p *= 2.0;
        psd[k] += p;
      }
      ++count;
    }
  }
  for (double& p : psd) p /= static_cast<double>(count);
  return psd;
}

double low_frequency_fraction(const std::vector<double>& psd, double fraction) {
  if (psd.empty()) throw MetricsError("low_frequency_fraction: empty spectrum");
  double total = 0.0;
  for (const double p : psd) total += p;
  if (total <= 0.0) return 0.0;
  const std::size_t cutoff = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(psd.size()))));
  double low = 0.0;
  for (std::size_t k = 0; k < cutoff && k < psd.size(); ++k) low += psd[k];
  return low / total;
}

}  // namespace temporl::metrics
