#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "temporl/rng.hpp"

namespace temporl::maze {

using Vec2 = std::array<double, 2>;

constexpr double kSuccessRadius = 1.2;

class MazeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class GoalRule { CornerCells, FixedFarEnd, UniformFree };
enum class Layout { Room, Room81, Corridor, Corridor30, Maze };

Layout layout_from_name(const std::string& name);
std::string layout_name(Layout layout);

// Occupancy grid at 1-unit resolution; walls are blocked cells. The free-space
// bounding box spans [0, width] x [0, height] in world units.
struct MazeSpec {
  std::string name;
  int width = 0;   // cells along x
  int height = 0;  // cells along y
  std::vector<std::uint8_t> blocked;  // row-major [y * width + x]
  Vec2 start{};
  GoalRule goal_rule = GoalRule::UniformFree;
  std::vector<Vec2> goal_candidates;  // for CornerCells / FixedFarEnd
  int max_episode_length = 500;

  bool cell_blocked(int cx, int cy) const;
  bool point_blocked(double x, double y) const;
  std::vector<Vec2> free_cell_centers() const;
  double diagonal() const;

  static MazeSpec make(Layout layout);
};

struct GcObservation {
  Vec2 position{};
  Vec2 goal{};
  std::array<double, 4> flat() const { return {position[0], position[1], goal[0], goal[1]}; }
};

struct StepResult {
  GcObservation obs;
  double reward = 0.0;
  bool done = false;
  bool success = false;
};

class Env {
 public:
  Env(Layout layout, std::uint64_t seed);

  GcObservation reset();
  StepResult step(const Vec2& action);

  // Dataset-collection hooks: goal resampling without episode termination.
  void set_terminate_on_success(bool flag) { terminate_on_success_ = flag; }
  void set_goal(const Vec2& goal) { goal_ = goal; }
  Vec2 sample_uniform_free_goal();
  Vec2 sample_goal();  // per the layout's goal rule

  const MazeSpec& spec() const { return spec_; }
  const Vec2& position() const { return position_; }
  const Vec2& goal() const { return goal_; }
  int steps_taken() const { return steps_; }
  bool done() const { return done_; }

 private:
  MazeSpec spec_;
  RngStream rng_;
  Vec2 position_{};
  Vec2 goal_{};
  int steps_ = 0;
  bool done_ = true;
  bool terminate_on_success_ = true;
};

// v = goal - pos, corrupted with isotropic Gaussian noise, rescaled only when
// the largest component magnitude exceeds 1.
Vec2 scripted_expert(const Vec2& pos, const Vec2& goal, double noise_std, RngStream& rng);

// ---------------------------------------------------------------------------
// offline data

struct Trajectory {
  std::vector<std::vector<double>> states;   // aligned (s_t, a_t) pairs
  std::vector<std::vector<double>> actions;
};

struct OfflineDataset {
  int state_dim = 0;
  int action_dim = 0;
  std::vector<Trajectory> trajectories;

  int total_pairs() const;
};

// Runs the scripted expert in the given layout; goals are uniform over free
// space and resampled on achievement. Stored states are positions only, so
// one dataset serves every conditioning variant.
OfflineDataset collect_dataset(Layout layout, int n_traj, int traj_len, double noise_std,
                               std::uint64_t seed);

// CSV with header traj_id,t,s0,s1,a0,a1; exact round trips.
void save_dataset(const OfflineDataset& dataset, const std::string& path);
OfflineDataset load_dataset(const std::string& path);

}  // namespace temporl::maze
