#include "temporl/maze.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace temporl::maze {

namespace {

double dist2d(const Vec2& a, const Vec2& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1];
  return std::sqrt(dx * dx + dy * dy);
}

// Open rectangle of cells [x0, x1] x [y0, y1], inclusive.
void carve(MazeSpec& spec, int x0, int y0, int x1, int y1) {
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) spec.blocked[static_cast<std::size_t>(y) * spec.width + x] = 0;
}

MazeSpec make_room(int side, const std::string& name) {
  MazeSpec spec;
  spec.name = name;
  spec.width = side;
  spec.height = side;
  spec.blocked.assign(static_cast<std::size_t>(side) * side, 0);
  const double c = side / 2.0;
  spec.start = {c, c};
  spec.goal_rule = GoalRule::CornerCells;
  spec.goal_candidates = {{0.5, 0.5},
                          {side - 0.5, 0.5},
                          {0.5, side - 0.5},
                          {side - 0.5, side - 0.5}};
  spec.max_episode_length = 500;
  return spec;
}

// U-shaped corridor: bottom leg, right connector, top leg; the whole
// structure fits in a (leg x 3) rectangle.
MazeSpec make_corridor(int leg, const std::string& name) {
  MazeSpec spec;
  spec.name = name;
  spec.width = leg;
  spec.height = 3;
  spec.blocked.assign(static_cast<std::size_t>(spec.width) * spec.height, 1);
  carve(spec, 0, 0, leg - 1, 0);        // bottom leg
  carve(spec, leg - 1, 0, leg - 1, 2);  // connector
  carve(spec, 0, 2, leg - 1, 2);        // top leg
  spec.start = {0.5, 0.5};
  spec.goal_rule = GoalRule::FixedFarEnd;
  spec.goal_candidates = {{0.5, 2.5}};
  spec.max_episode_length = 500;
  return spec;
}

// Three long corridors joined by two connectors, with two dead-end stubs.
// The unique shortest start-to-goal path is 20 + 3 + 20 + 3 + 20 = 66 steps.
MazeSpec make_maze() {
  MazeSpec spec;
  spec.name = "maze";
  spec.width = 23;
  spec.height = 9;
  spec.blocked.assign(static_cast<std::size_t>(spec.width) * spec.height, 1);
  carve(spec, 1, 1, 21, 1);    // bottom corridor
  carve(spec, 21, 2, 21, 3);   // right connector
  carve(spec, 1, 4, 21, 4);    // middle corridor
  carve(spec, 1, 5, 1, 6);     // left connector
  carve(spec, 1, 7, 21, 7);    // top corridor
  carve(spec, 11, 2, 11, 2);   // dead-end stub off the bottom corridor
  carve(spec, 11, 5, 11, 5);   // dead-end stub off the middle corridor
  spec.start = {1.5, 1.5};
  spec.goal_rule = GoalRule::FixedFarEnd;
  spec.goal_candidates = {{21.5, 7.5}};
  spec.max_episode_length = 500;
  return spec;
}

}  // namespace

Layout layout_from_name(const std::string& name) {
  if (name == "room") return Layout::Room;
  if (name == "room81") return Layout::Room81;
  if (name == "corridor") return Layout::Corridor;
  if (name == "corridor30") return Layout::Corridor30;
  if (name == "maze") return Layout::Maze;
  throw MazeError("unknown layout: " + name);
}

std::string layout_name(Layout layout) {
  switch (layout) {
    case Layout::Room: return "room";
    case Layout::Room81: return "room81";
    case Layout::Corridor: return "corridor";
    case Layout::Corridor30: return "corridor30";
    case Layout::Maze: return "maze";
  }
  return "room";
}

MazeSpec MazeSpec::make(Layout layout) {
  switch (layout) {
    case Layout::Room: return make_room(29, "room");
    case Layout::Room81: return make_room(81, "room81");
    case Layout::Corridor: return make_corridor(60, "corridor");
    case Layout::Corridor30: return make_corridor(30, "corridor30");
    case Layout::Maze: return make_maze();
  }
  throw MazeError("unknown layout");
}

bool MazeSpec::cell_blocked(int cx, int cy) const {
  if (cx < 0 || cy < 0 || cx >= width || cy >= height) return true;
  return blocked[static_cast<std::size_t>(cy) * width + cx] != 0;
}

bool MazeSpec::point_blocked(double x, double y) const {
  if (x < 0.0 || y < 0.0 || x >= static_cast<double>(width) || y >= static_cast<double>(height))
    return true;
  return cell_blocked(static_cast<int>(std::floor(x)), static_cast<int>(std::floor(y)));
}

std::vector<Vec2> MazeSpec::free_cell_centers() const {
  std::vector<Vec2> out;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (!cell_blocked(x, y)) out.push_back({x + 0.5, y + 0.5});
  return out;
}

double MazeSpec::diagonal() const {
  return std::sqrt(static_cast<double>(width) * width + static_cast<double>(height) * height);
}

// ---------------------------------------------------------------------------

Env::Env(Layout layout, std::uint64_t seed)
    : spec_(MazeSpec::make(layout)), rng_(seed, "env") {}

Vec2 Env::sample_uniform_free_goal() {
  // Rejection sampling over the bounding box.
  for (;;) {
    const double x = rng_.uniform(0.0, static_cast<double>(spec_.width));
    const double y = rng_.uniform(0.0, static_cast<double>(spec_.height));
    if (!spec_.point_blocked(x, y)) return {x, y};
  }
}

Vec2 Env::sample_goal() {
  switch (spec_.goal_rule) {
    case GoalRule::CornerCells:
      return spec_.goal_candidates[static_cast<std::size_t>(
          rng_.uniform_int(0, static_cast<std::int64_t>(spec_.goal_candidates.size()) - 1))];
    case GoalRule::FixedFarEnd:
      return spec_.goal_candidates.front();
    case GoalRule::UniformFree:
      return sample_uniform_free_goal();
  }
  return spec_.goal_candidates.front();
}

GcObservation Env::reset() {
  position_ = spec_.start;
  goal_ = sample_goal();
  steps_ = 0;
  done_ = false;
  return {position_, goal_};
}

StepResult Env::step(const Vec2& action) {
  if (done_) throw MazeError("Env::step after episode end");
  if (!std::isfinite(action[0]) || !std::isfinite(action[1]))
    throw MazeError("Env::step: non-finite action");

  const double ax = std::min(std::max(action[0], -1.0), 1.0);
  const double ay = std::min(std::max(action[1], -1.0), 1.0);

  // Axis-separated slide: a blocked axis component is dropped, the other
  // axis keeps its motion.
  Vec2 next = position_;
  if (!spec_.point_blocked(next[0] + ax, next[1])) next[0] += ax;
  if (!spec_.point_blocked(next[0], next[1] + ay)) next[1] += ay;
  position_ = next;
  ++steps_;

  StepResult result;
  result.success = dist2d(position_, goal_) < kSuccessRadius;
  result.reward = result.success ? 1.0 : 0.0;
  const bool horizon = steps_ >= spec_.max_episode_length;
  result.done = (result.success && terminate_on_success_) || horizon;
  done_ = result.done;
  result.obs = {position_, goal_};
  return result;
}

Vec2 scripted_expert(const Vec2& pos, const Vec2& goal, double noise_std, RngStream& rng) {
  Vec2 v{goal[0] - pos[0], goal[1] - pos[1]};
  if (noise_std > 0.0) {
    v[0] += noise_std * rng.normal();
    v[1] += noise_std * rng.normal();
  }
  const double max_abs = std::max(std::abs(v[0]), std::abs(v[1]));
  if (max_abs > 1.0) {
    v[0] /= max_abs;
    v[1] /= max_abs;
  }
  return v;
}

// ---------------------------------------------------------------------------

int OfflineDataset::total_pairs() const {
  int n = 0;
  for (const auto& t : trajectories) n += static_cast<int>(t.actions.size());
  return n;
}

OfflineDataset collect_dataset(Layout layout, int n_traj, int traj_len, double noise_std,
                               std::uint64_t seed) {
  if (n_traj < 1 || traj_len < 1) throw MazeError("collect_dataset: n_traj, traj_len >= 1");
  OfflineDataset dataset;
  dataset.state_dim = 2;
  dataset.action_dim = 2;
  RngStream expert_rng(seed, "expert");

  for (int i = 0; i < n_traj; ++i) {
    Env env(layout, RngStream::derive(seed, "collect") + static_cast<std::uint64_t>(i));
    env.set_terminate_on_success(false);
    env.reset();
    env.set_goal(env.sample_uniform_free_goal());

    Trajectory traj;
    traj.states.reserve(static_cast<std::size_t>(traj_len));
    traj.actions.reserve(static_cast<std::size_t>(traj_len));
    for (int t = 0; t < traj_len; ++t) {
      const Vec2 pos = env.position();
      const Vec2 act = scripted_expert(pos, env.goal(), noise_std, expert_rng);
      traj.states.push_back({pos[0], pos[1]});
      traj.actions.push_back({act[0], act[1]});
      const StepResult r = env.step(act);
      if (r.success) env.set_goal(env.sample_uniform_free_goal());
      if (r.done) break;  // horizon only; success no longer terminates
    }
    dataset.trajectories.push_back(std::move(traj));
  }
  return dataset;
}

void save_dataset(const OfflineDataset& dataset, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw MazeError("save_dataset: cannot open " + path);
  os << "traj_id,t,s0,s1,a0,a1\n";
  char buf[128];
  for (std::size_t i = 0; i < dataset.trajectories.size(); ++i) {
    const Trajectory& traj = dataset.trajectories[i];
    for (std::size_t t = 0; t < traj.actions.size(); ++t) {
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g,%.17g,%.17g\n", i, t,
                    traj.states[t][0], traj.states[t][1], traj.actions[t][0],
                    traj.actions[t][1]);
      os << buf;
    }
  }
  if (!os) throw MazeError("save_dataset: write failed " + path);
}

OfflineDataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MazeError("load_dataset: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw MazeError("load_dataset: empty file " + path);
  if (line != "traj_id,t,s0,s1,a0,a1")
    throw MazeError("load_dataset: bad header: " + line);

  OfflineDataset dataset;
  dataset.state_dim = 2;
  dataset.action_dim = 2;
  long long current_traj = -1;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    double vals[6];
    for (int f = 0; f < 6; ++f) {
      if (!std::getline(ss, field, ',') || field.empty())
        throw MazeError("load_dataset: parse error at line " + std::to_string(line_no));
      try {
        vals[f] = std::stod(field);
      } catch (const std::exception&) {
        throw MazeError("load_dataset: parse error at line " + std::to_string(line_no));
      }
    }
    if (std::getline(ss, field, ','))
      throw MazeError("load_dataset: too many columns at line " + std::to_string(line_no));
    const long long traj_id = static_cast<long long>(vals[0]);
    if (traj_id != current_traj) {
      if (traj_id != current_traj + 1)
        throw MazeError("load_dataset: non-contiguous traj_id at line " +
                        std::to_string(line_no));
      dataset.trajectories.emplace_back();
      current_traj = traj_id;
    }
    dataset.trajectories.back().states.push_back({vals[2], vals[3]});
    dataset.trajectories.back().actions.push_back({vals[4], vals[5]});
  }
  return dataset;
}

}  // namespace temporl::maze
