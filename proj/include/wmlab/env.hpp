#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "wmlab/error.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

struct EnvSpec {
  std::string name;
  int grid_size = 16;
  int action_count = 0;
  int max_episode_steps = 0;
  std::string regime_hint;  // design intent only; training code never reads it
};

/// G x G grayscale frame, row-major, every entry in [0, 1].
struct Observation {
  int grid = 0;
  std::vector<double> pixels;

  double at(int row, int col) const {
    return pixels[static_cast<size_t>(row) * grid + col];
  }
};

struct Transition {
  Observation observation;
  int action = 0;
  double reward = 0.0;
  bool terminated = false;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool terminated = false;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual Observation reset(uint64_t seed) = 0;
  virtual StepResult step(int action) = 0;
  /// Discretized object-cell layout; distinct signatures must render to
  /// distinct pixel grids.
  virtual std::vector<int> state_signature() const = 0;
};

namespace envdetail {

constexpr int kGrid = 16;

// sprite intensities
constexpr double kAgent = 1.0;
constexpr double kCar = 0.5;
constexpr double kEnemy = 0.75;
constexpr double kEnemyOnPellet = 0.85;
constexpr double kOverlap = 0.9;
constexpr double kPellet = 0.4;
constexpr double kWall = 0.2;
constexpr double kPaddle = 0.7;
constexpr double kBall = 1.0;

class EnvBase : public Env {
 public:
  const EnvSpec& spec() const override { return spec_; }

  StepResult step(int action) final {
    if (!alive_) throw ContractError(spec_.name + ": step() after termination");
    if (action < 0 || action >= spec_.action_count)
      throw IndexError(spec_.name + ": action out of range");
    StepResult r = advance(action);
    ++steps_;
    if (steps_ >= spec_.max_episode_steps) r.terminated = true;
    if (r.terminated) alive_ = false;
    r.observation = render();
    return r;
  }

  Observation reset(uint64_t seed) final {
    steps_ = 0;
    alive_ = true;
    place(seed);
    return render();
  }

 protected:
  explicit EnvBase(EnvSpec spec) : spec_(std::move(spec)) {}
  virtual StepResult advance(int action) = 0;
  virtual void place(uint64_t seed) = 0;
  virtual Observation render() const = 0;

  Observation blank() const {
    Observation o;
    o.grid = spec_.grid_size;
    o.pixels.assign(static_cast<size_t>(o.grid) * o.grid, 0.0);
    return o;
  }

  static void put(Observation& o, int row, int col, double v) {
    o.pixels[static_cast<size_t>(row) * o.grid + col] =
        std::max(o.pixels[static_cast<size_t>(row) * o.grid + col], v);
  }

  EnvSpec spec_;
  int steps_ = 0;
  bool alive_ = false;
};

/// Road-crossing lanes with constant-velocity traffic. Reaching the top
/// row pays +1 and teleports the agent back to the bottom; a collision
/// shoves it down one row. Episodes have a fixed length.
class LaneCross final : public EnvBase {
 public:
  LaneCross()
      : EnvBase({.name = "lanecross",
                 .grid_size = kGrid,
                 .action_count = 3,  // noop, up, down
                 .max_episode_steps = 120,
                 .regime_hint = "SATURATED"}) {}

  std::vector<int> state_signature() const override {
    // cars are visually identical, so the observable layout is the
    // sorted cell set, not the labeled car list
    std::vector<int> cells;
    for (const Car& c : cars_) cells.push_back(c.row * kGrid + c.col);
    std::sort(cells.begin(), cells.end());
    std::vector<int> sig = {row_, col_};
    sig.insert(sig.end(), cells.begin(), cells.end());
    return sig;
  }

 private:
  struct Car {
    int row, col, dir, period;
  };

  void place(uint64_t seed) override {
    Rng rng(derive_seed(seed, "lanecross-reset"));
    row_ = kGrid - 1;
    col_ = rng.uniform_int(kGrid);
    cars_.clear();
    tick_ = 0;
    // two cars per lane; alternating direction, two slow lanes
    for (int lane = 0; lane < 4; ++lane) {
      int r = 3 * (lane + 1);  // rows 3, 6, 9, 12
      int dir = lane % 2 == 0 ? 1 : -1;
      int period = lane < 2 ? 2 : 1;
      for (int k = 0; k < 2; ++k)
        cars_.push_back({r, (lane * 5 + k * 8) % kGrid, dir, period});
    }
  }

  StepResult advance(int action) override {
    ++tick_;
    for (Car& c : cars_)
      if (tick_ % c.period == 0) c.col = (c.col + c.dir + kGrid) % kGrid;
    if (action == 1) row_ = std::max(0, row_ - 1);
    if (action == 2) row_ = std::min(kGrid - 1, row_ + 1);

    StepResult r;
    if (row_ == 0) {
      r.reward = 1.0;
      row_ = kGrid - 1;
    } else {
      for (const Car& c : cars_)
        if (c.row == row_ && c.col == col_) {
          row_ = std::min(kGrid - 1, row_ + 1);  // car lanes are non-adjacent
          break;
        }
    }
    return r;
  }

  Observation render() const override {
    Observation o = blank();
    for (const Car& c : cars_) put(o, c.row, c.col, kCar);
    put(o, row_, col_, kAgent);
    return o;
  }

  int row_ = 0, col_ = 0, tick_ = 0;
  std::vector<Car> cars_;
};

/// Column shooter: enemies descend at per-column speeds, firing clears
/// the lowest enemy in the agent's column for +1, and any enemy that
/// reaches the bottom row ends the episode.
class ScrollShoot final : public EnvBase {
 public:
  ScrollShoot()
      : EnvBase({.name = "scrollshoot",
                 .grid_size = kGrid,
                 .action_count = 4,  // noop, left, right, fire
                 .max_episode_steps = 160,
                 .regime_hint = "MONOTONIC"}) {}

  std::vector<int> state_signature() const override {
    std::vector<int> sig = {col_};
    for (size_t i = 0; i < kColumns.size(); ++i)
      sig.push_back(enemy_row_[i] < 0 ? -1 : enemy_row_[i] * kGrid + kColumns[i]);
    return sig;
  }

 private:
  static constexpr std::array<int, 4> kColumns = {2, 6, 9, 13};
  static constexpr std::array<int, 4> kPeriods = {3, 2, 4, 3};

  void place(uint64_t seed) override {
    Rng rng(derive_seed(seed, "scrollshoot-reset"));
    col_ = rng.uniform_int(kGrid);
    tick_ = 0;
    for (size_t i = 0; i < kColumns.size(); ++i) enemy_row_[i] = rng.uniform_int(5);
  }

  StepResult advance(int action) override {
    ++tick_;
    StepResult r;
    if (action == 1) col_ = std::max(0, col_ - 1);
    if (action == 2) col_ = std::min(kGrid - 1, col_ + 1);
    if (action == 3) {
      // instant beam up the agent's column: clears the lowest enemy there
      int best = -1;
      for (size_t i = 0; i < kColumns.size(); ++i)
        if (kColumns[i] == col_ && enemy_row_[i] >= 0 &&
            (best < 0 || enemy_row_[i] > enemy_row_[static_cast<size_t>(best)]))
          best = static_cast<int>(i);
      if (best >= 0) {
        enemy_row_[static_cast<size_t>(best)] = -1;
        r.reward = 1.0;
      }
    }
    for (size_t i = 0; i < kColumns.size(); ++i) {
      if (enemy_row_[i] < 0) {
        enemy_row_[i] = 0;  // respawn at the top
        continue;
      }
      if (tick_ % kPeriods[i] == 0) ++enemy_row_[i];
      if (enemy_row_[i] >= kGrid - 1) {
        enemy_row_[i] = kGrid - 1;
        r.terminated = true;
      }
    }
    return r;
  }

  Observation render() const override {
    Observation o = blank();
    for (size_t i = 0; i < kColumns.size(); ++i)
      if (enemy_row_[i] >= 0) {
        bool on_agent = enemy_row_[i] == kGrid - 1 && kColumns[i] == col_;
        put(o, enemy_row_[i], kColumns[i], on_agent ? kOverlap : 0.6);
      }
    put(o, kGrid - 1, col_, kAgent);
    return o;
  }

  int col_ = 0, tick_ = 0;
  std::array<int, 4> enemy_row_ = {0, 0, 0, 0};
};

/// Fixed maze with pellets and one stochastically turning enemy; pellets
/// pay +1 and enemy contact ends the episode.
class MazeChase final : public EnvBase {
 public:
  MazeChase()
      : EnvBase({.name = "mazechase",
                 .grid_size = kGrid,
                 .action_count = 4,  // up, down, left, right
                 .max_episode_steps = 200,
                 .regime_hint = "CLASSICAL"}) {}

  std::vector<int> state_signature() const override {
    std::vector<int> sig = {agent_, enemy_};
    for (size_t i = 0; i < pellet_.size(); ++i)
      if (pellet_[i]) sig.push_back(static_cast<int>(i));
    return sig;
  }

  static bool wall_at(int row, int col) {
    return kLayout[static_cast<size_t>(row)][static_cast<size_t>(col)] == '#';
  }

 private:
  static constexpr std::array<const char*, 16> kLayout = {
      "################",
      "#......##......#",
      "#.####.##.####.#",
      "#..............#",
      "#.##.######.##.#",
      "#.##.######.##.#",
      "#....##..##....#",
      "####.##..##.####",
      "#....#....#....#",
      "#.##.#.##.#.##.#",
      "#..#...##...#..#",
      "##.#.######.#.##",
      "#..............#",
      "#.####.##.####.#",
      "#......##......#",
      "################"};

  static constexpr std::array<int, 8> kStarts = {
      1 * kGrid + 1,  1 * kGrid + 14, 14 * kGrid + 1, 14 * kGrid + 14,
      3 * kGrid + 1,  3 * kGrid + 14, 12 * kGrid + 1, 12 * kGrid + 14};

  static constexpr std::array<int, 4> kMoves = {-kGrid, kGrid, -1, 1};  // U D L R

  void place(uint64_t seed) override {
    enemy_rng_ = Rng(derive_seed(seed, "mazechase-enemy"));
    Rng rng(derive_seed(seed, "mazechase-reset"));
    agent_ = kStarts[static_cast<size_t>(rng.uniform_int(static_cast<int>(kStarts.size())))];
    enemy_ = 8 * kGrid + 7;
    enemy_dir_ = 3;
    pellet_.assign(static_cast<size_t>(kGrid) * kGrid, false);
    for (int r = 0; r < kGrid; ++r)
      for (int c = 0; c < kGrid; ++c) {
        int cell = r * kGrid + c;
        if (!wall_at(r, c) && cell != agent_ && cell != enemy_)
          pellet_[static_cast<size_t>(cell)] = true;
      }
  }

  static bool legal(int cell, int dir) {
    int next = cell + kMoves[static_cast<size_t>(dir)];
    int r = next / kGrid, c = next % kGrid;
    return !wall_at(r, c);
  }

  StepResult advance(int action) override {
    StepResult res;
    int prev_agent = agent_;
    if (legal(agent_, action)) agent_ += kMoves[static_cast<size_t>(action)];

    int prev_enemy = enemy_;
    // corridor-following ghost: random legal turn, no reversal unless stuck
    std::vector<int> options;
    for (int d = 0; d < 4; ++d)
      if (legal(enemy_, d) && d != reverse(enemy_dir_)) options.push_back(d);
    if (options.empty()) options.push_back(reverse(enemy_dir_));
    enemy_dir_ = options[static_cast<size_t>(enemy_rng_.uniform_int(static_cast<int>(options.size())))];
    if (legal(enemy_, enemy_dir_)) enemy_ += kMoves[static_cast<size_t>(enemy_dir_)];

    if (pellet_[static_cast<size_t>(agent_)]) {
      pellet_[static_cast<size_t>(agent_)] = false;
      res.reward = 1.0;
    }
    bool contact = agent_ == enemy_ || (agent_ == prev_enemy && enemy_ == prev_agent);
    bool cleared = std::none_of(pellet_.begin(), pellet_.end(), [](bool b) { return b; });
    res.terminated = contact || cleared;
    return res;
  }

  static int reverse(int dir) { return dir ^ 1; }

  Observation render() const override {
    Observation o = blank();
    for (int r = 0; r < kGrid; ++r)
      for (int c = 0; c < kGrid; ++c) {
        int cell = r * kGrid + c;
        if (wall_at(r, c))
          put(o, r, c, kWall);
        else if (pellet_[static_cast<size_t>(cell)])
          put(o, r, c, kPellet);
      }
    bool on_pellet = pellet_[static_cast<size_t>(enemy_)];
    put(o, enemy_ / kGrid, enemy_ % kGrid, on_pellet ? kEnemyOnPellet : kEnemy);
    if (agent_ == enemy_)
      put(o, agent_ / kGrid, agent_ % kGrid, kOverlap);
    else
      put(o, agent_ / kGrid, agent_ % kGrid, kAgent);
    return o;
  }

  int agent_ = 0, enemy_ = 0, enemy_dir_ = 0;
  std::vector<bool> pellet_;
  Rng enemy_rng_{0};
};

/// Continuous-state ball against a paddle. Every paddle hit pays +1 and
/// speeds the ball up by 1.1x; a miss pays -1 and ends the episode.
class BounceCourt final : public EnvBase {
 public:
  BounceCourt()
      : EnvBase({.name = "bouncecourt",
                 .grid_size = kGrid,
                 .action_count = 3,  // noop, left, right
                 .max_episode_steps = 250,
                 .regime_hint = "CANONICAL"}) {}

  std::vector<int> state_signature() const override {
    return {ball_cell_row(), ball_cell_col(), paddle_};
  }

 private:
  static constexpr double kSpeedup = 1.1;
  static constexpr double kMaxSpeed = 1.8;
  static constexpr int kHalfWidth = 2;  // paddle spans [c-2, c+1]

  void place(uint64_t seed) override {
    Rng rng(derive_seed(seed, "bouncecourt-reset"));
    x_ = 2.0 + 12.0 * rng.uniform();
    y_ = 1.0 + 2.0 * rng.uniform();
    double angle = (0.25 + 0.5 * rng.uniform()) * M_PI;  // downward cone
    double speed = 0.45;
    vx_ = speed * std::cos(angle);
    vy_ = speed * std::sin(angle);
    if (std::abs(vx_) < 0.08) vx_ = vx_ < 0 ? -0.08 : 0.08;
    paddle_ = 3 + rng.uniform_int(kGrid - 6);
  }

  StepResult advance(int action) override {
    StepResult r;
    if (action == 1) paddle_ = std::max(kHalfWidth, paddle_ - 1);
    if (action == 2) paddle_ = std::min(kGrid - 1 - kHalfWidth + 1, paddle_ + 1);

    x_ += vx_;
    y_ += vy_;
    const double hi = kGrid - 1;
    if (x_ < 0.0) {
      x_ = -x_;
      vx_ = -vx_;
    }
    if (x_ > hi) {
      x_ = 2 * hi - x_;
      vx_ = -vx_;
    }
    if (y_ < 0.0) {
      y_ = -y_;
      vy_ = -vy_;
    }
    if (y_ >= hi) {
      int bc = ball_cell_col();
      if (bc >= paddle_ - kHalfWidth && bc <= paddle_ + kHalfWidth - 1) {
        y_ = 2 * hi - y_;
        vy_ = -vy_;
        double s = std::hypot(vx_, vy_);
        double scale = std::min(kSpeedup, kMaxSpeed / s);
        vx_ *= scale;
        vy_ *= scale;
        r.reward = 1.0;
      } else {
        y_ = hi;
        r.reward = -1.0;
        r.terminated = true;
      }
    }
    return r;
  }

  int ball_cell_row() const { return std::clamp(static_cast<int>(std::lround(y_)), 0, kGrid - 1); }
  int ball_cell_col() const { return std::clamp(static_cast<int>(std::lround(x_)), 0, kGrid - 1); }

  Observation render() const override {
    Observation o = blank();
    for (int c = paddle_ - kHalfWidth; c < paddle_ + kHalfWidth; ++c)
      if (c >= 0 && c < kGrid) put(o, kGrid - 1, c, kPaddle);
    put(o, ball_cell_row(), ball_cell_col(), kBall);
    return o;
  }

  double x_ = 0, y_ = 0, vx_ = 0, vy_ = 0;
  int paddle_ = 0;
};

}  // namespace envdetail

inline const std::vector<std::string>& env_names() {
  static const std::vector<std::string> names = {"lanecross", "scrollshoot", "mazechase",
                                                 "bouncecourt"};
  return names;
}

inline std::unique_ptr<Env> make_env(const std::string& name) {
  if (name == "lanecross") return std::make_unique<envdetail::LaneCross>();
  if (name == "scrollshoot") return std::make_unique<envdetail::ScrollShoot>();
  if (name == "mazechase") return std::make_unique<envdetail::MazeChase>();
  if (name == "bouncecourt") return std::make_unique<envdetail::BounceCourt>();
  throw IoError("unknown environment: " + name);
}

inline EnvSpec env_spec(const std::string& name) { return make_env(name)->spec(); }

/// Shared action vocabulary across all families; sized by the largest
/// local action set so unified models can train on mixed batches.
inline int global_action_vocab() {
  int vocab = 0;
  for (const auto& n : env_names()) vocab = std::max(vocab, env_spec(n).action_count);
  return vocab;
}

/// Injective, stable map into the shared vocabulary. Local ids are
/// 0-based and contiguous in every family, so the identity embedding is
/// already injective; it is also exactly the identity for the family
/// with the largest action set.
inline int global_action_id(const EnvSpec& spec, int local_action) {
  if (local_action < 0 || local_action >= spec.action_count)
    throw IndexError(spec.name + ": local action out of range");
  return local_action;
}

inline int local_action_from_global(const EnvSpec& spec, int global_id) {
  if (global_id < 0 || global_id >= spec.action_count)
    throw IndexError(spec.name + ": global action id has no local counterpart");
  return global_id;
}

/// Binary PGM (P5) frame dump for eyeballing environments.
inline void write_pgm(const std::string& path, const Observation& obs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "P5\n" << obs.grid << " " << obs.grid << "\n255\n";
  for (double p : obs.pixels) {
    unsigned char b = static_cast<unsigned char>(std::lround(255.0 * std::clamp(p, 0.0, 1.0)));
    f.write(reinterpret_cast<const char*>(&b), 1);
  }
}

}  // namespace wmlab
