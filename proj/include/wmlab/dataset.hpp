#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "wmlab/env.hpp"
#include "wmlab/error.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

/// Offline testbed artifact: transitions in collection order, episode
/// boundaries carried by the termination flags. Pixels are kept at the
/// stored 8-bit resolution (value = round(255 p) / 255) so that training
/// results do not depend on whether a stage ran from memory or from disk.
struct TrajectoryDataset {
  std::string env_name;
  int grid_size = 0;
  int action_count = 0;
  uint64_t collection_seed = 0;
  std::vector<Transition> transitions;

  size_t size() const { return transitions.size(); }

  /// Exclusive end index of every episode, including the tail episode if
  /// the dataset ends mid-run.
  std::vector<size_t> episode_ends() const {
    std::vector<size_t> ends;
    for (size_t i = 0; i < transitions.size(); ++i)
      if (transitions[i].terminated) ends.push_back(i + 1);
    if (ends.empty() || ends.back() != transitions.size())
      ends.push_back(transitions.size());
    return ends;
  }
};

inline double quantize_pixel(double p) { return std::lround(255.0 * p) / 255.0; }

inline void quantize_observation(Observation& o) {
  for (double& p : o.pixels) p = quantize_pixel(p);
}

/// Contiguous index range [begin, end) over a dataset; training windows
/// never leave the view.
struct DatasetView {
  const TrajectoryDataset* data = nullptr;
  size_t begin = 0;
  size_t end = 0;

  size_t size() const { return end - begin; }
  const Transition& operator[](size_t i) const { return data->transitions[begin + i]; }
};

inline DatasetView full_view(const TrajectoryDataset& ds) {
  return {&ds, 0, ds.size()};
}

/// Contiguous tail split at the episode boundary nearest to the fraction
/// point. Windows later sampled from either view cannot straddle the cut.
inline std::pair<DatasetView, DatasetView> split_dataset(const TrajectoryDataset& ds,
                                                         double val_fraction = 0.1) {
  if (!(val_fraction > 0.0 && val_fraction <= 0.5))
    throw ContractError("val_fraction must lie in (0, 0.5]");
  if (ds.size() < 2) throw ContractError("dataset too small to split");
  const double target = (1.0 - val_fraction) * static_cast<double>(ds.size());
  size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (size_t e : ds.episode_ends()) {
    if (e == 0 || e >= ds.size()) continue;  // both views must be non-empty
    double d = std::abs(static_cast<double>(e) - target);
    if (d < best_dist) {
      best_dist = d;
      best = e;
    }
  }
  if (best == 0)
    throw ContractError(
        "cannot split: no interior episode boundary (a single episode spans the "
        "training share)");
  return {DatasetView{&ds, 0, best}, DatasetView{&ds, best, ds.size()}};
}

/// Start offsets (relative to the view) of every window of `steps`
/// consecutive transitions that fits inside the view.
inline std::vector<size_t> window_starts(const DatasetView& view, size_t steps) {
  std::vector<size_t> starts;
  if (view.size() >= steps)
    for (size_t s = 0; s + steps <= view.size(); ++s) starts.push_back(s);
  return starts;
}

namespace iodetail {

inline void put_bytes(std::string& buf, const void* p, size_t n) {
  buf.append(static_cast<const char*>(p), n);
}
template <typename T>
void put_pod(std::string& buf, T v) {
  put_bytes(buf, &v, sizeof(v));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  void take(void* p, size_t n) {
    if (pos + n > buf.size()) throw IoError("dataset file truncated");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  template <typename T>
  T pod() {
    T v;
    take(&v, sizeof(v));
    return v;
  }
};

}  // namespace iodetail

constexpr uint32_t kDatasetVersion = 1;

inline std::string serialize_dataset(const TrajectoryDataset& ds) {
  using namespace iodetail;
  std::string buf;
  buf.reserve(ds.size() * (static_cast<size_t>(ds.grid_size) * ds.grid_size + 16) + 64);
  put_bytes(buf, "WMDS", 4);
  put_pod<uint32_t>(buf, kDatasetVersion);
  put_pod<uint32_t>(buf, static_cast<uint32_t>(ds.env_name.size()));
  put_bytes(buf, ds.env_name.data(), ds.env_name.size());
  put_pod<uint32_t>(buf, static_cast<uint32_t>(ds.grid_size));
  put_pod<uint32_t>(buf, static_cast<uint32_t>(ds.action_count));
  put_pod<uint64_t>(buf, static_cast<uint64_t>(ds.size()));
  put_pod<uint64_t>(buf, ds.collection_seed);
  for (const Transition& tr : ds.transitions) {
    for (double p : tr.observation.pixels)
      put_pod<uint8_t>(buf, static_cast<uint8_t>(std::lround(255.0 * p)));
    put_pod<uint8_t>(buf, static_cast<uint8_t>(tr.action));
    put_pod<double>(buf, tr.reward);
    put_pod<uint8_t>(buf, tr.terminated ? 1 : 0);
  }
  put_pod<uint64_t>(buf, fnv1a64(buf.data(), buf.size()));
  return buf;
}

inline void save_dataset(const TrajectoryDataset& ds, const std::string& path) {
  std::string buf = serialize_dataset(ds);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("short write to " + path);
}

inline TrajectoryDataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 12) throw IoError("dataset file truncated: " + path);

  uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (fnv1a64(buf.data(), buf.size() - 8) != stored)
    throw IoError("dataset checksum mismatch: " + path);

  iodetail::Reader r{buf};
  char magic[4];
  r.take(magic, 4);
  if (std::memcmp(magic, "WMDS", 4) != 0) throw IoError("not a dataset file: " + path);
  uint32_t version = r.pod<uint32_t>();
  if (version != kDatasetVersion)
    throw IoError("dataset version mismatch: found " + std::to_string(version) +
                  ", expected " + std::to_string(kDatasetVersion));

  TrajectoryDataset ds;
  uint32_t name_len = r.pod<uint32_t>();
  ds.env_name.resize(name_len);
  r.take(ds.env_name.data(), name_len);
  ds.grid_size = static_cast<int>(r.pod<uint32_t>());
  ds.action_count = static_cast<int>(r.pod<uint32_t>());
  uint64_t count = r.pod<uint64_t>();
  ds.collection_seed = r.pod<uint64_t>();
  ds.transitions.resize(count);
  const size_t npix = static_cast<size_t>(ds.grid_size) * ds.grid_size;
  for (Transition& tr : ds.transitions) {
    tr.observation.grid = ds.grid_size;
    tr.observation.pixels.resize(npix);
    for (double& p : tr.observation.pixels) p = r.pod<uint8_t>() / 255.0;
    tr.action = r.pod<uint8_t>();
    tr.reward = r.pod<double>();
    tr.terminated = r.pod<uint8_t>() != 0;
  }
  return ds;
}

/// Keeps the earliest `count` transitions (the high-stochasticity part
/// of the collection schedule).
inline TrajectoryDataset truncate_front(const TrajectoryDataset& ds, size_t count) {
  if (count > ds.size())
    throw ContractError("requested share exceeds available data: " + std::to_string(count) +
                        " > " + std::to_string(ds.size()));
  TrajectoryDataset out = ds;
  out.transitions.resize(count);
  return out;
}

}  // namespace wmlab
