// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic weather-like fields, normalization, loss weighting, metrics and
// the sharded loader.
//
// Fields are sums of Fourier modes on the periodic lat-lon grid, advected
// zonally at a constant speed and damped by diffusion. Each value is a closed
// form of (step, lat, lon, channel), so a rank evaluates only its own cells.

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "jigsaw/errors.hpp"
#include "jigsaw/shard.hpp"
#include "jigsaw/tensor.hpp"

namespace jigsaw {

// ------------------------------------------------------------ sample spec

struct SampleSpec {
  std::size_t lat = 32, lon = 64;
  std::vector<std::string> surface_vars{"t2m", "u10"};
  std::vector<std::string> plevel_vars{"z", "t"};
  std::vector<int> levels{1000, 500};  // hPa
  std::vector<std::string> constant_vars{"orography", "land_sea_mask"};

  std::size_t channels() const {
    return surface_vars.size() + plevel_vars.size() * levels.size() + constant_vars.size();
  }

  /// "t2m", "z500", ..., "orography".
  std::vector<std::string> channel_names() const {
    std::vector<std::string> out(surface_vars);
    for (const auto& v : plevel_vars)
      for (int l : levels) out.push_back(v + std::to_string(l));
    out.insert(out.end(), constant_vars.begin(), constant_vars.end());
    return out;
  }

  /// Pressure level of channel c, or 0 for surface and constant channels.
  int channel_level(std::size_t c) const {
    const std::size_t s = surface_vars.size(), p = plevel_vars.size() * levels.size();
    if (c < s || c >= s + p) return 0;
    return levels[(c - s) % levels.size()];
  }
  /// Variable name of channel c (without level suffix).
  std::string channel_variable(std::size_t c) const {
    const std::size_t s = surface_vars.size(), p = plevel_vars.size() * levels.size();
    if (c < s) return surface_vars[c];
    if (c < s + p) return plevel_vars[(c - s) / levels.size()];
    return constant_vars.at(c - s - p);
  }
  bool is_constant(std::size_t c) const { return c >= channels() - constant_vars.size(); }

  bool operator==(const SampleSpec&) const = default;
};

// ------------------------------------------------------ synthetic fields

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t n_steps = 256;
  SampleSpec sample;
  double advection = 1.0;   // zonal speed in grid cells per step
  double diffusion = 1e-3;  // decay rate per unit squared wavenumber per step
  std::size_t modes = 3;    // Fourier modes per channel

  void validate() const {
    if (sample.lat < 4 || sample.lon < 4) throw ConfigError("data.grid must be at least 4x4");
    if (sample.channels() == 0) throw ConfigError("data.variables must define at least one channel");
    if (n_steps < 2) throw ConfigError("data.n_steps must be >= 2");
    if (modes == 0) throw ConfigError("data.modes must be >= 1");
    if (diffusion < 0) throw ConfigError("data.diffusion must be >= 0");
    for (int l : sample.levels)
      if (l <= 0) throw ConfigError("data.levels must be positive hPa values");
  }

  bool operator==(const SyntheticConfig&) const = default;
};

class SyntheticGenerator {
 public:
  struct Mode {
    std::size_t ky, kx;
    double amplitude, phase;
  };
  struct Channel {
    double offset, scale;
    bool constant;
    std::vector<Mode> modes;
  };

  explicit SyntheticGenerator(SyntheticConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const std::size_t kx_max = std::min<std::size_t>(3, cfg_.sample.lon / 2 - 1);
    const std::size_t ky_max = std::min<std::size_t>(2, cfg_.sample.lat / 2 - 1);
    std::vector<std::pair<std::size_t, std::size_t>> waves;
    for (std::size_t ky = 0; ky <= ky_max; ++ky)
      for (std::size_t kx = 1; kx <= kx_max; ++kx) waves.emplace_back(ky, kx);
    for (std::size_t c = 0; c < cfg_.sample.channels(); ++c) {
      Channel ch{4.0 * u01(rng) - 2.0, 1.0 + 9.0 * u01(rng), cfg_.sample.is_constant(c), {}};
      std::vector<std::pair<std::size_t, std::size_t>> pool = waves;
      for (std::size_t m = 0; m < cfg_.modes && !pool.empty(); ++m) {
        const std::size_t pick = rng() % pool.size();
        ch.modes.push_back({pool[pick].first, pool[pick].second, 0.5 + u01(rng), 2 * std::numbers::pi * u01(rng)});
        pool.erase(pool.begin() + std::ptrdiff_t(pick));
      }
      channels_.push_back(std::move(ch));
    }
  }

  const SyntheticConfig& config() const { return cfg_; }
  const SampleSpec& spec() const { return cfg_.sample; }
  std::size_t channels() const { return channels_.size(); }
  const Channel& channel(std::size_t c) const { return channels_.at(c); }

  /// Field value at step t, cell (i, j), channel c.
  double value(std::size_t t, std::size_t i, std::size_t j, std::size_t c) const {
    const Channel& ch = channels_[c];
    const double lat = double(cfg_.sample.lat), lon = double(cfg_.sample.lon);
    const double tt = ch.constant ? 0.0 : double(t);
    // Shift reduced modulo the period first so whole periods are exact.
    double x = std::fmod(double(j) - cfg_.advection * tt, lon);
    if (x < 0) x += lon;
    double v = 0;
    for (const Mode& m : ch.modes) {
      const double k2 = double(m.kx * m.kx + m.ky * m.ky);
      const double decay = cfg_.diffusion > 0 && tt > 0 ? std::exp(-cfg_.diffusion * k2 * tt) : 1.0;
      const double arg = 2 * std::numbers::pi * (double(m.ky) * double(i) / lat + double(m.kx) * x / lon) + m.phase;
      v += m.amplitude * decay * std::cos(arg);
    }
    return ch.offset + ch.scale * v;
  }

  /// Full field [lat, lon, C] at step t.
  template <Scalar T = double>
  Tensor<T> field(std::size_t t) const {
    const auto& s = cfg_.sample;
    Tensor<T> out({s.lat, s.lon, channels()});
    for (std::size_t i = 0; i < s.lat; ++i)
      for (std::size_t j = 0; j < s.lon; ++j)
        for (std::size_t c = 0; c < channels(); ++c) out[(i * s.lon + j) * channels() + c] = T(value(t, i, j, c));
    return out;
  }

 private:
  SyntheticConfig cfg_;
  std::vector<Channel> channels_;
};

/// All n_steps full fields, each [lat, lon, C].
inline std::vector<Tensor<double>> generate_synthetic(const SyntheticConfig& cfg) {
  SyntheticGenerator g(cfg);
  std::vector<Tensor<double>> out;
  out.reserve(cfg.n_steps);
  for (std::size_t t = 0; t < cfg.n_steps; ++t) out.push_back(g.field(t));
  return out;
}

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"seed", c.seed},
       {"n_steps", c.n_steps},
       {"grid", {c.sample.lat, c.sample.lon}},
       {"variables",
        {{"surface", c.sample.surface_vars}, {"plevel", c.sample.plevel_vars}, {"constant", c.sample.constant_vars}}},
       {"levels", c.sample.levels},
       {"advection", c.advection},
       {"diffusion", c.diffusion},
       {"modes", c.modes}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) j.at(key).get_to(out);
  };
  get("seed", c.seed);
  get("n_steps", c.n_steps);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    if (!g.is_array() || g.size() != 2) throw ConfigError("data.grid must be a 2-element array");
    c.sample.lat = g[0].get<std::size_t>();
    c.sample.lon = g[1].get<std::size_t>();
  }
  if (j.contains("variables")) {
    const auto& v = j.at("variables");
    if (v.contains("surface")) v.at("surface").get_to(c.sample.surface_vars);
    if (v.contains("plevel")) v.at("plevel").get_to(c.sample.plevel_vars);
    if (v.contains("constant")) v.at("constant").get_to(c.sample.constant_vars);
  }
  get("levels", c.sample.levels);
  get("advection", c.advection);
  get("diffusion", c.diffusion);
  get("modes", c.modes);
}

// ---------------------------------------------------------- normalization

struct NormStats {
  std::vector<double> mean, std;
  std::vector<bool> constant;
};

/// Per-channel population mean and std over samples of shape [..., C].
/// `Samples` needs size() and operator[] returning a tensor.
template <typename Samples>
NormStats zscore_fit(const Samples& samples) {
  if (samples.size() < 2) throw ShapeError("zscore_fit needs at least 2 samples");
  const Shape shape = samples[0].shape();
  const std::size_t C = shape.back();
  std::vector<long double> sum(C, 0), sq(C, 0);
  std::size_t count = 0;
  for (std::size_t t = 0; t < samples.size(); ++t) {
    const auto s = samples[t];
    if (s.shape() != shape) throw ShapeError("zscore_fit: inconsistent sample shapes");
    for (std::size_t k = 0; k < s.size(); ++k) sum[k % C] += s[k];
    count += s.size() / C;
  }
  NormStats st;
  for (std::size_t c = 0; c < C; ++c) st.mean.push_back(double(sum[c] / count));
  for (std::size_t t = 0; t < samples.size(); ++t) {
    const auto s = samples[t];
    for (std::size_t k = 0; k < s.size(); ++k) {
      const long double d = s[k] - st.mean[k % C];
      sq[k % C] += d * d;
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    const double sd = double(std::sqrt(sq[c] / count));
    const bool flat = !(sd > 1e-12 * std::max(1.0, std::abs(st.mean[c])));
    st.constant.push_back(flat);
    st.std.push_back(flat ? 1.0 : sd);
  }
  return st;
}

/// zscore_fit over every step of a generator without storing the fields.
inline NormStats zscore_fit(const SyntheticGenerator& g) {
  struct Steps {
    const SyntheticGenerator* g;
    std::size_t size() const { return g->config().n_steps; }
    Tensor<double> operator[](std::size_t t) const { return g->field(t); }
  };
  return zscore_fit(Steps{&g});
}

template <Scalar T>
Tensor<T> zscore_apply(const Tensor<T>& x, const NormStats& st) {
  const std::size_t C = st.mean.size();
  if (x.shape().back() != C) throw ShapeError("zscore_apply: channel count mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = T((double(x[k]) - st.mean[k % C]) / st.std[k % C]);
  return out;
}

template <Scalar T>
Tensor<T> zscore_invert(const Tensor<T>& x, const NormStats& st) {
  const std::size_t C = st.mean.size();
  if (x.shape().back() != C) throw ShapeError("zscore_invert: channel count mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = T(double(x[k]) * st.std[k % C] + st.mean[k % C]);
  return out;
}

// --------------------------------------------------- weights and metrics

/// Scales weights to mean 1.
inline std::vector<double> normalize_weights(std::vector<double> w) {
  double s = 0;
  for (double v : w) s += v;
  if (!(s > 0)) throw ShapeError("latitude weights are all zero");
  const double mean = s / double(w.size());
  for (double& v : w) v /= mean;
  return w;
}

/// cos(latitude) weights normalized to mean 1. Rows are cell centers by
/// default; with `include_poles` they span -90..90 inclusive.
inline std::vector<double> lat_weights(std::size_t rows, bool include_poles = false) {
  if (rows == 0) throw ShapeError("lat_weights: no rows");
  std::vector<double> w(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double phi;
    if (include_poles) phi = rows == 1 ? 0.0 : -90.0 + 180.0 * double(i) / double(rows - 1);
    else phi = -90.0 + (double(i) + 0.5) * 180.0 / double(rows);
    w[i] = std::cos(phi * std::numbers::pi / 180.0);
    if (std::abs(w[i]) < 1e-15) w[i] = 0;
  }
  return normalize_weights(w);
}

/// Weights for cos of the given latitudes in degrees.
inline std::vector<double> lat_weights_for(const std::vector<double>& latitudes_deg) {
  std::vector<double> w;
  for (double phi : latitudes_deg) w.push_back(std::max(0.0, std::cos(phi * std::numbers::pi / 180.0)));
  return normalize_weights(std::move(w));
}

/// Per-channel sqrt(mean over (batch, lat, lon) of w_lat * err^2). Accepts
/// [lat, lon, C] or [B, lat, lon, C].
template <Scalar T>
std::vector<double> lat_weighted_rmse(const Tensor<T>& pred, const Tensor<T>& target, const std::vector<double>& w) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("lat_weighted_rmse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const Shape& s = pred.shape();
  if (s.size() < 3) throw ShapeError("lat_weighted_rmse expects [..., lat, lon, C]");
  const std::size_t C = s[s.size() - 1], lon = s[s.size() - 2], lat = s[s.size() - 3];
  if (w.size() != lat) throw ShapeError("lat_weighted_rmse: weight count does not match latitude rows");
  std::vector<long double> acc(C, 0);
  const std::size_t cells = pred.size() / C;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const std::size_t row = (k / C / lon) % lat;
    const long double e = (long double)pred[k] - target[k];
    acc[k % C] += w[row] * e * e;
  }
  std::vector<double> out(C);
  for (std::size_t c = 0; c < C; ++c) out[c] = double(std::sqrt(acc[c] / cells));
  return out;
}

/// Pressure-level loss weights from high to low pressure.
inline const std::map<int, double>& pressure_level_weights() {
  static const std::map<int, double> table{{1000, 1.0}, {925, 1.0}, {850, 1.0}, {700, 1.0}, {600, 1.0},
                                           {500, 1.0},  {400, 0.9}, {300, 0.8}, {250, 0.7}, {200, 0.6},
                                           {150, 0.5},  {100, 0.4}, {50, 0.3}};
  return table;
}

struct WeightScheme {
  std::vector<double> lat;       // per latitude row, mean 1
  std::vector<double> var;       // per channel
  std::vector<double> plevel;    // per channel (1 for surface and constants)

  std::size_t channels() const { return var.size(); }
  double channel_weight(std::size_t c) const { return var[c] * plevel[c]; }

  static WeightScheme uniform(std::size_t lat_rows, std::size_t channels) {
    return {std::vector<double>(lat_rows, 1.0), std::vector<double>(channels, 1.0),
            std::vector<double>(channels, 1.0)};
  }

  /// Latitude, variable (by name, default 1) and pressure-level weights.
  static WeightScheme make(const SampleSpec& s, const std::map<std::string, double>& var_weights = {},
                           bool include_poles = false) {
    WeightScheme w;
    w.lat = lat_weights(s.lat, include_poles);
    for (std::size_t c = 0; c < s.channels(); ++c) {
      const auto it = var_weights.find(s.channel_variable(c));
      w.var.push_back(it == var_weights.end() ? 1.0 : it->second);
      const int level = s.channel_level(c);
      if (level == 0) {
        w.plevel.push_back(1.0);
      } else {
        const auto& table = pressure_level_weights();
        const auto lt = table.find(level);
        if (lt == table.end()) throw ConfigError("no pressure-level weight for " + std::to_string(level) + " hPa");
        w.plevel.push_back(lt->second);
      }
    }
    return w;
  }
};

/// Sum of lat*var*plevel weighted squared errors over a local block
/// [B, lat, lon_loc, C_loc] whose first valid_c channels start at global
/// channel c_off and first valid_lon longitudes are real cells.
template <Scalar T>
long double weighted_sq_error_sum(const Tensor<T>& pred, const Tensor<T>& target, const WeightScheme& w,
                                  std::size_t c_off, std::size_t valid_c, std::size_t valid_lon) {
  const Shape& s = pred.shape();
  const std::size_t lat = s[1], lon = s[2], C = s[3];
  long double acc = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const std::size_t c = k % C, j = (k / C) % lon, i = (k / C / lon) % lat;
    if (c >= valid_c || j >= valid_lon) continue;
    const long double e = (long double)pred[k] - target[k];
    acc += w.lat[i] * w.channel_weight(c_off + c) * e * e;
  }
  return acc;
}

/// Mean over all batch/space/channel elements of the weighted squared error.
template <Scalar T>
double weighted_mse_loss(const Tensor<T>& pred, const Tensor<T>& target, const WeightScheme& w) {
  if (pred.shape() != target.shape() || pred.ndim() != 4) {
    throw ShapeError("weighted_mse_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  if (w.channels() != pred.dim(3) || w.lat.size() != pred.dim(1)) {
    throw ShapeError("weighted_mse_loss: weight scheme does not match " + shape_str(pred.shape()));
  }
  return double(weighted_sq_error_sum(pred, target, w, 0, pred.dim(3), pred.dim(2)) / pred.size());
}

// ---------------------------------------------------------------- cache

/// One file per step: for each channel a plane with an 8-byte header
/// (u32 lat, u32 lon) followed by lat*lon little-endian f32 values.
inline std::filesystem::path cache_file(const std::filesystem::path& dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%06zu.bin", step);
  return dir / name;
}

inline void write_cache(const SyntheticGenerator& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& s = g.spec();
  const std::uint32_t hdr[2] = {std::uint32_t(s.lat), std::uint32_t(s.lon)};
  std::vector<float> plane(s.lat * s.lon);
  for (std::size_t t = 0; t < g.config().n_steps; ++t) {
    std::ofstream out(cache_file(dir, t), std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + cache_file(dir, t).string());
    for (std::size_t c = 0; c < g.channels(); ++c) {
      for (std::size_t i = 0; i < s.lat; ++i)
        for (std::size_t j = 0; j < s.lon; ++j) plane[i * s.lon + j] = float(g.value(t, i, j, c));
      out.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
      out.write(reinterpret_cast<const char*>(plane.data()), std::streamsize(plane.size() * sizeof(float)));
    }
  }
}

// --------------------------------------------------------------- loader

struct LoaderOptions {
  std::size_t batch = 1;
  std::size_t halo = 0;
  std::uint64_t seed = 0;
  std::size_t r_max = 1;
  std::filesystem::path cache_dir{};  // empty: evaluate the generator
};

/// Reads only this rank's (lon, channel) block of each sample, plus `halo`
/// longitude columns on each side with periodic wrap. Local layout is
/// [B, lat, halo + local_lon + halo, local_C]; padded cells are zero.
///
/// Every epoch draws one permutation of the N = n_steps - r_max start
/// indices from the shared seed; dp replica d takes positions d, d+R, ...
template <Scalar T>
class ShardedLoader {
 public:
  struct Batch {
    Tensor<T> input, target;
    std::vector<std::size_t> indices;
    std::size_t lead = 1;
  };

  ShardedLoader(const SyntheticGenerator& gen, NormStats stats, ShardSpec spec, LoaderOptions opt, int dp_rank = 0,
                int dp_size = 1)
      : gen_(&gen), stats_(std::move(stats)), spec_(spec), opt_(std::move(opt)), dp_rank_(dp_rank),
        dp_size_(dp_size) {
    const auto& s = gen.spec();
    if (spec_.global_rows != s.lon || spec_.global_cols != s.channels()) {
      throw ShapeError("loader shard spec " + shape_str({spec_.global_rows, spec_.global_cols}) +
                       " does not match (lon, channels) " + shape_str({s.lon, s.channels()}));
    }
    if (opt_.batch == 0) throw ConfigError("loader batch must be >= 1");
    if (opt_.r_max == 0 || opt_.r_max >= gen.config().n_steps) throw ConfigError("loader r_max out of range");
    if (dp_size_ < 1 || dp_rank_ < 0 || dp_rank_ >= dp_size_) throw ConfigError("loader dp rank out of range");
    std::size_t min_valid = s.lon;
    for (int r = 0; r < spec_.n; ++r) {
      const auto v = ShardSpec::make(spec_.n, r, s.lon, s.channels()).valid_rows();
      if (v > 0) min_valid = std::min(min_valid, v);
    }
    if (opt_.halo > min_valid) {
      throw ShapeError("halo width " + std::to_string(opt_.halo) + " exceeds neighbor longitude extent " +
                       std::to_string(min_valid));
    }
    if (steps_per_epoch() == 0) throw ConfigError("dataset too small for one step per epoch");
    start_epoch(0);
  }

  std::size_t samples() const { return gen_->config().n_steps - opt_.r_max; }
  std::size_t steps_per_epoch() const { return samples() / (std::size_t(dp_size_) * opt_.batch); }
  const ShardSpec& spec() const { return spec_; }
  const LoaderOptions& options() const { return opt_; }
  const NormStats& stats() const { return stats_; }
  Shape local_shape() const {
    return {opt_.batch, gen_->spec().lat, spec_.local_rows + 2 * opt_.halo, spec_.local_cols};
  }

  void start_epoch(std::size_t epoch) {
    epoch_ = epoch;
    perm_.resize(samples());
    for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
    std::mt19937_64 rng(opt_.seed ^ (0x9e3779b97f4a7c15ull * (epoch + 1)));
    for (std::size_t i = perm_.size(); i > 1; --i) std::swap(perm_[i - 1], perm_[rng() % i]);
  }
  std::size_t epoch() const { return epoch_; }

  /// Global start indices of a step's batch.
  std::vector<std::size_t> indices(std::size_t step) const {
    if (step >= steps_per_epoch()) throw ShapeError("loader step " + std::to_string(step) + " beyond epoch");
    std::vector<std::size_t> out;
    for (std::size_t b = 0; b < opt_.batch; ++b) {
      out.push_back(perm_[std::size_t(dp_rank_) + std::size_t(dp_size_) * (step * opt_.batch + b)]);
    }
    return out;
  }

  /// Input at each start index and target `lead` steps later.
  Batch load(std::size_t step, std::size_t lead = 1) const {
    if (lead < 1 || lead > opt_.r_max) throw ShapeError("lead " + std::to_string(lead) + " outside 1..r_max");
    Batch b;
    b.indices = indices(step);
    b.lead = lead;
    b.input = Tensor<T>(local_shape());
    b.target = Tensor<T>(local_shape());
    for (std::size_t k = 0; k < b.indices.size(); ++k) {
      fill_region(b.input, k, b.indices[k]);
      fill_region(b.target, k, b.indices[k] + lead);
    }
    return b;
  }

  /// Local block of step t only, shape [1, lat, lon_loc + 2h, C_loc].
  Tensor<T> load_step(std::size_t t) const {
    Shape s = local_shape();
    s[0] = 1;
    Tensor<T> out(s);
    fill_region(out, 0, t);
    return out;
  }

 private:
  /// Global longitude of local column q (halo included), or npos if padding.
  std::size_t global_lon(std::size_t q) const {
    const std::size_t lon = gen_->spec().lon, h = opt_.halo;
    const std::size_t off = spec_.row_offset(), valid = spec_.valid_rows();
    if (q < h) return (off + lon - (h - q)) % lon;
    if (q < h + spec_.local_rows) {
      const std::size_t j = q - h;
      return j < valid ? off + j : std::size_t(-1);
    }
    return (off + valid + (q - h - spec_.local_rows)) % lon;
  }

  void fill_region(Tensor<T>& out, std::size_t b, std::size_t t) const {
    const auto& s = gen_->spec();
    const std::size_t W = out.dim(2), C = out.dim(3);
    const std::size_t c_off = spec_.col_offset(), vc = spec_.valid_cols();
    T* base = out.data() + b * s.lat * W * C;
    if (!opt_.cache_dir.empty()) {
      read_cached(base, t, W, C);
      return;
    }
    for (std::size_t i = 0; i < s.lat; ++i)
      for (std::size_t q = 0; q < W; ++q) {
        const std::size_t j = global_lon(q);
        if (j == std::size_t(-1)) continue;
        for (std::size_t c = 0; c < vc; ++c) {
          const double v = gen_->value(t, i, j, c_off + c);
          base[(i * W + q) * C + c] = T((v - stats_.mean[c_off + c]) / stats_.std[c_off + c]);
        }
      }
  }

  void read_cached(T* base, std::size_t t, std::size_t W, std::size_t C) const {
    const auto& s = gen_->spec();
    const auto path = cache_file(opt_.cache_dir, t);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read cache file " + path.string());
    const std::size_t plane_bytes = 8 + s.lat * s.lon * sizeof(float);
    const std::size_t c_off = spec_.col_offset(), vc = spec_.valid_cols();
    for (std::size_t c = 0; c < vc; ++c) {
      const std::size_t gc = c_off + c;
      std::uint32_t hdr[2];
      in.seekg(std::streamoff(gc * plane_bytes));
      in.read(reinterpret_cast<char*>(hdr), sizeof hdr);
      if (!in || hdr[0] != s.lat || hdr[1] != s.lon) throw std::runtime_error("corrupt cache plane in " + path.string());
      for (std::size_t i = 0; i < s.lat; ++i)
        for (std::size_t q = 0; q < W; ++q) {
          const std::size_t j = global_lon(q);
          if (j == std::size_t(-1)) continue;
          float v;
          in.seekg(std::streamoff(gc * plane_bytes + 8 + (i * s.lon + j) * sizeof(float)));
          in.read(reinterpret_cast<char*>(&v), sizeof v);
          base[(i * W + q) * C + c] = T((double(v) - stats_.mean[gc]) / stats_.std[gc]);
        }
    }
    if (!in) throw std::runtime_error("short read from " + path.string());
  }

  const SyntheticGenerator* gen_;
  NormStats stats_;
  ShardSpec spec_;
  LoaderOptions opt_;
  int dp_rank_, dp_size_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

/// Removes `halo` longitude columns from each side of a local block.
template <Scalar T>
Tensor<T> strip_halo(const Tensor<T>& x, std::size_t halo) {
  if (halo == 0) return x;
  const Shape& s = x.shape();
  const std::size_t W = s[2] - 2 * halo, C = s[3];
  Tensor<T> out({s[0], s[1], W, C});
  for (std::size_t r = 0; r < s[0] * s[1]; ++r)
    std::copy_n(x.data() + (r * s[2] + halo) * C, W * C, out.data() + r * W * C);
  return out;
}

}  // namespace jigsaw
