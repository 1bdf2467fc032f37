#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dualdyn/tensor.hpp"

namespace dualdyn {

/// One irregularly observed multichannel series.
struct Series {
  std::string id;
  std::vector<double> times;  // strictly increasing
  Tensor values;              // [channels, length]; slots with mask false are ignored as inputs
  Mask mask;                  // true = observed
  Mask held_out;              // slots hidden by inject_missingness; their true values stay in `values`
  int label = -1;             // class id, -1 when unlabeled
  std::vector<double> horizon_times;
  Tensor horizon;             // [channels, horizon] future values, empty when not forecasting

  std::size_t channels() const { return values.rows(); }
  std::size_t length() const { return times.size(); }
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct TimeSeriesBatch {
  std::vector<Series> series;
  std::size_t channels = 0;
  std::size_t num_classes = 0;  // 0 for unlabeled data
  NormStats stats;              // empty until split() normalizes

  std::size_t size() const { return series.size(); }
};

namespace detail {

inline Series make_series(std::string id, std::vector<double> times, std::size_t channels) {
  Series s;
  s.id = std::move(id);
  s.values = Tensor(Shape{channels, times.size()});
  s.mask = Mask(channels, times.size(), true);
  s.held_out = Mask(channels, times.size(), false);
  s.times = std::move(times);
  return s;
}

}  // namespace detail

/// Noisy 2-channel spirals on a regular grid over [0, 1]. The first n/2 turn
/// clockwise (label 0), the rest counter-clockwise (label 1). Start angle,
/// radius and angular speed are random, so x0 carries no label information.
inline TimeSeriesBatch gen_spirals(std::size_t n, std::size_t length, double noise_std, std::uint64_t seed) {
  if (n == 0 || n % 2 != 0) throw Error("gen_spirals: n must be positive and even");
  if (length < 10) throw Error("gen_spirals: length must be at least 10");
  if (noise_std < 0.0) throw Error("gen_spirals: noise_std must be non-negative");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> radius(0.8, 1.2);
  std::uniform_real_distribution<double> speed(1.5 * std::numbers::pi, 2.5 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  TimeSeriesBatch batch;
  batch.channels = 2;
  batch.num_classes = 2;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> times(length);
    for (std::size_t i = 0; i < length; ++i) times[i] = double(i) / double(length - 1);
    Series s = detail::make_series("spiral" + std::to_string(k), times, 2);
    s.label = k < n / 2 ? 0 : 1;
    const double dir = s.label == 0 ? -1.0 : 1.0;
    const double phi0 = phase(rng), a = radius(rng), w = speed(rng);
    for (std::size_t i = 0; i < length; ++i) {
      const double t = s.times[i];
      const double r = a * (0.3 + t);
      const double th = phi0 + dir * w * t;
      s.values.at(0, i) = r * std::cos(th) + noise_std * noise(rng);
      s.values.at(1, i) = r * std::sin(th) + noise_std * noise(rng);
    }
    batch.series.push_back(std::move(s));
  }
  return batch;
}

/// x(t) = e^{-γt} (cos(ωt + φ), sin(ωt + φ)) sampled every `dt`; the first
/// `length` points are observed and the next `horizon` become targets.
inline Series damped_oscillator_series(double gamma, double omega, double phase, std::size_t length,
                                       std::size_t horizon, double dt = 0.1) {
  auto value = [&](double t, std::size_t c) {
    const double a = std::exp(-gamma * t);
    return c == 0 ? a * std::cos(omega * t + phase) : a * std::sin(omega * t + phase);
  };
  std::vector<double> times(length);
  for (std::size_t i = 0; i < length; ++i) times[i] = dt * double(i);
  Series s = detail::make_series("", times, 2);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t c = 0; c < 2; ++c) s.values.at(c, i) = value(s.times[i], c);
  s.horizon = Tensor(Shape{2, horizon});
  for (std::size_t h = 0; h < horizon; ++h) {
    const double t = dt * double(length + h);
    s.horizon_times.push_back(t);
    for (std::size_t c = 0; c < 2; ++c) s.horizon.at(c, h) = value(t, c);
  }
  return s;
}

inline TimeSeriesBatch gen_damped_oscillator(std::size_t n, std::size_t length, std::size_t horizon,
                                             std::uint64_t seed) {
  if (n == 0) throw Error("gen_damped_oscillator: n must be positive");
  if (length < 2 || horizon < 1) throw Error("gen_damped_oscillator: need length >= 2 and horizon >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> gamma(0.05, 0.3);
  std::uniform_real_distribution<double> omega(1.0, 2.5);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  TimeSeriesBatch batch;
  batch.channels = 2;
  for (std::size_t k = 0; k < n; ++k) {
    const double g = gamma(rng), w = omega(rng), p = phase(rng);
    Series s = damped_oscillator_series(g, w, p, length, horizon);
    s.id = "osc" + std::to_string(k);
    batch.series.push_back(std::move(s));
  }
  return batch;
}

/**
 * Hides floor(rate * (L - 1)) of the non-initial points of every channel,
 * drawn uniformly without replacement from a generator seeded by
 * (seed, series index, channel). The first point is never hidden.
 */
inline TimeSeriesBatch inject_missingness(TimeSeriesBatch batch, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("inject_missingness: rate must lie in [0, 1)");
  for (std::size_t s = 0; s < batch.series.size(); ++s) {
    Series& ser = batch.series[s];
    const std::size_t L = ser.length();
    const auto target = std::size_t(std::floor(rate * double(L - 1)));
    for (std::size_t c = 0; c < ser.channels(); ++c) {
      std::vector<std::size_t> candidates;
      for (std::size_t i = 1; i < L; ++i)
        if (ser.mask(c, i)) candidates.push_back(i);
      // Keep at least one non-initial observation per channel.
      const std::size_t count = std::min(target, candidates.empty() ? 0 : candidates.size() - 1);
      std::seed_seq seq{std::uint64_t(seed), std::uint64_t(s), std::uint64_t(c)};
      std::mt19937_64 rng(seq);
      std::shuffle(candidates.begin(), candidates.end(), rng);
      for (std::size_t k = 0; k < count; ++k) {
        ser.mask.set(c, candidates[k], false);
        ser.held_out.set(c, candidates[k], true);
      }
    }
  }
  return batch;
}

struct Splits {
  TimeSeriesBatch train, val, test;
  std::vector<std::size_t> train_index, val_index, test_index;  // positions in the input batch
};

namespace detail {

inline TimeSeriesBatch subset(const TimeSeriesBatch& b, const std::vector<std::size_t>& idx) {
  TimeSeriesBatch out;
  out.channels = b.channels;
  out.num_classes = b.num_classes;
  for (std::size_t i : idx) out.series.push_back(b.series[i]);
  return out;
}

inline void apply_norm(TimeSeriesBatch& b, const NormStats& st) {
  b.stats = st;
  for (Series& s : b.series) {
    for (std::size_t c = 0; c < s.channels(); ++c) {
      for (std::size_t i = 0; i < s.length(); ++i) s.values.at(c, i) = (s.values.at(c, i) - st.mean[c]) / st.std[c];
      for (std::size_t h = 0; h < s.horizon_times.size(); ++h)
        s.horizon.at(c, h) = (s.horizon.at(c, h) - st.mean[c]) / st.std[c];
    }
  }
}

}  // namespace detail

/// Per-channel mean/std over observed entries only.
inline NormStats observed_stats(const TimeSeriesBatch& b) {
  NormStats st;
  st.mean.assign(b.channels, 0.0);
  st.std.assign(b.channels, 1.0);
  for (std::size_t c = 0; c < b.channels; ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const Series& s : b.series)
      for (std::size_t i = 0; i < s.length(); ++i)
        if (s.mask(c, i)) {
          sum += s.values.at(c, i);
          ++n;
        }
    if (n == 0) continue;
    const double mean = sum / double(n);
    double sq = 0.0;
    for (const Series& s : b.series)
      for (std::size_t i = 0; i < s.length(); ++i)
        if (s.mask(c, i)) sq += (s.values.at(c, i) - mean) * (s.values.at(c, i) - mean);
    const double sd = std::sqrt(sq / double(n));
    st.mean[c] = mean;
    st.std[c] = sd > 0.0 ? sd : 1.0;
  }
  return st;
}

/**
 * Train/val/test partition. Validation and test sizes are floor(ratio * n);
 * train takes the remainder. With `stratify`, members of each class are
 * interleaved proportionally before cutting, so every split is balanced to
 * within one series per class. All splits are normalized with statistics of
 * the training split.
 */
inline Splits split(const TimeSeriesBatch& batch, double train_ratio, double val_ratio, double test_ratio,
                    std::uint64_t seed, bool stratify) {
  if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9 || train_ratio < 0 || val_ratio < 0 ||
      test_ratio < 0) {
    throw Error("split: ratios must be non-negative and sum to 1");
  }
  const std::size_t n = batch.size();
  if (n < 10) throw Error("split: need at least 10 series");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (stratify) {
    std::map<int, std::vector<std::size_t>> classes;
    for (std::size_t i = 0; i < n; ++i) classes[batch.series[i].label].push_back(i);
    struct Keyed {
      double key;
      int cls;
      std::size_t idx;
    };
    std::vector<Keyed> keyed;
    for (auto& [cls, members] : classes) {
      if (members.size() < 3) {
        throw Error("split: class " + std::to_string(cls) + " has fewer than 3 members");
      }
      std::shuffle(members.begin(), members.end(), rng);
      for (std::size_t r = 0; r < members.size(); ++r)
        keyed.push_back({(double(r) + 0.5) / double(members.size()), cls, members[r]});
    }
    std::sort(keyed.begin(), keyed.end(),
              [](const Keyed& a, const Keyed& b) { return a.key != b.key ? a.key < b.key : a.cls < b.cls; });
    for (std::size_t i = 0; i < n; ++i) order[i] = keyed[i].idx;
  } else {
    std::shuffle(order.begin(), order.end(), rng);
  }
  const auto n_val = std::size_t(std::floor(val_ratio * double(n) + 1e-9));
  const auto n_test = std::size_t(std::floor(test_ratio * double(n) + 1e-9));
  Splits out;
  out.val_index.assign(order.begin(), order.begin() + long(n_val));
  out.test_index.assign(order.begin() + long(n_val), order.begin() + long(n_val + n_test));
  out.train_index.assign(order.begin() + long(n_val + n_test), order.end());
  out.train = detail::subset(batch, out.train_index);
  out.val = detail::subset(batch, out.val_index);
  out.test = detail::subset(batch, out.test_index);
  const NormStats st = observed_stats(out.train);
  detail::apply_norm(out.train, st);
  detail::apply_norm(out.val, st);
  detail::apply_norm(out.test, st);
  return out;
}

inline Splits split(const TimeSeriesBatch& batch, std::uint64_t seed, bool stratify) {
  return split(batch, 0.70, 0.15, 0.15, seed, stratify);
}

/// Moves the last `horizon` points of every series into its forecast targets.
inline TimeSeriesBatch split_horizon(TimeSeriesBatch batch, std::size_t horizon) {
  for (Series& s : batch.series) {
    const std::size_t L = s.length();
    if (L < horizon + 2) throw Error("split_horizon: series '" + s.id + "' is too short");
    const std::size_t keep = L - horizon;
    Series out = detail::make_series(s.id, std::vector<double>(s.times.begin(), s.times.begin() + long(keep)),
                                     s.channels());
    out.label = s.label;
    out.horizon = Tensor(Shape{s.channels(), horizon});
    for (std::size_t c = 0; c < s.channels(); ++c) {
      for (std::size_t i = 0; i < keep; ++i) {
        out.values.at(c, i) = s.values.at(c, i);
        out.mask.set(c, i, s.mask(c, i));
        out.held_out.set(c, i, s.held_out(c, i));
      }
      for (std::size_t h = 0; h < horizon; ++h) {
        if (!s.mask(c, keep + h)) throw Error("split_horizon: series '" + s.id + "' has missing horizon values");
        out.horizon.at(c, h) = s.values.at(c, keep + h);
      }
    }
    for (std::size_t h = 0; h < horizon; ++h) out.horizon_times.push_back(s.times[keep + h]);
    s = std::move(out);
  }
  return batch;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cells.push_back(cur);
  return cells;
}

inline double parse_number(const std::string& cell, std::size_t row, const std::string& column) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != cell.size() || !std::isfinite(v)) {
    throw Error("load_csv: row " + std::to_string(row) + ": non-numeric value '" + cell + "' in column " + column);
  }
  return v;
}

}  // namespace detail

/**
 * Reads `series_id,time,ch0,...[,label]`. Rows are grouped by series id (in
 * order of first appearance) and sorted by time; an empty channel cell is a
 * missing observation.
 */
inline TimeSeriesBatch load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("load_csv: empty file " + path);
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "series_id" || header[1] != "time") {
    throw Error("load_csv: header must start with series_id,time and name at least one channel");
  }
  const bool labeled = header.back() == "label";
  const std::size_t channels = header.size() - 2 - (labeled ? 1 : 0);
  if (channels == 0) throw Error("load_csv: no channel columns");

  struct Row {
    double time;
    std::vector<double> values;
    std::vector<bool> present;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Row>> rows;
  std::map<std::string, int> labels;
  std::size_t row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw Error("load_csv: row " + std::to_string(row_no) + " has " + std::to_string(cells.size()) +
                  " cells, expected " + std::to_string(header.size()));
    }
    const std::string& id = cells[0];
    Row r;
    r.time = detail::parse_number(cells[1], row_no, "time");
    for (std::size_t c = 0; c < channels; ++c) {
      const std::string& cell = cells[2 + c];
      r.present.push_back(!cell.empty());
      r.values.push_back(cell.empty() ? 0.0 : detail::parse_number(cell, row_no, header[2 + c]));
    }
    if (labeled && !cells.back().empty()) {
      const double lv = detail::parse_number(cells.back(), row_no, "label");
      if (lv != std::floor(lv) || lv < 0) throw Error("load_csv: row " + std::to_string(row_no) + ": bad label");
      auto [it, fresh] = labels.emplace(id, int(lv));
      if (!fresh && it->second != int(lv)) {
        throw Error("load_csv: row " + std::to_string(row_no) + ": conflicting label for series " + id);
      }
    }
    if (!rows.count(id)) order.push_back(id);
    rows[id].push_back(std::move(r));
  }
  TimeSeriesBatch batch;
  batch.channels = channels;
  int max_label = -1;
  for (const std::string& id : order) {
    auto& rs = rows[id];
    std::stable_sort(rs.begin(), rs.end(), [](const Row& a, const Row& b) { return a.time < b.time; });
    for (std::size_t i = 1; i < rs.size(); ++i) {
      if (rs[i].time == rs[i - 1].time) throw Error("load_csv: duplicate time in series " + id);
    }
    std::vector<double> times;
    for (const Row& r : rs) times.push_back(r.time);
    Series s = detail::make_series(id, times, channels);
    for (std::size_t i = 0; i < rs.size(); ++i)
      for (std::size_t c = 0; c < channels; ++c) {
        s.values.at(c, i) = rs[i].values[c];
        s.mask.set(c, i, rs[i].present[c]);
      }
    if (labeled) {
      auto it = labels.find(id);
      if (it == labels.end()) throw Error("load_csv: series " + id + " has no label");
      s.label = it->second;
      max_label = std::max(max_label, s.label);
    }
    batch.series.push_back(std::move(s));
  }
  batch.num_classes = labeled ? std::size_t(max_label + 1) : 0;
  return batch;
}

/// Checks the invariants every downstream consumer relies on.
inline void validate_batch(const TimeSeriesBatch& batch) {
  for (const Series& s : batch.series) {
    if (s.length() < 2) throw Error("series '" + s.id + "': fewer than 2 time points");
    for (std::size_t c = 0; c < s.channels(); ++c) {
      std::size_t observed = 0;
      for (std::size_t i = 0; i < s.length(); ++i) observed += s.mask(c, i);
      if (observed < 2) throw Error("series '" + s.id + "': channel " + std::to_string(c) + " has < 2 observations");
      if (!s.mask(c, 0)) throw Error("series '" + s.id + "': channel " + std::to_string(c) + " misses its first point");
    }
  }
}

/// Writes the CSV schema read by load_csv. Forecast targets are appended as
/// ordinary rows after the observed part.
inline void write_csv(const TimeSeriesBatch& batch, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("write_csv: cannot open " + path);
  out.precision(17);
  const bool labeled = batch.num_classes > 0;
  out << "series_id,time";
  for (std::size_t c = 0; c < batch.channels; ++c) out << ",ch" << c;
  if (labeled) out << ",label";
  out << '\n';
  for (const Series& s : batch.series) {
    auto emit = [&](double t, auto value_at, auto present_at) {
      out << s.id << ',' << t;
      for (std::size_t c = 0; c < batch.channels; ++c) {
        out << ',';
        if (present_at(c)) out << value_at(c);
      }
      if (labeled) out << ',' << s.label;
      out << '\n';
    };
    for (std::size_t i = 0; i < s.length(); ++i)
      emit(s.times[i], [&](std::size_t c) { return s.values.at(c, i); }, [&](std::size_t c) { return s.mask(c, i); });
    for (std::size_t h = 0; h < s.horizon_times.size(); ++h)
      emit(s.horizon_times[h], [&](std::size_t c) { return s.horizon.at(c, h); }, [](std::size_t) { return true; });
  }
}

}  // namespace dualdyn
