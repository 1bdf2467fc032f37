#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "dualdyn/tensor.hpp"

namespace dualdyn {

/**
 * Continuous control path through irregular observations.
 *
 * Each data channel is a cubic Hermite spline through its observed points
 * only, with knot slopes taken from backward differences (the slope at the
 * first knot is the forward difference of the first segment). A final
 * channel carries time itself, so X_time(t) = t.
 *
 * Past a channel's last observation its value is held constant; the path
 * as a whole is defined on [first time, last time] and never extrapolated.
 */
class ControlPath {
 public:
  struct Segment {
    double start = 0.0;
    // value(t) = c0 + c1 s + c2 s^2 + c3 s^3 with s = t - start
    double c0 = 0.0, c1 = 0.0, c2 = 0.0, c3 = 0.0;
  };

  struct Channel {
    std::vector<double> knots;
    std::vector<Segment> segments;  // segments[i] spans knots[i]..knots[i+1]
    double last_value = 0.0;
  };

  std::size_t channel_count() const { return channels_.size() + 1; }
  std::size_t data_channels() const { return channels_.size(); }
  double start() const { return times_.front(); }
  double end() const { return times_.back(); }
  const std::vector<double>& knot_times() const { return times_; }
  const Channel& channel(std::size_t c) const { return channels_.at(c); }

  /// Values of every channel at t, time channel last.
  std::vector<double> eval(double t) const {
    std::vector<double> out(channel_count());
    eval_into(t, out.data(), false);
    return out;
  }

  /// dX/dt at t. At a knot the right-hand segment is used, except at the
  /// final knot where only the left-hand one exists.
  std::vector<double> derivative(double t) const {
    std::vector<double> out(channel_count());
    eval_into(t, out.data(), true);
    return out;
  }

  void eval_into(double t, double* out, bool derivative) const {
    check_range(t);
    for (std::size_t c = 0; c < channels_.size(); ++c) out[c] = eval_channel(channels_[c], t, derivative, end());
    out[channels_.size()] = derivative ? 1.0 : t;
  }

  static ControlPath fit(std::span<const double> times, const Tensor& values, const Mask& mask) {
    const std::size_t length = times.size();
    if (values.rank() != 2 || values.cols() != length || mask.channels() != values.rows() ||
        mask.length() != length) {
      throw Error("fit_control_path: values/mask shape does not match " + std::to_string(length) + " time points");
    }
    for (std::size_t i = 1; i < length; ++i) {
      if (!(times[i] > times[i - 1])) {
        throw Error("fit_control_path: times not strictly increasing at index " + std::to_string(i));
      }
    }
    ControlPath path;
    path.times_.assign(times.begin(), times.end());
    for (std::size_t c = 0; c < values.rows(); ++c) {
      std::vector<double> t, x;
      for (std::size_t i = 0; i < length; ++i) {
        if (mask(c, i)) {
          t.push_back(times[i]);
          x.push_back(values.at(c, i));
        }
      }
      if (t.size() < 2) {
        throw Error("fit_control_path: channel " + std::to_string(c) + " has fewer than 2 observations");
      }
      if (t.front() != times[0]) {
        throw Error("fit_control_path: channel " + std::to_string(c) + " is not observed at the first time point");
      }
      path.channels_.push_back(fit_channel(t, x));
    }
    return path;
  }

 private:
  static Channel fit_channel(const std::vector<double>& t, const std::vector<double>& x) {
    const std::size_t n = t.size();
    std::vector<double> slope(n);
    for (std::size_t i = 1; i < n; ++i) slope[i] = (x[i] - x[i - 1]) / (t[i] - t[i - 1]);
    slope[0] = slope[1];
    Channel ch;
    ch.knots = t;
    ch.last_value = x.back();
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const double h = t[i + 1] - t[i];
      const double secant = (x[i + 1] - x[i]) / h;
      Segment s;
      s.start = t[i];
      s.c0 = x[i];
      s.c1 = slope[i];
      s.c2 = (3.0 * secant - 2.0 * slope[i] - slope[i + 1]) / h;
      s.c3 = (slope[i] + slope[i + 1] - 2.0 * secant) / (h * h);
      ch.segments.push_back(s);
    }
    return ch;
  }

  static double eval_channel(const Channel& ch, double t, bool derivative, double path_end) {
    const auto& k = ch.knots;
    if (t > k.back()) return derivative ? 0.0 : ch.last_value;
    if (t == k.back()) {
      if (!derivative) return ch.last_value;
      // Right-hand side of an early final knot is the constant hold.
      if (t < path_end) return 0.0;
    }
    // Segment containing t, right-hand at interior knots; last segment at the end.
    std::size_t idx = std::size_t(std::upper_bound(k.begin(), k.end(), t) - k.begin());
    idx = idx == 0 ? 0 : idx - 1;
    idx = std::min(idx, ch.segments.size() - 1);
    const Segment& s = ch.segments[idx];
    const double u = t - s.start;
    if (derivative) return s.c1 + u * (2.0 * s.c2 + u * 3.0 * s.c3);
    return s.c0 + u * (s.c1 + u * (s.c2 + u * s.c3));
  }

  void check_range(double t) const {
    if (!(t >= start() && t <= end())) {
      throw Error("control path: t=" + std::to_string(t) + " outside [" + std::to_string(start()) + ", " +
                  std::to_string(end()) + "]");
    }
  }

  std::vector<double> times_;
  std::vector<Channel> channels_;
};

inline ControlPath fit_control_path(std::span<const double> times, const Tensor& values, const Mask& mask) {
  return ControlPath::fit(times, values, mask);
}

inline std::vector<double> eval_path(const ControlPath& path, double t) { return path.eval(t); }

inline std::vector<double> eval_path_derivative(const ControlPath& path, double t) { return path.derivative(t); }

}  // namespace dualdyn
