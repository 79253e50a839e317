#pragma once

// Forecast and classification metrics, plus the Naive2 reference forecaster.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxalign/error.hpp"
#include "ctxalign/io.hpp"

namespace ctxalign {

struct PointMetrics {
  double mse = 0.0;
  double mae = 0.0;
};

namespace detail {

inline void require_pair(std::span<const double> y, std::span<const double> yhat, const char* who) {
  if (y.empty()) throw ContractError(std::string(who) + ": empty input");
  if (y.size() != yhat.size()) {
    throw DimensionError(std::string(who) + ": lengths differ (" + std::to_string(y.size()) +
                         " vs " + std::to_string(yhat.size()) + ")");
  }
}

}  // namespace detail

inline PointMetrics point_metrics(std::span<const double> y, std::span<const double> yhat) {
  detail::require_pair(y, yhat, "point_metrics");
  PointMetrics m;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - yhat[i];
    m.mse += d * d;
    m.mae += std::abs(d);
  }
  const double h = static_cast<double>(y.size());
  m.mse /= h;
  m.mae /= h;
  return m;
}

inline constexpr double kSmapeFloor = 1e-8;

inline double smape(std::span<const double> y, std::span<const double> yhat) {
  detail::require_pair(y, yhat, "smape");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    s += std::abs(y[i] - yhat[i]) / std::max(std::abs(y[i]) + std::abs(yhat[i]), kSmapeFloor);
  }
  return 200.0 * s / static_cast<double>(y.size());
}

// insample: scale by the seasonal-naive error over the history (M4 usage).
// forecast_window: the literal form, differences taken inside Y itself.
enum class MaseScaling { insample, forecast_window };

inline double mase_scale(std::span<const double> series, int s) {
  if (s < 1) throw ContractError("mase: seasonality must be >= 1");
  const auto n = series.size();
  if (n <= static_cast<std::size_t>(s)) {
    throw ContractError("mase: scaling series of length " + std::to_string(n) +
                        " too short for seasonality " + std::to_string(s));
  }
  double d = 0.0;
  for (std::size_t j = static_cast<std::size_t>(s); j < n; ++j) d += std::abs(series[j] - series[j - s]);
  d /= static_cast<double>(n - static_cast<std::size_t>(s));
  if (d == 0.0) throw ContractError("mase: constant seasonal series (zero scale)");
  return d;
}

inline double mase(std::span<const double> y, std::span<const double> yhat,
                   std::span<const double> insample, int s,
                   MaseScaling scaling = MaseScaling::insample) {
  detail::require_pair(y, yhat, "mase");
  const double scale = mase_scale(scaling == MaseScaling::insample ? insample : y, s);
  return point_metrics(y, yhat).mae / scale;
}

// ---------------------------------------------------------------------------
// Naive2
//
//  1. Seasonality test (s > 1, at least 2s points): the series is seasonal
//     when it repeats exactly with period s, or when the lag-s
//     autocorrelation exceeds 1.645·sqrt((1 + 2·Σ_{k<s} acf_k²) / n).
//  2. Seasonal: centred moving average of order s (2×s for even s), ratios
//     x_t / MA_t averaged per phase, indices rescaled to mean 1.
//  3. Forecast = last deseasonalised value times the index of each future
//     phase. Non-seasonal (or a non-positive MA): repeat the last value.

namespace detail {

inline double acf(std::span<const double> x, std::size_t k) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double den = 0.0;
  for (double v : x) den += (v - mean) * (v - mean);
  if (den == 0.0) return 0.0;
  double num = 0.0;
  for (std::size_t t = k; t < x.size(); ++t) num += (x[t] - mean) * (x[t - k] - mean);
  return num / den;
}

inline bool exactly_periodic(std::span<const double> x, std::size_t s) {
  for (std::size_t t = s; t < x.size(); ++t)
    if (x[t] != x[t - s]) return false;
  return true;
}

// Centred MA; NaN where the window does not fit.
inline std::vector<double> centred_moving_average(std::span<const double> x, std::size_t s) {
  const auto n = x.size();
  std::vector<double> ma(n, std::nan(""));
  if (s % 2 == 1) {
    const std::size_t half = s / 2;
    for (std::size_t t = half; t + half < n; ++t) {
      double sum = 0.0;
      for (std::size_t k = t - half; k <= t + half; ++k) sum += x[k];
      ma[t] = sum / static_cast<double>(s);
    }
  } else {
    const std::size_t half = s / 2;
    for (std::size_t t = half; t + half < n; ++t) {
      double sum = 0.5 * x[t - half] + 0.5 * x[t + half];
      for (std::size_t k = t - half + 1; k < t + half; ++k) sum += x[k];
      ma[t] = sum / static_cast<double>(s);
    }
  }
  return ma;
}

}  // namespace detail

inline bool seasonality_test(std::span<const double> x, int s) {
  if (s <= 1 || x.size() < 2 * static_cast<std::size_t>(s)) return false;
  const auto ss = static_cast<std::size_t>(s);
  if (detail::exactly_periodic(x, ss)) return true;
  double acc = 0.0;
  for (std::size_t k = 1; k < ss; ++k) {
    const double r = detail::acf(x, k);
    acc += r * r;
  }
  const double limit = 1.645 * std::sqrt((1.0 + 2.0 * acc) / static_cast<double>(x.size()));
  return std::abs(detail::acf(x, ss)) > limit;
}

inline std::vector<double> seasonal_indices(std::span<const double> x, int s) {
  const auto ss = static_cast<std::size_t>(s);
  const auto ma = detail::centred_moving_average(x, ss);
  std::vector<double> sum(ss, 0.0);
  std::vector<int> count(ss, 0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    if (std::isnan(ma[t])) continue;
    if (ma[t] <= 0.0) return {};
    sum[t % ss] += x[t] / ma[t];
    ++count[t % ss];
  }
  std::vector<double> idx(ss);
  double mean = 0.0;
  for (std::size_t k = 0; k < ss; ++k) {
    if (count[k] == 0) return {};
    idx[k] = sum[k] / count[k];
    mean += idx[k];
  }
  mean /= static_cast<double>(ss);
  if (mean <= 0.0) return {};
  for (auto& v : idx) v /= mean;
  for (double v : idx)
    if (v <= 0.0) return {};
  return idx;
}

inline std::vector<double> naive2(std::span<const double> insample, int horizon, int s) {
  if (s < 1) throw ContractError("naive2: seasonality must be >= 1");
  if (horizon < 1) throw ContractError("naive2: horizon must be >= 1");
  if (insample.size() < std::max<std::size_t>(static_cast<std::size_t>(s), 3)) {
    throw ContractError("naive2: insample of length " + std::to_string(insample.size()) +
                        " too short");
  }
  const auto n = insample.size();
  std::vector<double> out(static_cast<std::size_t>(horizon), insample.back());
  if (!seasonality_test(insample, s)) return out;
  const auto idx = seasonal_indices(insample, s);
  if (idx.empty()) return out;
  const auto ss = static_cast<std::size_t>(s);
  const double level = insample.back() / idx[(n - 1) % ss];
  for (std::size_t h = 0; h < out.size(); ++h) out[h] = level * idx[(n + h) % ss];
  return out;
}

struct M4Metrics {
  double smape = 0.0;
  double mase = 0.0;
  double owa = 0.0;
};

inline M4Metrics m4_metrics(std::span<const double> y, std::span<const double> yhat,
                            std::span<const double> insample, int s,
                            std::span<const double> naive2_forecast,
                            MaseScaling scaling = MaseScaling::insample) {
  M4Metrics m;
  m.smape = smape(y, yhat);
  m.mase = mase(y, yhat, insample, s, scaling);
  const double smape_ref = smape(y, naive2_forecast);
  const double mase_ref = mase(y, naive2_forecast, insample, s, scaling);
  if (smape_ref == 0.0 || mase_ref == 0.0) {
    throw ContractError("owa: Naive2 reference error is zero");
  }
  m.owa = 0.5 * (m.smape / smape_ref + m.mase / mase_ref);
  return m;
}

inline double accuracy(std::span<const int> pred, std::span<const int> truth) {
  if (pred.empty()) throw ContractError("accuracy: empty input");
  if (pred.size() != truth.size()) throw DimensionError("accuracy: lengths differ");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kReportSchemaVersion = 1;

struct MetricReport {
  std::string task;                       // "forecast" or "classify"
  std::map<std::string, double> values;   // aggregate metrics
  std::vector<double> per_horizon_mse;    // forecast only
  std::vector<double> per_horizon_mae;
  std::size_t samples = 0;
  std::uint64_t config_digest = 0;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  void validate() const {
    for (const auto& [k, v] : values) {
      if (!std::isfinite(v) || v < 0) throw NumericError("report: metric " + k + " is invalid");
    }
    if (auto it = values.find("accuracy"); it != values.end() && it->second > 1.0) {
      throw NumericError("report: accuracy above 1");
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema_version"] = kReportSchemaVersion;
    j["task"] = task;
    j["config_digest"] = hex64(config_digest);
    j["samples"] = samples;
    j["metrics"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : values) j["metrics"][k] = v;
    if (!per_horizon_mse.empty()) {
      j["per_horizon"] = {{"mse", per_horizon_mse}, {"mae", per_horizon_mae}};
    }
    if (!extra.empty()) j["extra"] = extra;
    return j;
  }

  std::string dump() const { return to_json().dump(2) + "\n"; }
};

struct WindowRow {
  std::size_t index = 0;
  std::size_t channel = 0;
  std::size_t origin = 0;
  double mse = 0.0;
  double mae = 0.0;
};

inline std::string format_window_rows(const std::vector<WindowRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "index,channel,origin,mse,mae\n";
  for (const auto& r : rows) {
    out << r.index << ',' << r.channel << ',' << r.origin << ',' << r.mse << ',' << r.mae << '\n';
  }
  return out.str();
}

// Forecast aggregate over windows: mean MSE/MAE plus per-step errors.
struct ForecastAccumulator {
  std::vector<double> sq, ab;
  double mse_sum = 0.0, mae_sum = 0.0;
  std::size_t count = 0;
  std::vector<WindowRow> rows;

  void add(std::span<const double> y, std::span<const double> yhat, std::size_t channel,
           std::size_t origin) {
    const auto m = point_metrics(y, yhat);
    if (sq.empty()) {
      sq.assign(y.size(), 0.0);
      ab.assign(y.size(), 0.0);
    }
    if (sq.size() != y.size()) throw DimensionError("accumulator: horizon changed");
    for (std::size_t h = 0; h < y.size(); ++h) {
      const double d = y[h] - yhat[h];
      sq[h] += d * d;
      ab[h] += std::abs(d);
    }
    mse_sum += m.mse;
    mae_sum += m.mae;
    rows.push_back({count, channel, origin, m.mse, m.mae});
    ++count;
  }

  MetricReport report(std::uint64_t digest) const {
    if (count == 0) throw ContractError("report: no windows evaluated");
    MetricReport r;
    r.task = "forecast";
    r.samples = count;
    r.config_digest = digest;
    r.values["mse"] = mse_sum / static_cast<double>(count);
    r.values["mae"] = mae_sum / static_cast<double>(count);
    for (std::size_t h = 0; h < sq.size(); ++h) {
      r.per_horizon_mse.push_back(sq[h] / static_cast<double>(count));
      r.per_horizon_mae.push_back(ab[h] / static_cast<double>(count));
    }
    return r;
  }
};

}  // namespace ctxalign
