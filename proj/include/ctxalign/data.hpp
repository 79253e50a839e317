#pragma once

// Series ingestion, synthetic generators, windowing and splits.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ctxalign/error.hpp"
#include "ctxalign/io.hpp"

namespace ctxalign {

struct MultivariateSeries {
  std::string name;
  std::vector<std::string> timestamps;  // empty when the file had none
  std::vector<double> values;           // T × D, row-major
  std::size_t length = 0;               // T
  std::size_t channels = 0;             // D
  std::string frequency;

  double at(std::size_t t, std::size_t d) const { return values[t * channels + d]; }
  std::vector<double> channel(std::size_t d) const {
    if (d >= channels) throw DimensionError("channel " + std::to_string(d) + " out of range");
    std::vector<double> out(length);
    for (std::size_t t = 0; t < length; ++t) out[t] = at(t, d);
    return out;
  }
};

enum class MissingPolicy { strict, forward_fill };

struct CsvOptions {
  bool has_header = true;
  int timestamp_col = 0;  // -1: no timestamp column
  MissingPolicy missing = MissingPolicy::strict;
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  cells.push_back(cell);
  return cells;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline bool parse_double(std::string_view s, double& out) {
  const auto t = trim(s);
  if (t.empty()) return false;
  const auto* first = t.data();
  const auto* last = t.data() + t.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

}  // namespace detail

// Row numbers in errors are 1-based file lines.
inline MultivariateSeries parse_csv(std::istream& in, const CsvOptions& opts,
                                    std::string name = "series") {
  MultivariateSeries s;
  s.name = std::move(name);
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  if (opts.has_header) {
    if (!std::getline(in, line)) throw ParseError("csv: empty file");
    ++line_no;
    width = detail::split_csv_line(line).size();
  }
  std::vector<double> last_row;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (width == 0) width = cells.size();
    if (cells.size() != width) {
      throw ParseError("csv: row " + std::to_string(line_no) + " has " +
                       std::to_string(cells.size()) + " cells, expected " + std::to_string(width));
    }
    std::vector<double> row;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (static_cast<int>(c) == opts.timestamp_col) {
        s.timestamps.push_back(detail::trim(cells[c]));
        continue;
      }
      double v = 0;
      if (!detail::parse_double(cells[c], v)) {
        const bool missing = detail::trim(cells[c]).empty();
        if (missing && opts.missing == MissingPolicy::forward_fill && !last_row.empty()) {
          v = last_row[row.size()];
        } else {
          throw ParseError("csv: row " + std::to_string(line_no) + " column " +
                           std::to_string(c + 1) +
                           (missing ? " is missing" : " is not numeric: '" + cells[c] + "'"));
        }
      }
      row.push_back(v);
    }
    if (row.empty()) throw ParseError("csv: row " + std::to_string(line_no) + " has no features");
    s.values.insert(s.values.end(), row.begin(), row.end());
    s.channels = row.size();
    last_row = std::move(row);
    ++s.length;
  }
  if (s.length == 0) throw ParseError("csv: no data rows");
  return s;
}

inline MultivariateSeries load_csv(const std::filesystem::path& path, const CsvOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return parse_csv(in, opts, path.stem().string());
}

// "date,c0,c1,..." with the row index standing in for missing timestamps.
inline std::string format_csv(const MultivariateSeries& s) {
  std::ostringstream out;
  out.precision(17);
  out << "date";
  for (std::size_t d = 0; d < s.channels; ++d) out << ",c" << d;
  out << '\n';
  for (std::size_t t = 0; t < s.length; ++t) {
    if (t < s.timestamps.size()) out << s.timestamps[t];
    else out << t;
    for (std::size_t d = 0; d < s.channels; ++d) out << ',' << s.at(t, d);
    out << '\n';
  }
  return out.str();
}

inline void write_csv(const std::filesystem::path& path, const MultivariateSeries& s) {
  atomic_write(path, format_csv(s));
}

// ---------------------------------------------------------------------------
// Windows

struct WindowSample {
  std::vector<double> input;   // T_in
  std::vector<double> target;  // T'
  std::size_t channel = 0;
  std::size_t origin = 0;      // index of the first input step
};

// Channel-independent windows, ordered by origin then channel.
inline std::vector<WindowSample> make_windows(const MultivariateSeries& s, int input_len,
                                              int horizon, int stride) {
  if (input_len < 1 || horizon < 1 || stride < 1) {
    throw ConfigError("make_windows: lengths and stride must be >= 1");
  }
  const auto need = static_cast<std::size_t>(input_len + horizon);
  if (s.length < need) {
    throw ConfigError("make_windows: series of length " + std::to_string(s.length) +
                      " is shorter than input_len + horizon = " + std::to_string(need));
  }
  const std::size_t count = (s.length - need) / static_cast<std::size_t>(stride) + 1;
  std::vector<WindowSample> out;
  out.reserve(count * s.channels);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t o = k * static_cast<std::size_t>(stride);
    for (std::size_t d = 0; d < s.channels; ++d) {
      WindowSample w;
      w.channel = d;
      w.origin = o;
      for (int t = 0; t < input_len; ++t) w.input.push_back(s.at(o + t, d));
      for (int t = 0; t < horizon; ++t) w.target.push_back(s.at(o + input_len + t, d));
      out.push_back(std::move(w));
    }
  }
  return out;
}

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

template <typename Sample>
struct Split {
  std::vector<Sample> train, val, test;
};

// Split by origin time: cut points floor(f·U) over the U distinct origins,
// so a boundary origin lands in the later split.
template <typename Sample>
Split<Sample> chrono_split(const std::vector<Sample>& samples, SplitFractions f = {}) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("chrono_split: fractions must be non-negative and sum to 1");
  }
  std::vector<std::size_t> origins;
  for (const auto& s : samples) origins.push_back(s.origin);
  std::sort(origins.begin(), origins.end());
  origins.erase(std::unique(origins.begin(), origins.end()), origins.end());
  const double u = static_cast<double>(origins.size());
  const auto cut1 = static_cast<std::size_t>(std::floor(f.train * u + 1e-9));
  const auto cut2 = static_cast<std::size_t>(std::floor((f.train + f.val) * u + 1e-9));
  Split<Sample> out;
  for (const auto& s : samples) {
    const auto rank = static_cast<std::size_t>(
        std::lower_bound(origins.begin(), origins.end(), s.origin) - origins.begin());
    if (rank < cut1) out.train.push_back(s);
    else if (rank < cut2) out.val.push_back(s);
    else out.test.push_back(s);
  }
  if (out.train.empty() || out.val.empty() || out.test.empty()) {
    throw ConfigError("chrono_split: a split is empty (" + std::to_string(out.train.size()) + "/" +
                      std::to_string(out.val.size()) + "/" + std::to_string(out.test.size()) + ")");
  }
  return out;
}

// First ceil(ratio·len) samples in chronological order.
template <typename Sample>
std::vector<Sample> few_shot_subset(const std::vector<Sample>& train, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("few_shot_subset: ratio must be in (0, 1]");
  const auto keep = std::min(
      train.size(),
      static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(train.size()) - 1e-9)));
  return std::vector<Sample>(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(keep));
}

// ---------------------------------------------------------------------------
// Synthetic series

enum class SynthKind { sine_mix, ar2, trend_seasonal };

inline SynthKind parse_synth_kind(std::string_view s) {
  if (s == "sine_mix") return SynthKind::sine_mix;
  if (s == "ar2") return SynthKind::ar2;
  if (s == "trend_seasonal") return SynthKind::trend_seasonal;
  throw ConfigError("unknown synthetic kind '" + std::string(s) + "'");
}

inline std::string synth_kind_name(SynthKind k) {
  switch (k) {
    case SynthKind::sine_mix: return "sine_mix";
    case SynthKind::ar2: return "ar2";
    case SynthKind::trend_seasonal: return "trend_seasonal";
  }
  return "?";
}

struct SynthParams {
  std::size_t channels = 1;
  // sine_mix: Σ a_i sin(2π t / P_i + φ_i); channel d shifts every φ by d·0.5
  std::vector<double> amplitudes{1.0, 0.5, 0.25};
  std::vector<double> periods{24.0, 12.0, 168.0};
  std::vector<double> phases{0.0, 0.0, 0.0};
  double noise = 0.05;
  // ar2
  double phi1 = 1.5, phi2 = -0.9;
  double init0 = 0.0, init1 = 0.0;
  // trend_seasonal
  double slope = 0.01;
  double season_period = 24.0;
  double season_amplitude = 1.0;
};

inline MultivariateSeries synth_generate(SynthKind kind, std::size_t length, std::uint64_t seed,
                                         const SynthParams& p = {}) {
  if (length < 1) throw ConfigError("synth_generate: length must be >= 1");
  if (p.channels < 1) throw ConfigError("synth_generate: channels must be >= 1");
  if (p.amplitudes.size() != p.periods.size() || p.phases.size() != p.periods.size()) {
    throw ConfigError("synth_generate: amplitudes, periods and phases must align");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  MultivariateSeries s;
  s.name = synth_kind_name(kind);
  s.length = length;
  s.channels = p.channels;
  s.frequency = "step";
  s.values.assign(length * p.channels, 0.0);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t d = 0; d < p.channels; ++d) {
    const double shift = 0.5 * static_cast<double>(d);
    double prev2 = p.init0, prev1 = p.init1;
    for (std::size_t t = 0; t < length; ++t) {
      const double tt = static_cast<double>(t);
      const double eps = noise(rng);
      double v = 0.0;
      switch (kind) {
        case SynthKind::sine_mix:
          for (std::size_t i = 0; i < p.periods.size(); ++i) {
            v += p.amplitudes[i] * std::sin(two_pi * tt / p.periods[i] + p.phases[i] + shift);
          }
          v += p.noise * eps;
          break;
        case SynthKind::ar2:
          if (t == 0) v = p.init0;
          else if (t == 1) v = p.init1;
          else {
            v = p.phi1 * prev1 + p.phi2 * prev2 + p.noise * eps;
            prev2 = prev1;
            prev1 = v;
          }
          break;
        case SynthKind::trend_seasonal:
          v = p.slope * tt + p.season_amplitude * std::sin(two_pi * tt / p.season_period + shift) +
              p.noise * eps;
          break;
      }
      s.values[t * p.channels + d] = v;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Classification data (univariate series with an integer label)

struct LabeledSeries {
  std::vector<double> values;
  int label = 0;
  std::size_t origin = 0;  // position in the source file, used for splits
};

// One sample per line: "label,v0,v1,...".
inline std::vector<LabeledSeries> load_labeled_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<LabeledSeries> out;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (width == 0) width = cells.size();
    if (cells.size() != width || width < 2) {
      throw ParseError("labeled csv: row " + std::to_string(line_no) + " has a bad cell count");
    }
    LabeledSeries s;
    double label = 0;
    if (!detail::parse_double(cells[0], label) || label < 0 || label != std::floor(label)) {
      throw ParseError("labeled csv: row " + std::to_string(line_no) + " has a bad label");
    }
    s.label = static_cast<int>(label);
    for (std::size_t c = 1; c < cells.size(); ++c) {
      double v = 0;
      if (!detail::parse_double(cells[c], v)) {
        throw ParseError("labeled csv: row " + std::to_string(line_no) + " column " +
                         std::to_string(c + 1) + " is not numeric");
      }
      s.values.push_back(v);
    }
    s.origin = out.size();
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ParseError("labeled csv: no rows");
  return out;
}

// Class k is a sinusoid with period length / (k + 2) plus noise.
inline std::vector<LabeledSeries> synth_labeled(int classes, std::size_t per_class,
                                                std::size_t length, std::uint64_t seed,
                                                double noise = 0.1) {
  if (classes < 2) throw ConfigError("synth_labeled: need >= 2 classes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::vector<LabeledSeries> out;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (int k = 0; k < classes; ++k) {
      LabeledSeries s;
      s.label = k;
      const double period = static_cast<double>(length) / (k + 2);
      const double ph = phase(rng);
      for (std::size_t t = 0; t < length; ++t) {
        s.values.push_back(std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / period + ph) +
                           noise * nd(rng));
      }
      s.origin = out.size();
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace ctxalign
