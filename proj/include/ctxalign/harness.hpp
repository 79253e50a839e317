#pragma once

// Training loop, evaluation, ablation runner and experiment config.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctxalign/backbone.hpp"
#include "ctxalign/checkpoint.hpp"
#include "ctxalign/data.hpp"
#include "ctxalign/error.hpp"
#include "ctxalign/io.hpp"
#include "ctxalign/metrics.hpp"

namespace ctxalign {

enum class OptimizerKind { adam, radam };

struct TrainConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int t_max = 20;
  double eta_min = 1e-8;
  int batch = 0;  // 0: 256 for forecasting, 64 for classification
  int patience = 5;
  int max_epochs = 10;
  LossKind loss = LossKind::mse;
  OptimizerKind optimizer = OptimizerKind::adam;

  void validate() const {
    if (!(lr0 > eta_min && eta_min >= 0)) throw ConfigError("train: need lr0 > eta_min >= 0");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (batch < 0) throw ConfigError("train: batch must be >= 1 (0 for the task default)");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (t_max < 1) throw ConfigError("train: t_max must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
      throw ConfigError("train: betas must lie in [0, 1)");
    }
  }
};

// Epoch-level cosine annealing, held at eta_min after t_max.
inline double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ContractError("lr_schedule: epoch must be >= 0");
  const double t = std::min(epoch, cfg.t_max);
  return cfg.eta_min +
         0.5 * (cfg.lr0 - cfg.eta_min) * (1.0 + std::cos(std::numbers::pi * t / cfg.t_max));
}

// ---------------------------------------------------------------------------
// Optimizer

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, const TrainConfig& cfg) : kind_(kind), cfg_(cfg) {}

  std::int64_t steps() const { return steps_; }

  // Updates every trainable parameter in place from its accumulated grad.
  // Missing grads count as zero.
  void step(std::vector<NamedParameter>& params, double lr) {
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    double rect = 0.0;
    bool adaptive = true;
    if (kind_ == OptimizerKind::radam) {
      const double rho_inf = 2.0 / (1.0 - cfg_.beta2) - 1.0;
      const double rho_t = rho_inf - 2.0 * t * std::pow(cfg_.beta2, t) / bc2;
      adaptive = rho_t > 5.0;
      if (adaptive) {
        rect = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                         ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
      }
    }
    for (auto& p : params) {
      if (!p.tensor.requires_grad()) continue;
      auto& st = state_for(p);
      const auto grad = p.tensor.grad();
      auto value = p.tensor.mutable_values();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad.empty() ? 0.0 : grad[i];
        if (!std::isfinite(g)) {
          throw NumericError("non-finite gradient in tensor '" + p.name + "' at index " +
                             std::to_string(i));
        }
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double m_hat = st.m[i] / bc1;
        if (kind_ == OptimizerKind::adam) {
          value[i] -= lr * m_hat / (std::sqrt(st.v[i] / bc2) + cfg_.eps);
        } else if (adaptive) {
          value[i] -= lr * rect * m_hat / (std::sqrt(st.v[i] / bc2) + cfg_.eps);
        } else {
          value[i] -= lr * m_hat;
        }
      }
    }
  }

  std::vector<CheckpointTensor> state_tensors() const {
    std::vector<CheckpointTensor> out;
    for (const auto& s : states_) {
      out.push_back({"opt.m." + s.name, {s.m.size()}, s.m});
      out.push_back({"opt.v." + s.name, {s.v.size()}, s.v});
    }
    out.push_back({"opt.steps", {1}, {static_cast<double>(steps_)}});
    return out;
  }

  void load_state(const Checkpoint& ckpt, const std::vector<NamedParameter>& params) {
    states_.clear();
    for (const auto& p : params) {
      const auto* m = ckpt.find("opt.m." + p.name);
      const auto* v = ckpt.find("opt.v." + p.name);
      if (!m || !v) continue;
      if (m->values.size() != p.tensor.size() || v->values.size() != p.tensor.size()) {
        throw ParseError("checkpoint: optimizer state size mismatch for " + p.name);
      }
      states_.push_back({p.name, m->values, v->values});
    }
    const auto* s = ckpt.find("opt.steps");
    if (!s) throw ParseError("checkpoint: missing opt.steps");
    steps_ = static_cast<std::int64_t>(s->values.at(0));
  }

 private:
  struct State {
    std::string name;
    std::vector<double> m, v;
  };

  State& state_for(const NamedParameter& p) {
    for (auto& s : states_)
      if (s.name == p.name) return s;
    states_.push_back({p.name, std::vector<double>(p.tensor.size(), 0.0),
                       std::vector<double>(p.tensor.size(), 0.0)});
    return states_.back();
  }

  OptimizerKind kind_;
  TrainConfig cfg_;
  std::int64_t steps_ = 0;
  std::vector<State> states_;
};

// ---------------------------------------------------------------------------
// Experiment config

enum class DataSource { synthetic, csv };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  SynthKind synth_kind = SynthKind::sine_mix;
  std::size_t length = 2000;
  std::uint64_t data_seed = 7;
  SynthParams synth;
  std::string csv_path;
  CsvOptions csv;
  std::vector<int> channels;  // empty: all
  int stride = 1;
  int eval_stride = 0;        // 0: same as stride
  SplitFractions split;
  double few_shot = 1.0;
  int seasonality = 1;        // for M4-style metrics
  bool m4_metrics = false;
  // classification
  std::string labeled_path;
  std::size_t per_class = 40;
  double class_noise = 0.3;
};

struct AblationPlan {
  std::vector<std::string> variants{"full", "no_coarse", "random_adjacency"};
  std::vector<std::uint64_t> seeds{0};
};

struct ExperimentConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  AblationPlan ablation;
  std::uint64_t seed = 0;
  std::string out_dir;
};

namespace detail {

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const auto l = lower(v);
  if (l == "true" || l == "1" || l == "yes" || l == "on") return true;
  if (l == "false" || l == "0" || l == "no" || l == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  if (!parse_double(v, out)) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  const double d = parse_real(key, v);
  if (d != std::floor(d)) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return static_cast<long long>(d);
}

template <typename E>
E parse_enum(const std::string& key, const std::string& v,
             std::initializer_list<std::pair<const char*, E>> table) {
  for (const auto& [name, e] : table)
    if (lower(v) == name) return e;
  std::string options;
  for (const auto& [name, e] : table) options += std::string(options.empty() ? "" : ", ") + name;
  throw ConfigError(key + ": unknown value '" + v + "' (expected one of " + options + ")");
}

}  // namespace detail

inline Variant parse_variant(const std::string& v) {
  return detail::parse_enum<Variant>("variant", v,
                                     {{"full", Variant::full},
                                      {"no_dsca", Variant::no_dsca},
                                      {"random_adjacency", Variant::random_adjacency},
                                      {"no_coarse", Variant::no_coarse}});
}

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_dsca: return "no_dsca";
    case Variant::random_adjacency: return "random_adjacency";
    case Variant::no_coarse: return "no_coarse";
  }
  return "?";
}

inline std::vector<int> parse_int_list(const std::string& key, std::string_view text) {
  std::vector<int> out;
  std::string cell;
  auto flush = [&] {
    const auto t = detail::trim(cell);
    if (!t.empty()) out.push_back(static_cast<int>(detail::parse_int(key, t)));
    cell.clear();
  };
  for (char c : text) {
    if (c == ',' || c == '[' || c == ']') flush();
    else cell.push_back(c);
  }
  flush();
  return out;
}

// Applies one "section.key = value" setting. Unknown keys are errors.
inline void apply_setting(ExperimentConfig& cfg, const std::string& key,
                          const std::vector<std::string>& inputs) {
  using namespace detail;
  auto one = [&]() -> const std::string& {
    if (inputs.size() != 1) throw ConfigError(key + ": expected a single value");
    return inputs.front();
  };
  auto ints = [&] {
    std::vector<int> out;
    for (const auto& s : inputs) {
      auto part = parse_int_list(key, s);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  };
  auto reals = [&] {
    std::vector<double> out;
    for (const auto& s : inputs) out.push_back(parse_real(key, s));
    return out;
  };
  auto& m = cfg.model;
  auto& b = cfg.model.backbone;
  auto& d = cfg.data;
  auto& t = cfg.train;
  if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, one()));
  else if (key == "out_dir") cfg.out_dir = one();
  else if (key == "backbone.layers") b.layers = static_cast<int>(parse_int(key, one()));
  else if (key == "backbone.width") b.width = static_cast<int>(parse_int(key, one()));
  else if (key == "backbone.heads") b.heads = static_cast<int>(parse_int(key, one()));
  else if (key == "backbone.ff_multiple") b.ff_multiple = static_cast<int>(parse_int(key, one()));
  else if (key == "backbone.insertion_positions") b.insertion_positions = ints();
  else if (key == "backbone.max_seq_len") b.max_seq_len = static_cast<int>(parse_int(key, one()));
  else if (key == "backbone.freeze")
    b.freeze = parse_enum<FreezePolicy>(key, one(), {{"none", FreezePolicy::none},
                                                     {"freeze_attention_and_ffn",
                                                      FreezePolicy::freeze_attention_and_ffn}});
  else if (key == "model.task")
    m.task = parse_enum<TaskKind>(key, one(), {{"forecast", TaskKind::forecast},
                                               {"classify", TaskKind::classify}});
  else if (key == "model.method")
    m.method = parse_enum<Method>(key, one(), {{"vca", Method::vca}, {"fsca", Method::fsca}});
  else if (key == "model.input_len") m.input_len = static_cast<int>(parse_int(key, one()));
  else if (key == "model.horizon") m.horizon = static_cast<int>(parse_int(key, one()));
  else if (key == "model.classes") m.classes = static_cast<int>(parse_int(key, one()));
  else if (key == "model.patch_len") m.patch_len = static_cast<int>(parse_int(key, one()));
  else if (key == "model.patch_stride") m.patch_stride = static_cast<int>(parse_int(key, one()));
  else if (key == "model.parts") m.parts = static_cast<int>(parse_int(key, one()));
  else if (key == "model.pruned") m.pruned = parse_bool(key, one());
  else if (key == "model.prompt") m.prompt = one();
  else if (key == "model.normalize") m.normalize = parse_bool(key, one());
  else if (key == "model.variant") m.variant = parse_variant(one());
  else if (key == "model.differentiable_edge_weights")
    m.differentiable_edge_weights = parse_bool(key, one());
  else if (key == "data.source")
    d.source = parse_enum<DataSource>(key, one(), {{"synthetic", DataSource::synthetic},
                                                   {"csv", DataSource::csv}});
  else if (key == "data.kind") d.synth_kind = parse_synth_kind(one());
  else if (key == "data.length") d.length = static_cast<std::size_t>(parse_int(key, one()));
  else if (key == "data.seed") d.data_seed = static_cast<std::uint64_t>(parse_int(key, one()));
  else if (key == "data.synth_channels") d.synth.channels = static_cast<std::size_t>(parse_int(key, one()));
  else if (key == "data.noise") d.synth.noise = parse_real(key, one());
  else if (key == "data.amplitudes") d.synth.amplitudes = reals();
  else if (key == "data.periods") d.synth.periods = reals();
  else if (key == "data.phases") d.synth.phases = reals();
  else if (key == "data.path") d.csv_path = one();
  else if (key == "data.has_header") d.csv.has_header = parse_bool(key, one());
  else if (key == "data.timestamp_col") d.csv.timestamp_col = static_cast<int>(parse_int(key, one()));
  else if (key == "data.forward_fill")
    d.csv.missing = parse_bool(key, one()) ? MissingPolicy::forward_fill : MissingPolicy::strict;
  else if (key == "data.channels") d.channels = ints();
  else if (key == "data.stride") d.stride = static_cast<int>(parse_int(key, one()));
  else if (key == "data.eval_stride") d.eval_stride = static_cast<int>(parse_int(key, one()));
  else if (key == "data.split") {
    const auto f = reals();
    if (f.size() != 3) throw ConfigError(key + ": expected three fractions");
    d.split = {f[0], f[1], f[2]};
  } else if (key == "data.few_shot") d.few_shot = parse_real(key, one());
  else if (key == "data.seasonality") d.seasonality = static_cast<int>(parse_int(key, one()));
  else if (key == "data.m4_metrics") d.m4_metrics = parse_bool(key, one());
  else if (key == "data.labeled_path") d.labeled_path = one();
  else if (key == "data.per_class") d.per_class = static_cast<std::size_t>(parse_int(key, one()));
  else if (key == "data.class_noise") d.class_noise = parse_real(key, one());
  else if (key == "train.lr0") t.lr0 = parse_real(key, one());
  else if (key == "train.beta1") t.beta1 = parse_real(key, one());
  else if (key == "train.beta2") t.beta2 = parse_real(key, one());
  else if (key == "train.eps") t.eps = parse_real(key, one());
  else if (key == "train.t_max") t.t_max = static_cast<int>(parse_int(key, one()));
  else if (key == "train.eta_min") t.eta_min = parse_real(key, one());
  else if (key == "train.batch") t.batch = static_cast<int>(parse_int(key, one()));
  else if (key == "train.patience") t.patience = static_cast<int>(parse_int(key, one()));
  else if (key == "train.max_epochs") t.max_epochs = static_cast<int>(parse_int(key, one()));
  else if (key == "train.loss")
    t.loss = parse_enum<LossKind>(key, one(), {{"mse", LossKind::mse}, {"smape", LossKind::smape},
                                               {"ce", LossKind::ce}});
  else if (key == "train.optimizer")
    t.optimizer = parse_enum<OptimizerKind>(key, one(), {{"adam", OptimizerKind::adam},
                                                         {"radam", OptimizerKind::radam}});
  else if (key == "ablation.variants") cfg.ablation.variants = inputs;
  else if (key == "ablation.seeds") {
    cfg.ablation.seeds.clear();
    for (int s : ints()) cfg.ablation.seeds.push_back(static_cast<std::uint64_t>(s));
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

inline ExperimentConfig parse_experiment_config(std::istream& in) {
  ExperimentConfig cfg;
  for (const auto& item : CLI::ConfigTOML().from_config(in)) {
    if (item.name == "++" || item.name == "--") continue;
    apply_setting(cfg, item.fullname(), item.inputs);
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_experiment_config(in);
}

// ---------------------------------------------------------------------------
// Datasets

struct ForecastData {
  std::vector<WindowSample> train, val, test;
};

inline MultivariateSeries load_series(const DataConfig& d) {
  auto s = d.source == DataSource::synthetic ? synth_generate(d.synth_kind, d.length, d.data_seed, d.synth)
                                             : load_csv(d.csv_path, d.csv);
  if (d.channels.empty()) return s;
  MultivariateSeries out = s;
  out.channels = d.channels.size();
  out.values.clear();
  for (std::size_t t = 0; t < s.length; ++t) {
    for (int c : d.channels) {
      if (c < 0 || static_cast<std::size_t>(c) >= s.channels) {
        throw ConfigError("data.channels: channel " + std::to_string(c) + " out of range");
      }
      out.values.push_back(s.at(t, static_cast<std::size_t>(c)));
    }
  }
  return out;
}

// Train windows at `stride`, evaluation windows at `eval_stride`; both
// split on the same origin cut points.
inline ForecastData make_forecast_data(const DataConfig& d, const ModelConfig& m) {
  const auto series = load_series(d);
  const auto all = make_windows(series, m.input_len, m.horizon, 1);
  const auto split = chrono_split(all, d.split);
  auto in_range = [](const std::vector<WindowSample>& v, int stride) {
    std::vector<WindowSample> out;
    if (v.empty()) return out;
    const auto first = v.front().origin;
    for (const auto& w : v)
      if ((w.origin - first) % static_cast<std::size_t>(stride) == 0) out.push_back(w);
    return out;
  };
  if (d.stride < 1 || d.eval_stride < 0) throw ConfigError("data: strides must be positive");
  const int es = d.eval_stride == 0 ? d.stride : d.eval_stride;
  ForecastData out;
  out.train = few_shot_subset(in_range(split.train, d.stride), d.few_shot);
  out.val = in_range(split.val, es);
  out.test = in_range(split.test, es);
  return out;
}

struct ClassData {
  std::vector<LabeledSeries> train, val, test;
};

inline ClassData make_class_data(const DataConfig& d, const ModelConfig& m) {
  auto all = d.labeled_path.empty()
                 ? synth_labeled(m.classes, d.per_class, static_cast<std::size_t>(m.input_len),
                                 d.data_seed, d.class_noise)
                 : load_labeled_csv(d.labeled_path);
  for (const auto& s : all) {
    if (static_cast<int>(s.values.size()) != m.input_len) {
      throw ConfigError("classification series length differs from model.input_len");
    }
    if (s.label < 0 || s.label >= m.classes) throw ConfigError("label outside [0, classes)");
  }
  auto split = chrono_split(all, d.split);
  return {few_shot_subset(split.train, d.few_shot), std::move(split.val), std::move(split.test)};
}

// First training series of each class, in class order.
inline std::vector<std::vector<double>> pick_class_examples(const std::vector<LabeledSeries>& train,
                                                           int classes) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(classes));
  for (const auto& s : train) {
    auto& slot = out[static_cast<std::size_t>(s.label)];
    if (slot.empty()) slot = s.values;
  }
  for (int k = 0; k < classes; ++k) {
    if (out[static_cast<std::size_t>(k)].empty()) {
      throw ConfigError("training split has no example of class " + std::to_string(k));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::vector<double> to_vector(const Tensor& t) {
  return {t.values().begin(), t.values().end()};
}

inline double last_value_mse(const std::vector<WindowSample>& samples) {
  if (samples.empty()) throw ContractError("last_value_mse: no samples");
  double acc = 0.0;
  for (const auto& w : samples) {
    const std::vector<double> rep(w.target.size(), w.input.back());
    acc += point_metrics(w.target, rep).mse;
  }
  return acc / static_cast<double>(samples.size());
}

struct Evaluation {
  MetricReport report;
  std::vector<WindowRow> rows;
};

inline Evaluation evaluate_forecast(Model& model, const std::vector<WindowSample>& samples,
                                    const DataConfig& d) {
  ForecastAccumulator acc;
  double smape_sum = 0, mase_sum = 0, smape_ref = 0, mase_ref = 0;
  for (const auto& w : samples) {
    const auto pred = to_vector(model.forecast(w.input));
    acc.add(w.target, pred, w.channel, w.origin);
    if (d.m4_metrics) {
      const auto ref = naive2(w.input, static_cast<int>(w.target.size()), d.seasonality);
      smape_sum += smape(w.target, pred);
      mase_sum += mase(w.target, pred, w.input, d.seasonality);
      smape_ref += smape(w.target, ref);
      mase_ref += mase(w.target, ref, w.input, d.seasonality);
    }
  }
  auto report = acc.report(model.config().digest());
  if (d.m4_metrics) {
    const double n = static_cast<double>(samples.size());
    report.values["smape"] = smape_sum / n;
    report.values["mase"] = mase_sum / n;
    if (smape_ref == 0.0 || mase_ref == 0.0) throw ContractError("owa: Naive2 reference error is zero");
    report.values["owa"] = 0.5 * (smape_sum / smape_ref + mase_sum / mase_ref);
  }
  report.values["last_value_mse"] = last_value_mse(samples);
  return {report, acc.rows};
}

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline Evaluation evaluate_classify(Model& model, const std::vector<LabeledSeries>& samples) {
  if (samples.empty()) throw ContractError("evaluate: no samples");
  std::vector<int> pred, truth;
  double ce = 0.0;
  for (const auto& s : samples) {
    const auto logits = model.classify(s.values);
    ce += compute_loss(logits, s.label).item();
    pred.push_back(argmax(logits.values()));
    truth.push_back(s.label);
  }
  MetricReport r;
  r.task = "classify";
  r.samples = samples.size();
  r.config_digest = model.config().digest();
  r.values["accuracy"] = accuracy(pred, truth);
  r.values["cross_entropy"] = ce / static_cast<double>(samples.size());
  return {r, {}};
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double lr = 0.0;
};

// Tracks the best validation metric; stops after `patience` epochs
// without strict improvement.
struct EarlyStopping {
  int patience = 5;
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int bad_epochs = 0;

  // True when `val` is a new best.
  bool update(int epoch, double val) {
    if (val < best) {
      best = val;
      best_epoch = epoch;
      bad_epochs = 0;
      return true;
    }
    ++bad_epochs;
    return false;
  }
  bool should_stop() const { return bad_epochs >= patience; }
};

struct TrainResult {
  MetricReport report;
  std::vector<EpochLog> history;
  int best_epoch = -1;
  double best_val = 0.0;
  bool stopped_early = false;
};

struct RunOptions {
  std::string out_dir;  // empty: no files
  bool resume = false;
  std::function<void(const EpochLog&)> on_epoch;
};

namespace detail {

inline std::string format_log(const std::vector<EpochLog>& history) {
  std::ostringstream out;
  out << std::setprecision(10);
  for (const auto& e : history) {
    out << e.epoch << ", " << e.train_loss << ", " << e.val_metric << ", " << e.lr << '\n';
  }
  return out.str();
}

// Deterministic Fisher-Yates independent of the standard library's
// distribution implementations.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

inline void restore_values(std::vector<NamedParameter>& params,
                           const std::vector<std::vector<double>>& snapshot) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_values();
    std::copy(snapshot[i].begin(), snapshot[i].end(), dst.begin());
  }
}

inline std::vector<std::vector<double>> snapshot_values(const std::vector<NamedParameter>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

}  // namespace detail

inline Checkpoint make_training_checkpoint(const Model& model, const Optimizer& opt,
                                           const std::vector<std::vector<double>>& best,
                                           const std::vector<EpochLog>& history, int best_epoch,
                                           double best_val, int bad_epochs) {
  Checkpoint ckpt;
  ckpt.config_digest = model.config().digest();
  ckpt.tensors = model.state_tensors();
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size() && !best.empty(); ++i) {
    ckpt.tensors.push_back({"best." + params[i].name, params[i].tensor.shape(), best[i]});
  }
  for (auto& t : opt.state_tensors()) ckpt.tensors.push_back(std::move(t));
  std::vector<double> hist;
  for (const auto& e : history) hist.insert(hist.end(), {static_cast<double>(e.epoch), e.train_loss, e.val_metric, e.lr});
  ckpt.tensors.push_back({"train.history", {history.size(), 4}, hist});
  ckpt.tensors.push_back({"train.best_epoch", {1}, {static_cast<double>(best_epoch)}});
  ckpt.tensors.push_back({"train.best_val", {1}, {best_val}});
  ckpt.tensors.push_back({"train.bad_epochs", {1}, {static_cast<double>(bad_epochs)}});
  return ckpt;
}

// Loads plain model weights from a training checkpoint (the best snapshot
// when present).
inline void load_model_weights(Model& model, const Checkpoint& ckpt) {
  if (ckpt.config_digest != model.config().digest()) {
    throw ConfigError("checkpoint was written for a different model configuration");
  }
  std::vector<CheckpointTensor> weights;
  for (const auto& p : model.parameters()) {
    const auto* t = ckpt.find("best." + p.name);
    if (!t) t = ckpt.find(p.name);
    if (!t) throw ParseError("checkpoint: missing tensor " + p.name);
    weights.push_back({p.name, t->shape, t->values});
  }
  model.load_state(weights);
}

// Runs every training sample of one epoch; returns the mean sample loss.
template <typename Sample, typename LossFn>
double train_epoch(Model& model, Optimizer& opt, const std::vector<Sample>& train,
                   const TrainConfig& tc, std::uint64_t seed, int epoch, double lr, LossFn loss_of) {
  if (tc.batch < 1) throw ContractError("train_epoch: batch must be resolved to >= 1");
  auto& params = model.parameters();
  const auto order = detail::epoch_order(train.size(), seed, epoch);
  double total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch)) {
    const auto end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch));
    for (auto& p : params) p.tensor.zero_grad();
    const double scale = 1.0 / static_cast<double>(end - start);
    for (std::size_t k = start; k < end; ++k) {
      const auto loss = loss_of(model, train[order[k]]);
      total += loss.item();
      backward(affine(loss, scale));
    }
    opt.step(params, lr);
  }
  return total / static_cast<double>(train.size());
}

inline TrainResult run_training(const ExperimentConfig& cfg, const RunOptions& run = {}) {
  cfg.train.validate();
  Model model(cfg.model, cfg.seed);
  Optimizer opt(cfg.train.optimizer, cfg.train);
  const bool forecast = cfg.model.task == TaskKind::forecast;
  TrainConfig tc = cfg.train;
  if (tc.batch == 0) tc.batch = forecast ? 256 : 64;
  if (!forecast && cfg.train.loss != LossKind::ce) {
    throw ConfigError("train.loss must be ce for classification");
  }
  if (forecast && cfg.train.loss == LossKind::ce) {
    throw ConfigError("train.loss ce needs a classification task");
  }

  ForecastData fdata;
  ClassData cdata;
  if (forecast) {
    fdata = make_forecast_data(cfg.data, cfg.model);
  } else {
    cdata = make_class_data(cfg.data, cfg.model);
    if (cfg.model.method == Method::fsca) {
      model.set_class_examples(pick_class_examples(cdata.train, cfg.model.classes));
    }
  }

  const std::filesystem::path out_dir = run.out_dir;
  const auto ckpt_path = out_dir / "checkpoint.bin";
  TrainResult result;
  std::vector<std::vector<double>> best;
  EarlyStopping stopping{cfg.train.patience};
  int start_epoch = 0;

  if (run.resume && !run.out_dir.empty() && std::filesystem::exists(ckpt_path)) {
    const auto ckpt = read_checkpoint(ckpt_path);
    if (ckpt.config_digest != model.config().digest()) {
      throw ConfigError("resume: checkpoint was written for a different configuration");
    }
    model.load_state(ckpt.tensors);
    opt.load_state(ckpt, model.parameters());
    for (const auto& p : model.parameters()) {
      if (const auto* t = ckpt.find("best." + p.name)) best.push_back(t->values);
    }
    if (!best.empty() && best.size() != model.parameters().size()) {
      throw ParseError("resume: incomplete best snapshot");
    }
    const auto* h = ckpt.find("train.history");
    if (!h) throw ParseError("resume: missing train.history");
    for (std::size_t i = 0; i + 3 < h->values.size(); i += 4) {
      result.history.push_back({static_cast<int>(h->values[i]), h->values[i + 1],
                                h->values[i + 2], h->values[i + 3]});
    }
    auto scalar = [&](const char* name) {
      const auto* t = ckpt.find(name);
      if (!t) throw ParseError(std::string("resume: missing ") + name);
      return t->values.at(0);
    };
    stopping.best_epoch = static_cast<int>(scalar("train.best_epoch"));
    stopping.best = scalar("train.best_val");
    stopping.bad_epochs = static_cast<int>(scalar("train.bad_epochs"));
    start_epoch = static_cast<int>(result.history.size());
    if (stopping.should_stop()) {
      result.stopped_early = true;
      start_epoch = cfg.train.max_epochs;
    }
  }

  auto forecast_loss = [&](Model& m, const WindowSample& w) {
    return compute_loss(m.forecast(w.input), w.target, cfg.train.loss);
  };
  auto class_loss = [&](Model& m, const LabeledSeries& s) {
    return compute_loss(m.classify(s.values), s.label);
  };

  for (int epoch = start_epoch; epoch < cfg.train.max_epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.train);
    EpochLog log{epoch, 0.0, 0.0, lr};
    if (forecast) {
      log.train_loss = train_epoch(model, opt, fdata.train, tc, cfg.seed, epoch, lr, forecast_loss);
      log.val_metric = evaluate_forecast(model, fdata.val, cfg.data).report.values.at("mse");
    } else {
      log.train_loss = train_epoch(model, opt, cdata.train, tc, cfg.seed, epoch, lr, class_loss);
      log.val_metric = evaluate_classify(model, cdata.val).report.values.at("cross_entropy");
    }
    result.history.push_back(log);
    if (stopping.update(epoch, log.val_metric)) best = detail::snapshot_values(model.parameters());
    if (run.on_epoch) run.on_epoch(log);
    if (!run.out_dir.empty()) {
      atomic_write(out_dir / "train.log", detail::format_log(result.history));
      write_checkpoint(ckpt_path, make_training_checkpoint(model, opt, best, result.history,
                                                           stopping.best_epoch, stopping.best,
                                                           stopping.bad_epochs));
    }
    if (stopping.should_stop()) {
      result.stopped_early = true;
      break;
    }
  }

  result.best_epoch = stopping.best_epoch;
  result.best_val = stopping.best;
  if (!best.empty()) detail::restore_values(model.parameters(), best);
  Evaluation eval = forecast ? evaluate_forecast(model, fdata.test, cfg.data)
                             : evaluate_classify(model, cdata.test);
  eval.report.extra["method"] = cfg.model.method == Method::vca ? "vca" : "fsca";
  eval.report.extra["variant"] = variant_name(cfg.model.variant);
  eval.report.extra["seed"] = cfg.seed;
  eval.report.extra["lr0"] = cfg.train.lr0;
  eval.report.extra["epochs_run"] = result.history.size();
  eval.report.extra["best_epoch"] = result.best_epoch;
  eval.report.extra["best_val"] = result.best_val;
  eval.report.extra["train_samples"] = forecast ? fdata.train.size() : cdata.train.size();
  eval.report.validate();
  result.report = eval.report;
  if (!run.out_dir.empty()) {
    atomic_write(out_dir / "report.json", result.report.dump());
    if (!eval.rows.empty()) atomic_write(out_dir / "windows.csv", format_window_rows(eval.rows));
  }
  return result;
}

// Zero-shot: weights from a checkpoint, test windows from `cfg.data`.
inline MetricReport run_evaluation(const ExperimentConfig& cfg, const std::filesystem::path& ckpt_path,
                                   const std::string& out_dir = {}) {
  Model model(cfg.model, cfg.seed);
  load_model_weights(model, read_checkpoint(ckpt_path));
  Evaluation eval;
  if (cfg.model.task == TaskKind::forecast) {
    eval = evaluate_forecast(model, make_forecast_data(cfg.data, cfg.model).test, cfg.data);
  } else {
    auto data = make_class_data(cfg.data, cfg.model);
    if (cfg.model.method == Method::fsca) {
      model.set_class_examples(pick_class_examples(data.train, cfg.model.classes));
    }
    eval = evaluate_classify(model, data.test);
  }
  eval.report.extra["checkpoint"] = ckpt_path.filename().string();
  eval.report.validate();
  if (!out_dir.empty()) {
    atomic_write(std::filesystem::path(out_dir) / "eval_report.json", eval.report.dump());
    if (!eval.rows.empty()) {
      atomic_write(std::filesystem::path(out_dir) / "eval_windows.csv", format_window_rows(eval.rows));
    }
  }
  return eval.report;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRun {
  std::string label;
  ExperimentConfig config;
};

// Expands plan variants into concrete configs (one label may cover several
// sweep points).
inline std::vector<AblationRun> expand_ablation(const ExperimentConfig& base,
                                                const std::vector<std::string>& variants) {
  std::vector<AblationRun> out;
  for (const auto& v : variants) {
    if (v == "insertion_sweep") {
      const int l = base.model.backbone.layers;
      const std::vector<std::vector<int>> sweeps{{0}, {0, 2}, {0, 4}, {0, 2, 4}, {2, 4}};
      for (const auto& pos : sweeps) {
        if (pos.back() > l) continue;
        auto c = base;
        c.model.backbone.insertion_positions = pos;
        std::string label = "insertion[";
        for (std::size_t i = 0; i < pos.size(); ++i) label += (i ? "," : "") + std::to_string(pos[i]);
        out.push_back({label + "]", c});
      }
    } else if (v == "layer_sweep") {
      for (int l : {1, 2, 4, 6}) {
        auto c = base;
        c.model.backbone.layers = l;
        c.model.backbone.insertion_positions = {0, l};
        out.push_back({"layers=" + std::to_string(l), c});
      }
    } else if (v == "parts_sweep") {
      for (int n : {1, 2, 3, 4}) {
        auto c = base;
        c.model.parts = n;
        out.push_back({"parts=" + std::to_string(n), c});
      }
    } else {
      auto c = base;
      c.model.variant = parse_variant(v);
      out.push_back({v, c});
    }
  }
  return out;
}

inline nlohmann::ordered_json run_ablation(const ExperimentConfig& base, const AblationPlan& plan,
                                           const std::function<void(const std::string&)>& progress = {}) {
  if (plan.seeds.empty()) throw ConfigError("ablation: at least one seed required");
  const auto metric = base.model.task == TaskKind::forecast ? "mse" : "accuracy";
  nlohmann::ordered_json report;
  report["schema_version"] = kReportSchemaVersion;
  report["metric"] = metric;
  report["variants"] = nlohmann::ordered_json::array();
  for (const auto& run : expand_ablation(base, plan.variants)) {
    nlohmann::ordered_json entry;
    entry["label"] = run.label;
    entry["runs"] = nlohmann::ordered_json::array();
    double sum = 0.0;
    int ok = 0;
    for (auto seed : plan.seeds) {
      auto c = run.config;
      c.seed = seed;
      nlohmann::ordered_json r;
      r["seed"] = seed;
      try {
        const auto res = run_training(c);
        r["value"] = res.report.values.at(metric);
        sum += res.report.values.at(metric);
        ++ok;
      } catch (const std::exception& e) {
        r["error"] = e.what();
      }
      if (progress) progress(run.label + " seed " + std::to_string(seed) + ": " + r.dump());
      entry["runs"].push_back(r);
    }
    entry["completed"] = ok;
    if (ok > 0) entry["mean"] = sum / ok;
    report["variants"].push_back(entry);
  }
  return report;
}

}  // namespace ctxalign
