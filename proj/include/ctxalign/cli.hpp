#pragma once

// Command-line front end. Exit codes: 0 ok, 1 usage/config error, 2 runtime
// failure.

#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctxalign/data.hpp"
#include "ctxalign/graphspec.hpp"
#include "ctxalign/harness.hpp"
#include "ctxalign/tsembed.hpp"

namespace ctxalign {

namespace detail {

struct GraphDumpArgs {
  std::string mode = "fsca";
  std::string parts = "4,4";
  int prompt_len = 3;
  int examples = 2;
  bool pruned = false;
  std::string weights = "uniform";
  std::uint64_t seed = 0;
  int width = 8;
  std::string out;
};

inline int graph_dump(const GraphDumpArgs& a, std::ostream& out) {
  const auto parts = parse_int_list("--parts", a.parts);
  if (parts.empty()) throw ConfigError("--parts needs at least one length");
  SequenceLayout layout;
  if (a.mode == "vca") {
    if (parts.size() != 1) throw ConfigError("--mode vca takes a single part length");
    layout = make_vca_layout(parts[0], a.prompt_len);
  } else if (a.mode == "fsca") {
    layout = make_fsca_forecast_layout(parts, a.prompt_len);
  } else if (a.mode == "fsca-class") {
    if (parts.size() != 1) throw ConfigError("--mode fsca-class takes a single series length");
    layout = make_fsca_class_layout(parts[0], a.prompt_len, a.examples);
  } else {
    throw ConfigError("--mode must be vca, fsca or fsca-class");
  }
  const auto spec = build_graph_spec(layout, a.pruned);

  std::vector<double> weights;
  if (a.weights == "uniform") {
    const std::vector<double> same(static_cast<std::size_t>(spec.fine_count), 1.0);
    weights = fine_edge_weights(spec, same, 1);
  } else if (a.weights == "random") {
    std::mt19937_64 rng(a.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> emb(static_cast<std::size_t>(spec.fine_count * a.width));
    for (auto& v : emb) v = nd(rng);
    weights = fine_edge_weights(spec, emb, static_cast<std::size_t>(a.width));
  } else {
    throw ConfigError("--weights must be uniform or random");
  }
  const auto fine = fine_adjacency(spec, weights);
  const auto coarse = coarse_adjacency(spec);
  const auto gamma = spec.gamma();

  auto emit = [&](const std::string& name, const std::function<void(std::ostream&)>& body) {
    if (a.out.empty()) {
      out << "# " << name << '\n';
      body(out);
    } else {
      std::ostringstream buf;
      body(buf);
      atomic_write(std::filesystem::path(a.out) / (name + ".txt"), buf.str());
    }
  };
  emit("fine_edges", [&](std::ostream& o) { write_fine_edges(o, spec, weights); });
  emit("coarse_edges", [&](std::ostream& o) { write_coarse_edges(o, spec); });
  emit("fine_adjacency", [&](std::ostream& o) { write_matrix(o, fine); });
  emit("fine_normalized", [&](std::ostream& o) { write_matrix(o, normalize_adjacency(fine)); });
  emit("coarse_adjacency", [&](std::ostream& o) { write_matrix(o, coarse); });
  emit("coarse_normalized", [&](std::ostream& o) { write_matrix(o, normalize_adjacency(coarse)); });
  emit("gamma", [&](std::ostream& o) { write_matrix(o, gamma.rows(), gamma.cols(), gamma.values()); });
  if (!a.out.empty()) {
    out << spec.fine_edges.size() << " fine edges, " << spec.coarse_edges.size()
        << " coarse edges written to " << a.out << '\n';
  }
  return 0;
}

}  // namespace detail

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Context-alignment time-series toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::int64_t seed_override = -1;
  std::string out_dir;

  auto* train = app.add_subcommand("train", "train a model and write report/checkpoint");
  bool resume = false;
  train->add_option("--config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed_override, "override the run seed");
  train->add_option("--out-dir", out_dir, "output directory (overrides out_dir)");
  train->add_flag("--resume", resume, "continue from out-dir/checkpoint.bin");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured data (zero-shot)");
  std::string checkpoint;
  eval->add_option("--config", config_path, "experiment config for the target data")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoint, "checkpoint from train")->required()->check(CLI::ExistingFile);
  eval->add_option("--seed", seed_override, "override the run seed");
  eval->add_option("--out-dir", out_dir, "output directory");

  auto* ablate = app.add_subcommand("ablate", "run variants over seeds");
  std::string variants, seeds;
  ablate->add_option("--config", config_path, "base experiment config")->required()->check(CLI::ExistingFile);
  ablate->add_option("--variants", variants, "comma list: full,no_dsca,random_adjacency,no_coarse,layer_sweep,insertion_sweep,parts_sweep");
  ablate->add_option("--seeds", seeds, "comma list of seeds");
  ablate->add_option("--seed", seed_override, "single seed (same as --seeds N)");
  ablate->add_option("--out-dir", out_dir, "output directory");

  auto* dump = app.add_subcommand("graph-dump", "print the graph structure of a layout");
  detail::GraphDumpArgs g;
  dump->add_option("--mode", g.mode, "vca | fsca | fsca-class")->capture_default_str();
  dump->add_option("--parts", g.parts, "part lengths, e.g. 4,4 (vca: patch count)")->capture_default_str();
  dump->add_option("--prompt-len", g.prompt_len, "prompt tokens m")->capture_default_str();
  dump->add_option("--examples", g.examples, "labelled examples (fsca-class)")->capture_default_str();
  dump->add_flag("--pruned", g.pruned, "pruned edge sets");
  dump->add_option("--weights", g.weights, "uniform | random")->capture_default_str();
  dump->add_option("--seed", g.seed, "seed for random embeddings");
  dump->add_option("--width", g.width, "embedding width for random weights")->capture_default_str();
  dump->add_option("--out", g.out, "directory for one file per matrix (default stdout)");

  auto* synth = app.add_subcommand("synth", "write a synthetic series as CSV");
  std::string kind = "sine_mix";
  std::uint64_t synth_seed = 0;
  std::size_t length = 2000;
  SynthParams params;
  std::string synth_out;
  synth->add_option("--kind", kind, "sine_mix | ar2 | trend_seasonal")->capture_default_str();
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--length", length, "number of steps")->capture_default_str();
  synth->add_option("--channels", params.channels, "number of channels")->capture_default_str();
  synth->add_option("--noise", params.noise, "noise standard deviation")->capture_default_str();
  synth->add_option("--out", synth_out, "output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return 1;
  }

  auto load = [&]() {
    auto cfg = load_experiment_config(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    return cfg;
  };

  try {
    if (*train) {
      const auto cfg = load();
      RunOptions run;
      run.out_dir = cfg.out_dir;
      run.resume = resume;
      run.on_epoch = [&](const EpochLog& e) {
        err << "epoch " << e.epoch << " train_loss " << e.train_loss << " val " << e.val_metric
            << " lr " << e.lr << '\n';
      };
      const auto res = run_training(cfg, run);
      out << res.report.dump();
      return 0;
    }
    if (*eval) {
      const auto cfg = load();
      out << run_evaluation(cfg, checkpoint, cfg.out_dir).dump();
      return 0;
    }
    if (*ablate) {
      auto cfg = load();
      auto plan = cfg.ablation;
      if (!variants.empty()) {
        plan.variants.clear();
        std::string cell;
        for (char c : variants + ",") {
          if (c == ',') {
            if (!cell.empty()) plan.variants.push_back(cell);
            cell.clear();
          } else {
            cell.push_back(c);
          }
        }
      }
      if (!seeds.empty()) {
        plan.seeds.clear();
        for (int s : parse_int_list("--seeds", seeds)) plan.seeds.push_back(static_cast<std::uint64_t>(s));
      } else if (seed_override >= 0) {
        plan.seeds = {static_cast<std::uint64_t>(seed_override)};
      }
      const auto report = run_ablation(cfg, plan, [&](const std::string& line) { err << line << '\n'; });
      const auto text = report.dump(2) + "\n";
      if (!cfg.out_dir.empty()) atomic_write(std::filesystem::path(cfg.out_dir) / "ablation.json", text);
      out << text;
      return 0;
    }
    if (*dump) return detail::graph_dump(g, out);
    if (*synth) {
      const auto s = synth_generate(parse_synth_kind(kind), length, synth_seed, params);
      if (synth_out.empty()) out << format_csv(s);
      else write_csv(synth_out, s);
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace ctxalign
