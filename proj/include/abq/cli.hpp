#pragma once

// `abq` command line: train | eval | quantize | export-curves.
//
// Exit codes: 0 ok, 1 usage or other failure, 2 config error, 3 data or
// file-format error, 4 numeric failure (divergence).

#include <abq/checkpoint.hpp>
#include <abq/config.hpp>
#include <abq/experiment.hpp>
#include <abq/int_inference.hpp>
#include <abq/metrics.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace abq {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitData = 3, kExitNumeric = 4 };

namespace cli_detail {

namespace fs = std::filesystem;

struct ConfigArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

inline void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config, "experiment config (JSON)");
  cmd->add_option("--set", a.overrides, "override a config key, key=value (repeatable)");
  cmd->add_option("--seed", a.seed, "seed override");
}

/// Loads the config, applies --set and --seed, validates. Returns the
/// directory relative dataset paths resolve against.
inline ExperimentConfig resolve_config(const ConfigArgs& a, fs::path& base_dir) {
  ExperimentConfig c;
  if (!a.config.empty()) {
    c = load_config(a.config);
    base_dir = fs::path(a.config).parent_path();
  }
  for (const auto& o : a.overrides) apply_override(c, o);
  if (a.seed) c.seed = *a.seed;
  validate(c);
  return c;
}

inline std::string fmt(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.9g", v);
  return b;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
}

inline int cmd_train(const ConfigArgs& args, const std::string& out_override, std::ostream& out) {
  fs::path base;
  ExperimentConfig c = resolve_config(args, base);
  if (!out_override.empty()) c.output_dir = out_override;
  const AboConfig abo = make_abo_config(c);

  std::optional<DataPair> data;
  Shape input{1, 1, 1};
  if (c.model != "toy") {
    data = load_data(c, base);
    input = data->train.sample_shape();
  }
  Network net = build_network(c, input);
  const fs::path dir = c.output_dir;
  fs::create_directories(dir);
  write_text(dir / "config.json", serialize(c));

  AboTrainer trainer(net, abo, data ? &data->train : nullptr, data ? &data->test : nullptr, toy_objective(c));
  {
    MetricsWriter writer(dir / "metrics.csv");
    trainer.set_sink(writer.sink());
    trainer.run();
    writer.close();
  }
  const ModelKind kind = c.model == "toy" ? ModelKind::toy : ModelKind::cnn;
  save_checkpoint(snapshot(net, kind, static_cast<std::uint64_t>(trainer.step()), trainer.alpha(), config_hash(c),
                           &trainer.optimizer()),
                  dir / "model.abq");

  nlohmann::ordered_json s;
  s["gradient_mode"] = c.gradient_mode;
  s["steps"] = c.steps;
  s["final_alpha"] = trainer.alpha();
  if (c.model == "toy") {
    const auto& l = net.layers().front();
    s["w"] = l.weight.value()[0];
    s["w_q"] = l.w_q_values[0];
  } else {
    double best = 0.0;
    for (const auto& r : trainer.history()) best = std::max(best, r.acc_wq);
    const auto& last = trainer.history().back();
    s["final_acc_w"] = last.acc_w;
    s["final_acc_wq"] = last.acc_wq;
    s["best_acc_wq"] = best;
  }
  write_text(dir / "summary.json", s.dump(2) + "\n");
  for (const auto& [k, v] : s.items()) out << k << ' ' << (v.is_number() ? fmt(v.get<double>()) : v.get<std::string>()) << '\n';
  return kExitOk;
}

inline int cmd_eval(const ConfigArgs& args, const std::string& checkpoint, const std::string& path,
                    std::ostream& out) {
  fs::path base;
  const ExperimentConfig c = resolve_config(args, base);
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (ck.model != ModelKind::cnn) throw ConfigError("eval needs a classifier checkpoint");
  const DataPair data = load_data(c, base);
  const Dataset& test = data.test;
  if (Shape{ck.input_c, ck.input_h, ck.input_w} != test.sample_shape())
    throw FormatError("checkpoint input " + shape_str(Shape{ck.input_c, ck.input_h, ck.input_w}) +
                      " does not match dataset samples " + shape_str(test.sample_shape()));
  if (ck.layers.back().geom.out != test.classes) throw FormatError("checkpoint class count does not match dataset");
  Network net = network_from_checkpoint(ck, static_cast<float>(c.ema_beta));
  const std::size_t limit = c.eval_samples > 0 ? static_cast<std::size_t>(c.eval_samples) : 0;
  double acc = 0.0;
  if (path == "float") {
    acc = evaluate_accuracy(net, test, quantized_forward_options(), limit);
  } else {
    const IntNetwork inet = IntNetwork::from(net);
    const std::size_t n = limit == 0 ? test.size() : std::min(limit, test.size());
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += 256) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(n, start + 256); ++i) idx.push_back(i);
      auto [imgs, labels] = test.gather(idx);
      const Tensor logits = inet.forward(imgs);
      for (std::size_t r = 0; r < idx.size(); ++r)
        if (static_cast<int>(argmax_row(logits, r)) == labels[r]) ++correct;
    }
    acc = static_cast<double>(correct) / static_cast<double>(n);
  }
  out << "path " << path << "\naccuracy " << fmt(acc) << '\n';
  return kExitOk;
}

inline int cmd_quantize(const std::string& checkpoint, int bits, const std::string& granularity,
                        const std::string& out_path, std::ostream& out) {
  if (bits != 1 && bits != 4 && bits != 8) throw ConfigError("quantize supports 1, 4 or 8 bits, got " + std::to_string(bits));
  const Granularity g = parse_granularity(granularity);
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (!ck.has_fp_weights) throw FormatError("quantize needs a checkpoint with full-precision weights");
  Network net = network_from_checkpoint(ck);
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    QuantLayerState& l = net.layers()[i];
    l.quantize_weights = true;
    l.spec_w = QuantSpec{bits, g, QuantMode::weights, l.spec_w.scaled_binary};
    l.quantizer = std::make_shared<PpqQuantizer>(l.spec_w);
    l.w_q.reset();
    l.refresh_quantized();
    const auto& q = *l.w_q;
    double err = 0.0;
    const Tensor& w = l.weight.value();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double d = static_cast<double>(w[k]) - static_cast<double>(q.scale_for(k)) * q.q[k];
      err += d * d;
    }
    out << "layer " << i << " bits " << bits << " scales " << q.gamma.size() << " error " << fmt(err) << '\n';
  }
  Checkpoint stripped = strip_checkpoint(snapshot(net, ck.model, ck.step, ck.alpha, ck.config_hash));
  fs::path dest = out_path.empty() ? fs::path(checkpoint).replace_extension(".q.abq") : fs::path(out_path);
  if (fs::is_directory(dest)) dest /= "model.q.abq";
  save_checkpoint(stripped, dest);
  out << "wrote " << dest.string() << '\n';
  return kExitOk;
}

inline int cmd_export_curves(const std::string& metrics, const std::string& out_path, std::ostream& out) {
  const auto rows = read_metrics_csv(metrics);
  fs::path dest = out_path.empty() ? fs::path(metrics).parent_path() / "curves.svg" : fs::path(out_path);
  if (fs::is_directory(dest)) dest /= "curves.svg";
  write_text(dest, render_curves_svg(rows));
  out << "wrote " << dest.string() << '\n';
  return kExitOk;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"alpha-blending quantization-aware training"};
  app.require_subcommand(1);

  ConfigArgs train_args, eval_args;
  std::string train_out, checkpoint, eval_path = "float", q_checkpoint, q_out, granularity = "per_layer", metrics,
                                     curves_out;
  int bits = 8;

  auto* train = app.add_subcommand("train", "train a model (ab, ste or fp32)");
  add_config_args(train, train_args);
  train->add_option("--out", train_out, "output directory (overrides output_dir)");

  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on the test split");
  add_config_args(eval, eval_args);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--path", eval_path, "float (fake-quant) or int (integer kernels)")
      ->check(CLI::IsMember({"float", "int"}));

  auto* quant = app.add_subcommand("quantize", "post-training PPQ; writes an inference-only checkpoint");
  quant->add_option("--checkpoint", q_checkpoint, "checkpoint with full-precision weights")->required();
  quant->add_option("--bits", bits, "1, 4 or 8");
  quant->add_option("--granularity", granularity, "per_layer or per_channel");
  quant->add_option("--out", q_out, "output file or directory");

  auto* curves = app.add_subcommand("export-curves", "plot acc_w, acc_wq and alpha from a metrics CSV");
  curves->add_option("--metrics", metrics, "metrics CSV")->required();
  curves->add_option("--out", curves_out, "output SVG file or directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitFailure;
  }

  try {
    if (*train) return cmd_train(train_args, train_out, out);
    if (*eval) return cmd_eval(eval_args, checkpoint, eval_path, out);
    if (*quant) return cmd_quantize(q_checkpoint, bits, granularity, q_out, out);
    return cmd_export_curves(metrics, curves_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace abq
