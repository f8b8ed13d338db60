#pragma once

// Command-line front end. run_cli returns 0 on success, 1 on usage errors
// and 2 on runtime failures.

#include "ffact/evaluation.hpp"
#include "ffact/trainer.hpp"
#include "ffact/transport_demo.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace ffact {

namespace cli {

inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kRuntime = 2;

struct Options {
  std::string config, ckpt, metric = "equiv-out", schedule, out, metrics, data_path, preset = "toy";
  long iterations = -1;
  long count = 4;
  long n = -1;
  std::uint64_t seed = 0;
  bool zero_flow = false;
  bool demo = false;
};

inline void print_row(std::ostream& os, const LogRow& r) {
  os << to_csv(r) << (r.skipped ? ",skipped" : "") << '\n';
}

template <class Real>
int train(const Options& o, std::ostream& out) {
  auto c = load_config(o.config);
  if (o.iterations >= 0) c.iterations = o.iterations;
  if (!o.out.empty()) c.out = o.out;
  if (!o.metrics.empty()) c.metrics = o.metrics;
  c.validate();
  if (c.out.empty()) throw ConfigError("train: no checkpoint path (set out in the config or pass --out)");
  const auto data = load_dataset(c);
  auto s = init_state<Real>(c);
  TrainHooks hooks;
  hooks.on_step = [&](const LogRow& r) {
    if (r.iteration % c.log_every == 0 || r.iteration + 1 == c.iterations) print_row(out, r);
  };
  out << kMetricsHeader << '\n';
  train(s, data, hooks);
  out << "checkpoint " << c.out << " (" << s.iteration << " iterations, " << s.skipped << " skipped)\n";
  return kOk;
}

template <class Real>
int eval(const Options& o, std::ostream& out) {
  const auto s = load_checkpoint<Real>(o.ckpt);
  const auto& c = s.config;
  const auto data = load_dataset(c);
  const auto test = make_test_set(c, data);
  const auto labels = field_labels(s, test);
  std::vector<MetricRow> rows;
  if (o.metric == "elbo") {
    rows = metric_rows(o.metric, summarize_by_label(sequence_elbos(s.model, s.bank, test.sequences, labels, o.seed),
                                                    labels, c.num_k));
  } else {
    EvalOptions opt;
    opt.zero_flow = o.zero_flow;
    const auto space = o.metric == "equiv-out" ? ErrorSpace::output : ErrorSpace::latent;
    rows = metric_rows(o.metric, evaluate_equivariance(s.model, s.bank, c.num_k, test.sequences, labels, space, opt));
  }
  if (!o.out.empty()) write_metrics_csv(o.out, rows);
  out << "metric,k,value,n_sequences\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.metric << ',' << (r.k < 0 ? std::string("all") : std::to_string(r.k)) << ',' << r.value << ','
        << r.n_sequences << '\n';
  return kOk;
}

template <class Real>
int traverse(const Options& o, std::ostream& out) {
  const auto s = load_checkpoint<Real>(o.ckpt);
  const auto& c = s.config;
  const auto schedule = parse_schedule(o.schedule);
  const auto data = load_dataset(c);
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(o.count), data.test.size());
  if (n == 0) throw ConfigError("traverse: --count must be positive");
  std::vector<Eigen::MatrixXd> rows;
  for (std::size_t i = 0; i < n; ++i)
    rows.push_back(ffact::traverse(s.model, s.bank, Vector<Real>(data.test[i].template cast<Real>()), schedule)
                       .frames.template cast<double>());
  export_grid(rows, c.image(), o.out);
  out << "wrote " << o.out << " (" << rows.size() << " rows x " << rows.front().cols() << " frames)\n";
  return kOk;
}

template <class Real>
int verify_checkpoint(const Options& o, std::ostream& out) {
  const auto s = load_checkpoint<Real>(o.ckpt);
  const auto& c = s.config;
  const auto data = load_dataset(c);
  Matrix<Real> x(c.image().size(), static_cast<Eigen::Index>(data.test.size()));
  for (std::size_t i = 0; i < data.test.size(); ++i)
    x.col(static_cast<Eigen::Index>(i)) = data.test[i].template cast<Real>();
  const Matrix<Real> z0 = encode_mean(s.model, x);
  out << "k,transport_cost,mean_sq_hj_residual,diffusion\n" << std::setprecision(10);
  for (Eigen::Index k = 0; k < c.num_k; ++k) {
    std::vector<FlowTrajectory<Real>> trajs;
    double res = 0;
    for (Eigen::Index i = 0; i < z0.cols(); ++i) {
      trajs.push_back(evolve_posterior(s.bank, k, Vector<Real>(z0.col(i)), Real(0), c.steps));
      for (int t = 1; t <= c.steps; ++t) {
        const double r = static_cast<double>(hj_residual(s.bank, k, trajs.back().states[t].z, static_cast<double>(t)));
        res += r * r;
      }
    }
    out << k << ',' << transport_cost(s.bank, k, trajs) << ',' << res / static_cast<double>(z0.cols() * c.steps)
        << ',' << static_cast<double>(diffusion_coefficient(s.bank, k)) << '\n';
  }
  return kOk;
}

inline int verify_demo(std::ostream& out) {
  const TransportDemoConfig c;
  const auto r = run_transport_demo(c);
  out << std::setprecision(6) << "transport_cost " << r.transport_cost << "\nhalf_w2_squared " << r.target_cost
      << "\nrelative_error " << std::abs(r.transport_cost - r.target_cost) / r.target_cost << "\nhj_residual_initial "
      << r.initial_hj << "\nhj_residual_final " << r.final_hj << "\nhj_ratio " << r.final_hj / r.initial_hj
      << "\nterminal_kl " << r.terminal_kl << '\n';
  return kOk;
}

inline int gen_data(const Options& o, std::ostream& out) {
  auto c = preset_config(o.preset);
  if (!o.data_path.empty()) c.data_path = o.data_path;
  if (o.n > 0) {
    c.n_train = o.n;
    c.n_test = 0;
  }
  if (c.dataset == "mnist" && c.data_path.empty()) throw ConfigError("gen-data: the mnist preset needs --data-path");
  const auto total = static_cast<std::size_t>(c.n_train + c.n_test);
  const auto images = c.dataset == "toy" ? make_toy_dataset(c.data_seed, total, c.image_size)
                                         : mnist_bases(load_idx(c.data_path), total);
  DatasetCache cache;
  const auto size = static_cast<std::uint32_t>(c.image().size());
  cache.dims = {static_cast<std::uint32_t>(images.size()), size};
  for (const auto& img : images)
    for (Eigen::Index i = 0; i < img.size(); ++i) cache.data.push_back(static_cast<float>(img(i)));
  write_cache(o.out, cache);
  out << "wrote " << o.out << " (" << images.size() << " images of " << c.image_size << "x" << c.image_size
      << ")\n";
  return kOk;
}

inline std::string precision_of_checkpoint(const std::string& path) { return checkpoint_config(path).precision; }

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  cli::Options o;
  CLI::App app{"Flow-factorized representation learning"};
  app.name("ffact");
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", o.config, "key = value config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", o.out, "checkpoint path (overrides the config)");
  train->add_option("--metrics", o.metrics, "metrics CSV path (overrides the config)");
  train->add_option("--iterations", o.iterations, "iteration count (overrides the config)")->check(CLI::NonNegativeNumber);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its held-out sequences");
  eval->add_option("--ckpt", o.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--metric", o.metric, "metric")->check(CLI::IsMember({"equiv-out", "equiv-latent", "elbo"}));
  eval->add_option("--out", o.out, "metrics CSV path");
  eval->add_option("--seed", o.seed, "seed of the ELBO reparameterization noise");
  eval->add_flag("--zero-flow", o.zero_flow, "evaluate the grad u = 0 baseline");

  auto* trav = app.add_subcommand("traverse", "Render latent traversals to a PPM grid");
  trav->add_option("--ckpt", o.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  trav->add_option("--schedule", o.schedule, "segments K:STEPS, comma separated; a+b superposes")->required();
  trav->add_option("--out", o.out, "PPM path")->required();
  trav->add_option("--count", o.count, "number of test images (rows)")->check(CLI::PositiveNumber);

  auto* verify = app.add_subcommand("verify-ot", "Transport-cost and HJ checks");
  auto* vckpt = verify->add_option("--ckpt", o.ckpt, "report per-potential transport cost of a checkpoint");
  vckpt->check(CLI::ExistingFile);
  auto* vdemo = verify->add_flag("--demo", o.demo, "train the 1D N(0,1) -> N(2,1) transport demo");
  vckpt->excludes(vdemo);
  verify->require_option(1);

  auto* gen = app.add_subcommand("gen-data", "Write a dataset cache");
  gen->add_option("--preset", o.preset, "toy or mnist")->check(CLI::IsMember({"toy", "mnist"}));
  gen->add_option("--out", o.out, "cache path")->required();
  gen->add_option("--data-path", o.data_path, "IDX image file for mnist");
  gen->add_option("--n", o.n, "number of images")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return cli::kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return cli::kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return cli::kUsage;
  }

  try {
    auto by_precision = [&](const std::string& precision, auto&& f32, auto&& f64) {
      return precision == "float64" ? f64() : f32();
    };
    if (*train)
      return by_precision(load_config(o.config).precision, [&] { return cli::train<float>(o, out); },
                          [&] { return cli::train<double>(o, out); });
    if (*eval)
      return by_precision(cli::precision_of_checkpoint(o.ckpt), [&] { return cli::eval<float>(o, out); },
                          [&] { return cli::eval<double>(o, out); });
    if (*trav)
      return by_precision(cli::precision_of_checkpoint(o.ckpt), [&] { return cli::traverse<float>(o, out); },
                          [&] { return cli::traverse<double>(o, out); });
    if (*verify) {
      if (o.demo) return cli::verify_demo(out);
      return by_precision(cli::precision_of_checkpoint(o.ckpt), [&] { return cli::verify_checkpoint<float>(o, out); },
                          [&] { return cli::verify_checkpoint<double>(o, out); });
    }
    if (*gen) return cli::gen_data(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return cli::kRuntime;
  }
  return cli::kUsage;
}

}  // namespace ffact
