// Command-line front end: simulate | train | predict | eval | online.
// Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical
// failure, 5 acceptance-threshold failure (eval only).

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "gpssm/errors.hpp"
#include "gpssm/eval.hpp"
#include "gpssm/io.hpp"

namespace {

using namespace gpssm;

struct CommonArgs {
  std::string config_path;
  std::string data_path;
  std::string archive_path;
  std::string out_path;
  std::int64_t seed = -1;
  int threads = 1;
  bool dump_config = false;
  bool resume = false;
};

CliConfig resolve_config(const CommonArgs& args) {
  CliConfig config = args.config_path.empty() ? parse_config(default_config_json())
                                              : load_config_file(args.config_path);
  if (args.seed >= 0) config.training.master_seed = static_cast<std::uint64_t>(args.seed);
  return config;
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "";
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a_hex(ss.str());
}

std::vector<std::string> state_headers(Index d) {
  std::vector<std::string> h;
  for (Index i = 0; i < d; ++i) h.push_back("x_" + std::to_string(i + 1));
  return h;
}

std::vector<std::string> obs_headers(Index e) {
  std::vector<std::string> h;
  for (Index i = 0; i < e; ++i) h.push_back("y_" + std::to_string(i + 1));
  return h;
}

int cmd_simulate(const CommonArgs& args) {
  CliConfig config = resolve_config(args);
  if (args.dump_config) {
    std::cout << dump_config(config).dump(2) << std::endl;
    return 0;
  }
  if (config.simulate_T < 1) {
    throw ConfigError("simulate.T must be >= 1", "simulate.T");
  }
  if (args.out_path.empty()) throw ConfigError("simulate requires --out prefix", "out");

  for (std::uint64_t seed : config.simulate_seeds) {
    Trajectory traj;
    if (config.simulate_system == "kink") {
      traj = kink_system_generate(config.simulate_T, seed);
    } else {
      // Prior sampling needs concrete hyperparameters; data-independent
      // defaults fill anything the config leaves unset.
      CliConfig c = config;
      if (!c.lengthscales.has_value()) {
        const Index d = c.latent_dim > 0 ? c.latent_dim
                        : c.structure == LatentStructure::SecondOrder ? 2 : 2;
        c.lengthscales = Vec::Ones(d);
        c.latent_dim = d;
      }
      if (!c.signal_variance.has_value()) c.signal_variance = 1.0;
      if (!c.x0_mean.has_value()) c.x0_mean = Vec::Zero(c.lengthscales->size());
      if (!c.x0_var.has_value()) c.x0_var = Vec::Ones(c.lengthscales->size());
      if (!c.r_diag.has_value() && c.likelihood == LikelihoodFamily::GaussianDiag) {
        c.r_diag = Vec::Constant(c.lengthscales->size(), 0.1);
      }
      GpssmModel model = init_model_from_data(c, Mat(0, c.lengthscales->size()));
      traj = sample_prior_trajectory(model, config.simulate_T, seed);
    }
    const std::string prefix = args.out_path + "_seed" + std::to_string(seed);
    write_csv(prefix + "_states.csv", state_headers(traj.states.cols()), traj.states);
    write_csv(prefix + "_obs.csv", obs_headers(traj.observations.cols()), traj.observations);
    std::cout << "wrote " << prefix << "_{states,obs}.csv" << std::endl;
  }
  return 0;
}

int cmd_train(const CommonArgs& args) {
  CliConfig config = resolve_config(args);
  if (args.dump_config) {
    std::cout << dump_config(config).dump(2) << std::endl;
    return 0;
  }
  if (args.data_path.empty()) throw ConfigError("train requires --data", "data");
  if (args.out_path.empty()) throw ConfigError("train requires --out", "out");

  const CsvTable table = read_csv(args.data_path);
  const Mat& y = table.values;

  GpssmModel init;
  InducingPosterior resume_q;
  Index start_iter = 0;
  std::vector<double> prior_trace;
  if (args.resume && !args.archive_path.empty()) {
    const ModelArchive prev = load_archive(args.archive_path);
    init = prev.model;
    start_iter = prev.provenance.iteration;
    prior_trace = prev.provenance.elbo_trace_tail;
  } else {
    init = init_model_from_data(config, y);
  }

  TrainingConfig tc = config.training;
  if (args.resume) tc.reinit_inducing = false;

  ProgressSink sink = [start_iter](const ProgressRecord& rec) {
    Json j;
    j["iter"] = rec.iteration + start_iter;
    j["elbo"] = rec.elbo;
    j["ess_min"] = rec.ess_min;
    j["theta_digest"] = rec.theta_digest;
    std::cout << j.dump() << std::endl;
  };

  TrainingState state = train(y, tc, init, sink);

  ModelArchive archive;
  archive.model = state.model;
  archive.posterior = state.q_u;
  archive.provenance.config_fingerprint = config.fingerprint;
  archive.provenance.data_hash = file_hash(args.data_path);
  archive.provenance.seeds = {config.training.master_seed};
  archive.provenance.iteration = start_iter + state.iteration;
  std::vector<double> trace = prior_trace;
  trace.insert(trace.end(), state.elbo_trace.begin(), state.elbo_trace.end());
  if (trace.size() > 50) trace.erase(trace.begin(), trace.end() - 50);
  archive.provenance.elbo_trace_tail = trace;
  archive.provenance.filter_carry = state.filter_carry;
  save_archive_atomic(args.out_path, archive);
  std::cout << "archive written to " << args.out_path << std::endl;
  return 0;
}

int cmd_predict(const CommonArgs& args) {
  CliConfig config = resolve_config(args);
  if (args.dump_config) {
    std::cout << dump_config(config).dump(2) << std::endl;
    return 0;
  }
  if (args.archive_path.empty()) throw ConfigError("predict requires --archive", "archive");
  if (args.out_path.empty()) throw ConfigError("predict requires --out", "out");

  const ModelArchive archive = load_archive(args.archive_path);
  SparseGp gp(archive.model);
  const Index d = archive.model.latent_dim();

  if (config.rollout_horizon > 0) {
    Vec x0 = config.rollout_x0.value_or(Vec(archive.model.x0_prior.mean));
    if (x0.size() != d) throw ConfigError("rollout_x0 dimension mismatch", "predict.rollout_x0");
    const RolloutResult r = rollout(gp, archive.posterior, x0, config.rollout_horizon,
                                    config.rollout_mode, config.rollout_seed);
    write_csv(args.out_path, state_headers(d), r.states);
    std::cout << "rollout written to " << args.out_path << std::endl;
    return 0;
  }

  if (!config.predict_grid_lo.has_value() || !config.predict_grid_hi.has_value()) {
    throw ConfigError("predict needs a grid (grid_lo, grid_hi) or a rollout horizon",
                      "predict.grid_lo");
  }
  const Vec lo = *config.predict_grid_lo;
  const Vec hi = *config.predict_grid_hi;
  if (lo.size() != d || hi.size() != d) {
    throw ConfigError("prediction grid dimension mismatch", "predict.grid_lo");
  }
  if (config.predict_grid_n < 1) {
    throw ConfigError("predict.grid_n must be >= 1", "predict.grid_n");
  }
  if (d != 1) {
    throw ConfigError("grid prediction output supports 1D models; use rollout for higher D",
                      "predict.grid_n");
  }

  const PredictorCache cache = make_predictor_cache(gp, archive.posterior);
  const Index n = config.predict_grid_n;
  Mat out(n, 3);
  for (Index i = 0; i < n; ++i) {
    const double x = lo[0] + (hi[0] - lo[0]) * static_cast<double>(i) /
                                 static_cast<double>(std::max<Index>(1, n - 1));
    Vec xv(1);
    xv[0] = x;
    const DiagGaussian pred = predict_transition(gp, cache, xv);
    out(i, 0) = x;
    out(i, 1) = pred.mean[0];
    out(i, 2) = std::sqrt(std::max(0.0, pred.var[0]));
  }
  write_csv(args.out_path, {"x", "mean", "std"}, out);
  std::cout << "prediction band written to " << args.out_path << std::endl;
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  CliConfig config = resolve_config(args);
  if (args.dump_config) {
    std::cout << dump_config(config).dump(2) << std::endl;
    return 0;
  }
  if (args.archive_path.empty()) throw ConfigError("eval requires --archive", "archive");
  if (args.data_path.empty()) throw ConfigError("eval requires --data (held-out states)", "data");

  const ModelArchive archive = load_archive(args.archive_path);
  const CsvTable table = read_csv(args.data_path);
  Trajectory held_out;
  held_out.states = table.values;
  const Mat pairs = transition_pairs(held_out);

  SparseGp gp(archive.model);
  const auto t0 = std::chrono::steady_clock::now();
  const TransitionMetrics metrics = transition_metrics(gp, archive.posterior, pairs);
  const auto t1 = std::chrono::steady_clock::now();

  BenchmarkReport report;
  report.test_rmse = metrics.rmse;
  report.mean_pred_loglik = metrics.mean_loglik;
  report.test_time_s = std::chrono::duration<double>(t1 - t0).count();
  report.config_fingerprint = config.fingerprint;
  report.seeds = archive.provenance.seeds;

  Json j;
  j["test_rmse"] = report.test_rmse;
  j["mean_pred_loglik"] = report.mean_pred_loglik;
  j["test_time_s"] = report.test_time_s;
  j["n_pairs"] = pairs.rows();
  j["config_fingerprint"] = report.config_fingerprint;
  j["seeds"] = report.seeds;
  if (!args.out_path.empty()) {
    std::ofstream out(args.out_path);
    if (!out) throw DataError("cannot write report " + args.out_path);
    out << j.dump(2) << "\n";
  }
  std::cout << j.dump(2) << std::endl;

  bool violated = false;
  if (config.eval_max_rmse.has_value() && report.test_rmse > *config.eval_max_rmse) {
    std::cerr << "threshold violated: rmse " << report.test_rmse << " > " << *config.eval_max_rmse
              << std::endl;
    violated = true;
  }
  if (config.eval_min_loglik.has_value() && report.mean_pred_loglik < *config.eval_min_loglik) {
    std::cerr << "threshold violated: loglik " << report.mean_pred_loglik << " < "
              << *config.eval_min_loglik << std::endl;
    violated = true;
  }
  return violated ? 5 : 0;
}

int cmd_online(const CommonArgs& args) {
  CliConfig config = resolve_config(args);
  if (args.dump_config) {
    std::cout << dump_config(config).dump(2) << std::endl;
    return 0;
  }
  if (args.archive_path.empty()) throw ConfigError("online requires --archive", "archive");
  if (args.data_path.empty()) throw ConfigError("online requires --data (stream)", "data");
  if (args.out_path.empty()) throw ConfigError("online requires --out", "out");

  ModelArchive archive = load_archive(args.archive_path);
  const CsvTable table = read_csv(args.data_path);
  const Mat& stream = table.values;
  if (stream.rows() > 0 && stream.cols() != archive.model.likelihood.obs_dim()) {
    throw DataError("stream dimension mismatch at segment 0");
  }

  TrainingState state;
  state.model = archive.model;
  state.q_u = archive.posterior;
  state.iteration = archive.provenance.iteration;
  state.master_seed = config.training.master_seed;
  state.filter_carry = archive.provenance.filter_carry;

  const Index S = config.online_segment_length;
  Index segment_index = 0;
  for (Index start = 0; start < stream.rows(); start += S, ++segment_index) {
    const Index len = std::min<Index>(S, stream.rows() - start);
    const Mat segment = stream.middleRows(start, len);
    try {
      state = online_update(std::move(state), segment, config.training);
    } catch (const std::exception& e) {
      std::cerr << "online update failed at segment " << segment_index << ": " << e.what()
                << std::endl;
      return 4;
    }
    archive.model = state.model;
    archive.posterior = state.q_u;
    archive.provenance.iteration = state.iteration;
    archive.provenance.filter_carry = state.filter_carry;
    archive.provenance.data_hash = file_hash(args.data_path);
    save_archive_atomic(args.out_path, archive);
  }
  if (segment_index == 0) {
    // Empty stream: provenance refresh only.
    archive.provenance.data_hash = file_hash(args.data_path);
    save_archive_atomic(args.out_path, archive);
  }
  std::cout << "processed " << segment_index << " segments; archive at " << args.out_path
            << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational learning for Gaussian-process state-space models"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", args.config_path, "JSON configuration file");
    cmd->add_option("--data", args.data_path, "CSV data file");
    cmd->add_option("--archive", args.archive_path, "model archive file");
    cmd->add_option("--out", args.out_path, "output path (or prefix)");
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--threads", args.threads, "worker threads for evaluation");
    cmd->add_flag("--dump-config", args.dump_config, "print the resolved config and exit");
  };

  CLI::App* simulate = app.add_subcommand("simulate", "sample trajectories");
  CLI::App* train_cmd = app.add_subcommand("train", "fit a model to a series");
  CLI::App* predict = app.add_subcommand("predict", "transition-function predictions");
  CLI::App* eval_cmd = app.add_subcommand("eval", "held-out transition metrics");
  CLI::App* online = app.add_subcommand("online", "sequential posterior updates");
  for (CLI::App* cmd : {simulate, train_cmd, predict, eval_cmd, online}) add_common(cmd);
  train_cmd->add_flag("--resume", args.resume, "continue training from --archive");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(args);
    if (train_cmd->parsed()) return cmd_train(args);
    if (predict->parsed()) return cmd_predict(args);
    if (eval_cmd->parsed()) return cmd_eval(args);
    if (online->parsed()) return cmd_online(args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "numerical error: " << e.what() << std::endl;
    return 4;
  }
  return 2;
}
