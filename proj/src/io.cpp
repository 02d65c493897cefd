#include "gpssm/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gpssm/errors.hpp"

namespace gpssm {

namespace {

std::uint64_t fnv1a_bytes(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Vec json_to_vec(const Json& j) {
  Vec v(static_cast<Index>(j.size()));
  Index i = 0;
  for (const auto& item : j) v[i++] = parse_hex_double(item.get<std::string>());
  return v;
}

Json vec_to_json(const Vec& v) {
  Json j = Json::array();
  for (Index i = 0; i < v.size(); ++i) j.push_back(hex_double(v[i]));
  return j;
}

Mat json_to_mat(const Json& j) {
  const Index rows = static_cast<Index>(j.size());
  if (rows == 0) return Mat(0, 0);
  const Index cols = static_cast<Index>(j[0].size());
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    if (static_cast<Index>(j[r].size()) != cols) {
      throw DataError("archive: ragged matrix encoding");
    }
    for (Index c = 0; c < cols; ++c) {
      m(r, c) = parse_hex_double(j[r][c].get<std::string>());
    }
  }
  return m;
}

Json mat_to_json(const Mat& m) {
  Json j = Json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(hex_double(m(r, c)));
    j.push_back(std::move(row));
  }
  return j;
}

// Plain (non-hex) numeric vector readers for the config file.
Vec plain_vec(const Json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError("expected an array at " + path, path);
  Vec v(static_cast<Index>(j.size()));
  Index i = 0;
  for (const auto& item : j) {
    if (!item.is_number()) throw ConfigError("expected numbers at " + path, path);
    v[i++] = item.get<double>();
  }
  return v;
}

void check_known_keys(const Json& obj, const std::vector<std::string>& known,
                      const std::string& path) {
  for (const auto& [key, _] : obj.items()) {
    bool found = false;
    for (const auto& k : known) {
      if (k == key) {
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config field " + path + "." + key, path + "." + key);
  }
}

}  // namespace

std::string hex_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return std::string(buf);
}

double parse_hex_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw DataError("archive: malformed float literal '" + s + "'");
  return v;
}

std::string fnv1a_hex(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a_bytes(bytes)));
  return std::string(buf);
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  CsvTable table;
  std::string line;
  long line_no = 0;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");

    if (line_no == 1) {
      table.headers = cells;
      continue;
    }
    if (cells.size() != table.headers.size()) {
      throw DataError("ragged CSV row at line " + std::to_string(line_no), line_no);
    }
    std::vector<double> row;
    for (const auto& c : cells) {
      char* end = nullptr;
      const double v = std::strtod(c.c_str(), &end);
      if (end == c.c_str() || *end != '\0') {
        throw DataError("non-numeric CSV value '" + c + "' at line " + std::to_string(line_no),
                        line_no);
      }
      if (!std::isfinite(v)) {
        throw DataError("non-finite CSV value at line " + std::to_string(line_no), line_no);
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  if (table.headers.empty()) throw DataError("empty CSV " + path, 1);
  table.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(table.headers.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      table.values(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
    }
  }
  return table;
}

void write_csv(const std::string& path, const std::vector<std::string>& headers,
               const Mat& values) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (std::size_t i = 0; i < headers.size(); ++i) {
    out << headers[i] << (i + 1 < headers.size() ? "," : "");
  }
  out << "\n";
  out.precision(17);
  for (Index r = 0; r < values.rows(); ++r) {
    for (Index c = 0; c < values.cols(); ++c) {
      out << values(r, c) << (c + 1 < values.cols() ? "," : "");
    }
    out << "\n";
  }
}

// --- configuration -----------------------------------------------------------

Json default_config_json() {
  Json j;
  j["model"] = {
      {"latent_dim", 0},
      {"structure", "free"},
      {"dt", 1.0},
      {"kernel", {{"family", "matern32"}}},
      {"likelihood", {{"family", "gaussian"}}},
      {"num_inducing", 15},
  };
  j["training"] = {
      {"mode", "batch"},
      {"segment_length", 100},
      {"segments_per_iter", 1},
      {"n_particles", 1000},
      {"lag", 10},
      {"rho", {{"a", 1.0}, {"b", 1.0}, {"kappa", 0.7}}},
      {"lambda", {{"a", 1e-2}, {"b", 1.0}, {"kappa", 0.51}}},
      {"max_iters", 100},
      {"elbo_rel_tol", 1e-3},
      {"elbo_window", 5},
      {"seed", 0},
      {"learn_hyperparams", true},
      {"learn_inducing", true},
      {"reinit_inducing", true},
  };
  j["simulate"] = {{"system", "prior"}, {"T", 200}, {"seeds", {0, 1, 2, 3}}};
  j["predict"] = {{"grid_n", 200}, {"rollout_horizon", 0}, {"rollout_mode", "mean_only"},
                  {"rollout_seed", 0}};
  j["eval"] = {{"baseline_order", 1}};
  j["online"] = {{"segment_length", 100}};
  return j;
}

CliConfig parse_config(const Json& j) {
  CliConfig c;
  check_known_keys(j, {"model", "training", "simulate", "predict", "eval", "online"}, "config");

  const Json& m = j.at("model");
  check_known_keys(m,
                   {"latent_dim", "structure", "dt", "kernel", "likelihood", "num_inducing",
                    "process_noise", "x0_prior", "inducing_inputs"},
                   "model");
  c.latent_dim = m.value("latent_dim", 0);
  const std::string structure = m.value("structure", "free");
  if (structure == "free") {
    c.structure = LatentStructure::Free;
  } else if (structure == "second_order") {
    c.structure = LatentStructure::SecondOrder;
  } else {
    throw ConfigError("model.structure must be 'free' or 'second_order'", "model.structure");
  }
  c.dt = m.value("dt", 1.0);

  const Json& k = m.at("kernel");
  check_known_keys(k, {"family", "lengthscales", "signal_variance"}, "model.kernel");
  const std::string fam = k.value("family", "matern32");
  if (fam == "matern32") {
    c.kernel_family = KernelFamily::Matern32;
  } else if (fam == "matern52") {
    c.kernel_family = KernelFamily::Matern52;
  } else if (fam == "squared_exponential") {
    c.kernel_family = KernelFamily::SquaredExponential;
  } else {
    throw ConfigError("unknown kernel family '" + fam + "'", "model.kernel.family");
  }
  if (k.contains("lengthscales")) c.lengthscales = plain_vec(k["lengthscales"], "model.kernel.lengthscales");
  if (k.contains("signal_variance")) c.signal_variance = k["signal_variance"].get<double>();

  const Json& lik = m.at("likelihood");
  check_known_keys(lik, {"family", "r_diag", "alpha", "beta", "observed_state_index"},
                   "model.likelihood");
  const std::string lfam = lik.value("family", "gaussian");
  if (lfam == "gaussian") {
    c.likelihood = LikelihoodFamily::GaussianDiag;
  } else if (lfam == "poisson") {
    c.likelihood = LikelihoodFamily::PoissonExp;
  } else {
    throw ConfigError("unknown likelihood family '" + lfam + "'", "model.likelihood.family");
  }
  if (lik.contains("r_diag")) c.r_diag = plain_vec(lik["r_diag"], "model.likelihood.r_diag");
  if (lik.contains("alpha")) c.alpha = lik["alpha"].get<double>();
  if (lik.contains("beta")) c.beta = lik["beta"].get<double>();
  c.observed_state_index = lik.value("observed_state_index", 1);

  if (m.contains("process_noise")) c.process_noise = plain_vec(m["process_noise"], "model.process_noise");
  if (m.contains("x0_prior")) {
    check_known_keys(m["x0_prior"], {"mean", "var"}, "model.x0_prior");
    if (m["x0_prior"].contains("mean")) c.x0_mean = plain_vec(m["x0_prior"]["mean"], "model.x0_prior.mean");
    if (m["x0_prior"].contains("var")) c.x0_var = plain_vec(m["x0_prior"]["var"], "model.x0_prior.var");
  }
  c.num_inducing = m.value("num_inducing", 15);
  if (c.num_inducing < 1) throw ConfigError("num_inducing must be >= 1", "model.num_inducing");
  if (m.contains("inducing_inputs")) {
    const Json& zi = m["inducing_inputs"];
    Mat z(static_cast<Index>(zi.size()), zi.empty() ? 0 : static_cast<Index>(zi[0].size()));
    for (Index r = 0; r < z.rows(); ++r) {
      const Vec row = plain_vec(zi[static_cast<std::size_t>(r)], "model.inducing_inputs");
      if (row.size() != z.cols()) {
        throw ConfigError("ragged inducing_inputs", "model.inducing_inputs");
      }
      z.row(r) = row.transpose();
    }
    c.inducing_inputs = z;
    c.num_inducing = z.rows();
  }

  const Json& t = j.at("training");
  check_known_keys(t,
                   {"mode", "segment_length", "segments_per_iter", "n_particles", "lag", "rho",
                    "lambda", "max_iters", "elbo_rel_tol", "elbo_window", "seed",
                    "learn_hyperparams", "learn_inducing", "reinit_inducing"},
                   "training");
  const std::string mode = t.value("mode", "batch");
  if (mode == "batch") {
    c.training.mode = TrainingMode::Batch;
  } else if (mode == "svi") {
    c.training.mode = TrainingMode::Svi;
  } else if (mode == "online") {
    c.training.mode = TrainingMode::Online;
  } else {
    throw ConfigError("training.mode must be batch, svi or online", "training.mode");
  }
  c.training.segment_length = t.value("segment_length", 100);
  c.training.segments_per_iter = t.value("segments_per_iter", 1);
  c.training.n_particles = t.value("n_particles", 1000);
  c.training.lag = t.value("lag", 10);
  auto sched = [&](const char* name, ScheduleSpec def) {
    if (!t.contains(name)) return def;
    const Json& s = t[name];
    check_known_keys(s, {"a", "b", "kappa"}, std::string("training.") + name);
    return ScheduleSpec{s.value("a", def.a), s.value("b", def.b), s.value("kappa", def.kappa)};
  };
  c.training.rho = sched("rho", ScheduleSpec{1.0, 1.0, 0.7});
  c.training.lambda = sched("lambda", ScheduleSpec{1e-2, 1.0, 0.51});
  c.training.max_iters = t.value("max_iters", 100);
  c.training.elbo_rel_tol = t.value("elbo_rel_tol", 1e-3);
  c.training.elbo_window = t.value("elbo_window", 5);
  c.training.master_seed = t.value("seed", 0ULL);
  c.training.learn_hyperparams = t.value("learn_hyperparams", true);
  c.training.learn_inducing = t.value("learn_inducing", true);
  c.training.reinit_inducing = t.value("reinit_inducing", true);

  const Json& sim = j.at("simulate");
  check_known_keys(sim, {"system", "T", "seeds"}, "simulate");
  c.simulate_system = sim.value("system", "prior");
  if (c.simulate_system != "prior" && c.simulate_system != "kink") {
    throw ConfigError("simulate.system must be 'prior' or 'kink'", "simulate.system");
  }
  c.simulate_T = sim.value("T", 200);
  if (sim.contains("seeds")) {
    c.simulate_seeds.clear();
    for (const auto& s : sim["seeds"]) c.simulate_seeds.push_back(s.get<std::uint64_t>());
  }

  const Json& p = j.at("predict");
  check_known_keys(p, {"grid_lo", "grid_hi", "grid_n", "rollout_horizon", "rollout_mode",
                       "rollout_x0", "rollout_seed"},
                   "predict");
  if (p.contains("grid_lo")) c.predict_grid_lo = plain_vec(p["grid_lo"], "predict.grid_lo");
  if (p.contains("grid_hi")) c.predict_grid_hi = plain_vec(p["grid_hi"], "predict.grid_hi");
  c.predict_grid_n = p.value("grid_n", 200);
  c.rollout_horizon = p.value("rollout_horizon", 0);
  const std::string rmode = p.value("rollout_mode", "mean_only");
  if (rmode == "mean_only") {
    c.rollout_mode = RolloutMode::MeanOnly;
  } else if (rmode == "noise_free") {
    c.rollout_mode = RolloutMode::NoiseFree;
  } else if (rmode == "sample_function_free") {
    c.rollout_mode = RolloutMode::SampleFunctionFree;
  } else {
    throw ConfigError("unknown rollout mode '" + rmode + "'", "predict.rollout_mode");
  }
  if (p.contains("rollout_x0")) c.rollout_x0 = plain_vec(p["rollout_x0"], "predict.rollout_x0");
  c.rollout_seed = p.value("rollout_seed", 0ULL);

  const Json& e = j.at("eval");
  check_known_keys(e, {"baseline_order", "max_rmse", "min_loglik"}, "eval");
  c.baseline_order = e.value("baseline_order", 1);
  if (e.contains("max_rmse")) c.eval_max_rmse = e["max_rmse"].get<double>();
  if (e.contains("min_loglik")) c.eval_min_loglik = e["min_loglik"].get<double>();

  const Json& o = j.at("online");
  check_known_keys(o, {"segment_length"}, "online");
  c.online_segment_length = o.value("segment_length", 100);
  if (c.online_segment_length < 1) {
    throw ConfigError("online.segment_length must be >= 1", "online.segment_length");
  }

  c.fingerprint = fnv1a_hex(j.dump());
  return c;
}

namespace {

void deep_merge(Json& base, const Json& overlay) {
  for (const auto& [key, value] : overlay.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object()) {
      deep_merge(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace

CliConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path, "config");
  Json overlay;
  try {
    in >> overlay;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what(), "config");
  }
  Json merged = default_config_json();
  deep_merge(merged, overlay);
  return parse_config(merged);
}

Json dump_config(const CliConfig& config) {
  Json j = default_config_json();
  j["training"]["mode"] = config.training.mode == TrainingMode::Batch  ? "batch"
                          : config.training.mode == TrainingMode::Svi ? "svi"
                                                                      : "online";
  j["training"]["seed"] = config.training.master_seed;
  j["model"]["latent_dim"] = config.latent_dim;
  return j;
}

GpssmModel init_model_from_data(const CliConfig& config, const Mat& observations) {
  const Index obs_dim = observations.cols();
  Index d = config.latent_dim;
  if (d == 0) d = config.structure == LatentStructure::SecondOrder ? 2 : obs_dim;

  GpssmModel model;
  model.structure = config.structure;
  model.dt = config.dt;
  model.likelihood.family = config.likelihood;

  double beta = config.beta.value_or(0.0);
  if (config.likelihood == LikelihoodFamily::PoissonExp && !config.beta.has_value() &&
      observations.rows() > 0) {
    beta = std::log(observations.col(0).mean() + 0.1);
  }

  // Map observations into state space to set scales.
  Mat mapped;
  if (config.likelihood == LikelihoodFamily::GaussianDiag) {
    mapped = observations;
  } else {
    const double alpha = config.alpha.value_or(1.0);
    mapped.resize(observations.rows(), 1);
    for (Index t = 0; t < observations.rows(); ++t) {
      mapped(t, 0) = (std::log(observations(t, 0) + 0.5) - beta) / alpha;
    }
  }

  Vec scale = Vec::Ones(d);
  Vec center = Vec::Zero(d);
  Vec diff_var = Vec::Constant(d, 1.0);
  if (mapped.rows() > 2) {
    for (Index c = 0; c < d; ++c) {
      const Index src = std::min(c, mapped.cols() - 1);
      const Vec col = mapped.col(src);
      const double mean = col.mean();
      const double var = (col.array() - mean).square().sum() / static_cast<double>(col.size() - 1);
      center[c] = mean;
      scale[c] = std::sqrt(std::max(var, 1e-6));
      Vec diffs = col.tail(col.size() - 1) - col.head(col.size() - 1);
      const double dmean = diffs.mean();
      diff_var[c] = std::max(
          (diffs.array() - dmean).square().sum() / static_cast<double>(diffs.size() - 1), 1e-6);
    }
  }

  const Index g = config.structure == LatentStructure::Free ? d : 1;
  KernelSpec kernel;
  kernel.family = config.kernel_family;
  kernel.lengthscales = config.lengthscales.value_or(Vec(scale));
  kernel.signal_variance = config.signal_variance.value_or(diff_var.mean());
  validate(kernel);
  model.kernels.assign(static_cast<std::size_t>(g), kernel);
  model.shared_kernel = true;

  model.process_noise =
      config.process_noise.value_or(Vec(0.1 * scale.array().square().matrix()));
  if (model.process_noise.size() != g) {
    if (config.process_noise.has_value()) {
      throw ConfigError("process_noise must have one entry per GP output dimension",
                        "model.process_noise");
    }
    model.process_noise = Vec::Constant(g, 0.1 * scale.array().square().mean());
  }

  if (config.likelihood == LikelihoodFamily::GaussianDiag) {
    Vec r = config.r_diag.value_or(Vec(scale.array().square().matrix()));
    if (r.size() != obs_dim) {
      throw ConfigError("r_diag must have one entry per observed dimension",
                        "model.likelihood.r_diag");
    }
    model.likelihood.r_diag = r;
  } else {
    model.likelihood.alpha = config.alpha.value_or(1.0);
    model.likelihood.beta = beta;
    model.likelihood.observed_state_index = config.observed_state_index;
  }

  model.x0_prior.mean = config.x0_mean.value_or(Vec(center));
  model.x0_prior.var = config.x0_var.value_or(Vec(scale.array().square().matrix()));
  if (model.x0_prior.mean.size() != d || model.x0_prior.var.size() != d) {
    throw ConfigError("x0_prior dimensions must match latent_dim", "model.x0_prior");
  }

  if (config.inducing_inputs.has_value()) {
    model.inducing_inputs = *config.inducing_inputs;
  } else {
    // First placement: spread over the mapped observation range; training
    // re-places them after its preliminary smoothing pass.
    const Index m_pts = config.num_inducing;
    model.inducing_inputs.resize(m_pts, d);
    if (d == 1) {
      const double lo = mapped.rows() > 0 ? mapped.col(0).minCoeff() : -2.0;
      const double hi = mapped.rows() > 0 ? mapped.col(0).maxCoeff() : 2.0;
      for (Index i = 0; i < m_pts; ++i) {
        model.inducing_inputs(i, 0) =
            lo + (hi - lo) * static_cast<double>(i) /
                     static_cast<double>(std::max<Index>(1, m_pts - 1));
      }
    } else {
      const Index cols = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(m_pts))));
      const Index rows = (m_pts + cols - 1) / cols;
      Index idx = 0;
      for (Index r = 0; r < rows && idx < m_pts; ++r) {
        for (Index cc = 0; cc < cols && idx < m_pts; ++cc, ++idx) {
          for (Index dim = 0; dim < d; ++dim) {
            const double frac = dim == 0 ? (static_cast<double>(cc) + 0.5) / static_cast<double>(cols)
                                         : (static_cast<double>(r) + 0.5) / static_cast<double>(rows);
            model.inducing_inputs(idx, dim) = center[dim] + (2.0 * frac - 1.0) * 2.0 * scale[dim];
          }
        }
      }
    }
  }

  validate(model);
  return model;
}

// --- archive -------------------------------------------------------------------

namespace {

Json model_to_json(const GpssmModel& model) {
  Json j;
  j["structure"] = model.structure == LatentStructure::Free ? "free" : "second_order";
  j["dt"] = hex_double(model.dt);
  j["shared_kernel"] = model.shared_kernel;
  j["kernels"] = Json::array();
  for (const auto& k : model.kernels) {
    Json kj;
    kj["family"] = k.family == KernelFamily::Matern32             ? "matern32"
                   : k.family == KernelFamily::Matern52           ? "matern52"
                                                                  : "squared_exponential";
    kj["lengthscales"] = vec_to_json(k.lengthscales);
    kj["signal_variance"] = hex_double(k.signal_variance);
    j["kernels"].push_back(std::move(kj));
  }
  j["process_noise"] = vec_to_json(model.process_noise);
  if (model.likelihood.family == LikelihoodFamily::GaussianDiag) {
    j["likelihood"] = {{"family", "gaussian"}, {"r_diag", vec_to_json(model.likelihood.r_diag)}};
  } else {
    j["likelihood"] = {{"family", "poisson"},
                       {"alpha", hex_double(model.likelihood.alpha)},
                       {"beta", hex_double(model.likelihood.beta)},
                       {"observed_state_index", model.likelihood.observed_state_index}};
  }
  j["x0_prior"] = {{"mean", vec_to_json(model.x0_prior.mean)},
                   {"var", vec_to_json(model.x0_prior.var)}};
  j["inducing_inputs"] = mat_to_json(model.inducing_inputs);
  return j;
}

GpssmModel model_from_json(const Json& j) {
  GpssmModel model;
  model.structure =
      j.at("structure") == "free" ? LatentStructure::Free : LatentStructure::SecondOrder;
  model.dt = parse_hex_double(j.at("dt"));
  model.shared_kernel = j.at("shared_kernel");
  for (const auto& kj : j.at("kernels")) {
    KernelSpec k;
    const std::string fam = kj.at("family");
    k.family = fam == "matern32"   ? KernelFamily::Matern32
               : fam == "matern52" ? KernelFamily::Matern52
                                   : KernelFamily::SquaredExponential;
    k.lengthscales = json_to_vec(kj.at("lengthscales"));
    k.signal_variance = parse_hex_double(kj.at("signal_variance"));
    model.kernels.push_back(std::move(k));
  }
  model.process_noise = json_to_vec(j.at("process_noise"));
  const Json& lik = j.at("likelihood");
  if (lik.at("family") == "gaussian") {
    model.likelihood.family = LikelihoodFamily::GaussianDiag;
    model.likelihood.r_diag = json_to_vec(lik.at("r_diag"));
  } else {
    model.likelihood.family = LikelihoodFamily::PoissonExp;
    model.likelihood.alpha = parse_hex_double(lik.at("alpha"));
    model.likelihood.beta = parse_hex_double(lik.at("beta"));
    model.likelihood.observed_state_index = lik.at("observed_state_index");
  }
  model.x0_prior.mean = json_to_vec(j.at("x0_prior").at("mean"));
  model.x0_prior.var = json_to_vec(j.at("x0_prior").at("var"));
  model.inducing_inputs = json_to_mat(j.at("inducing_inputs"));
  return model;
}

}  // namespace

void save_archive(const std::string& path, const ModelArchive& archive) {
  Json j;
  j["format_version"] = archive.format_version;
  j["model"] = model_to_json(archive.model);
  j["posterior"] = Json::array();
  for (const auto& d : archive.posterior.dims) {
    Json dj;
    dj["eta1"] = vec_to_json(d.eta1);
    dj["eta2"] = mat_to_json(d.eta2);
    dj["mu"] = vec_to_json(d.mu);
    dj["sigma"] = mat_to_json(d.sigma);
    j["posterior"].push_back(std::move(dj));
  }
  Json prov;
  prov["config_fingerprint"] = archive.provenance.config_fingerprint;
  prov["data_hash"] = archive.provenance.data_hash;
  prov["seeds"] = archive.provenance.seeds;
  prov["iteration"] = archive.provenance.iteration;
  Json trace = Json::array();
  for (double v : archive.provenance.elbo_trace_tail) trace.push_back(hex_double(v));
  prov["elbo_trace_tail"] = std::move(trace);
  if (archive.provenance.filter_carry.has_value()) {
    prov["filter_carry"] = {{"mean", vec_to_json(archive.provenance.filter_carry->mean)},
                            {"var", vec_to_json(archive.provenance.filter_carry->var)}};
  } else {
    prov["filter_carry"] = nullptr;
  }
  j["provenance"] = std::move(prov);

  std::ofstream out(path);
  if (!out) throw DataError("cannot write archive " + path);
  out << j.dump(2) << "\n";
}

ModelArchive load_archive(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open archive " + path);
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError(std::string("archive parse error: ") + e.what());
  }
  ModelArchive archive;
  const int version = j.at("format_version");
  if (version != archive.format_version) {
    throw DataError("archive format version mismatch: found " + std::to_string(version));
  }
  archive.model = model_from_json(j.at("model"));
  for (const auto& dj : j.at("posterior")) {
    NatGaussian d;
    d.eta1 = json_to_vec(dj.at("eta1"));
    d.eta2 = json_to_mat(dj.at("eta2"));
    d.mu = json_to_vec(dj.at("mu"));
    d.sigma = json_to_mat(dj.at("sigma"));
    archive.posterior.dims.push_back(std::move(d));
  }
  const Json& prov = j.at("provenance");
  archive.provenance.config_fingerprint = prov.at("config_fingerprint");
  archive.provenance.data_hash = prov.at("data_hash");
  for (const auto& s : prov.at("seeds")) archive.provenance.seeds.push_back(s.get<std::uint64_t>());
  archive.provenance.iteration = prov.at("iteration");
  for (const auto& v : prov.at("elbo_trace_tail")) {
    archive.provenance.elbo_trace_tail.push_back(parse_hex_double(v.get<std::string>()));
  }
  if (!prov.at("filter_carry").is_null()) {
    archive.provenance.filter_carry =
        DiagGaussian{json_to_vec(prov.at("filter_carry").at("mean")),
                     json_to_vec(prov.at("filter_carry").at("var"))};
  }
  return archive;
}

void save_archive_atomic(const std::string& path, const ModelArchive& archive) {
  const std::string tmp = path + ".tmp";
  save_archive(tmp, archive);
  std::filesystem::rename(tmp, path);
}

}  // namespace gpssm
