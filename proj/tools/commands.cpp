#include "commands.hpp"

#include "ddl/checkpoint.hpp"
#include "ddl/config.hpp"
#include "ddl/data.hpp"
#include "ddl/delta_op.hpp"
#include "ddl/trainer.hpp"

#include "CLI11.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

namespace ddl::cli {

namespace {

std::string num(double x) {
  if (x == 0.0) x = 0.0;  // drop the sign of -0
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

Vector<double> read_direction(const std::string& path, Index d) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open k-file " + path);
  std::vector<double> values;
  std::string token;
  while (in >> token) {
    for (char& c : token)
      if (c == ',') c = ' ';
    std::istringstream parts(token);
    double v;
    while (parts >> v) values.push_back(v);
    if (!parts.eof()) throw ConfigError("k-file " + path + ": not a number: " + token);
  }
  if (static_cast<Index>(values.size()) != d)
    throw ConfigError("k-file " + path + " holds " + std::to_string(values.size()) + " values, expected d = " +
                      std::to_string(d));
  return Eigen::Map<Vector<double>>(values.data(), d);
}

Vector<double> gaussian_direction(Index d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Vector<double> k(d);
  for (Index i = 0; i < d; ++i) k[i] = n(rng);
  return k;
}

std::string orientation(double lifted_det) {
  if (lifted_det > 0) return "preserved";
  if (lifted_det < 0) return "flipped";
  return "collapsed";
}

}  // namespace

int cmd_check(const CheckOptions& options, std::ostream& out, const verify::DeltaUpdateFn& kernel) {
  verify::Options o;
  o.fast = options.fast;
  o.seed = options.seed;
  if (kernel) o.delta_update = kernel;
  bool ok = true;
  for (const auto& r : verify::run_all(o)) {
    out << r.json_line() << '\n';
    ok = ok && r.pass;
  }
  return ok ? kOk : kCheckFailed;
}

int cmd_spectrum(const SpectrumOptions& o, std::ostream& out, std::ostream& err) {
  try {
    if (!(o.beta >= 0.0 && o.beta <= 2.0)) throw ConfigError("--beta must lie in [0, 2]");
    if (o.d < 1 || o.d_v < 1) throw ConfigError("--d and --dv must be positive");
    const Vector<double> raw = o.k_file.empty() ? gaussian_direction(o.d, o.seed) : read_direction(o.k_file, o.d);
    const DeltaOperatorView<double> op{normalize_direction<double>(raw, 0.0), o.beta};
    const auto sp = spectrum(op);
    const auto det = determinant(op, o.d_v);
    const Vector<double> sv = singular_values(op);
    const std::string label = to_string(regime(o.beta));

    std::vector<std::pair<double, Index>> eig;
    if (sp.direction_eigenvalue == sp.unit_eigenvalue) {
      eig.push_back({1.0, o.d});
    } else {
      if (sp.unit_multiplicity > 0) eig.push_back({sp.unit_eigenvalue, sp.unit_multiplicity});
      eig.push_back({sp.direction_eigenvalue, 1});
    }

    out << "beta " << num(o.beta) << "  d " << o.d << "  d_v " << o.d_v << "\n";
    out << "regime " << label << "\n";
    out << "eigenvalue  multiplicity\n";
    for (const auto& [value, mult] : eig) out << "  " << num(value) << "  x" << mult << "\n";
    out << "spatial_det " << num(det.spatial) << "\n";
    out << "lifted_det " << num(det.lifted) << "\n";
    out << "singular_values";
    for (Index i = 0; i < sv.size(); ++i) out << ' ' << num(sv[i]);
    out << "\n";
    out << "orientation " << orientation(det.lifted);
    if (det.lifted < 0) out << " (d_v odd, beta > 1)";
    out << "\n";

    if (!o.csv.empty()) {
      std::ofstream csv(o.csv);
      if (!csv) throw std::runtime_error("cannot write " + o.csv);
      csv << "beta,d,d_v,regime,eigenvalue,multiplicity,spatial_det,lifted_det,sigma_min,sigma_max,orientation\n";
      for (const auto& [value, mult] : eig)
        csv << num(o.beta) << ',' << o.d << ',' << o.d_v << ',' << label << ',' << num(value) << ',' << mult << ','
            << num(det.spatial) << ',' << num(det.lifted) << ',' << num(sv.minCoeff()) << ',' << num(sv.maxCoeff())
            << ',' << orientation(det.lifted) << '\n';
    }
    return kOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ZeroDirectionError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

int cmd_train(const TrainFlags& f, std::ostream& out, std::ostream& err) {
  try {
    RunConfig config = f.config.empty() ? RunConfig{} : load_run_config(f.config);
    if (f.residual_mode) config.model.residual_mode = parse_residual_mode(*f.residual_mode);
    if (f.variant) config.model.variant = parse_variant(*f.variant);
    if (f.map_mode) config.model.map_mode = parse_map_mode(*f.map_mode);
    if (f.d_v) config.model.d_v = *f.d_v;
    if (f.state_kernel) config.model.state_kernel = *f.state_kernel;
    if (f.embed_kernel) config.model.embed_kernel = *f.embed_kernel;
    if (f.steps) config.train.steps = *f.steps;
    if (f.seed) config.train.seed = *f.seed;
    if (f.threads) config.train.threads = *f.threads;
    if (f.data) config.train.data = *f.data;
    config.model.validate();
    config.train.validate();

    TrainOptions options;
    options.out_dir = f.out;
    options.stop_after = f.stop_after.value_or(-1);
    options.log = f.quiet ? nullptr : &out;
    configure_allocator();
    const TrainSummary s = run_training(config, options, f.resume);
    out << "final step " << s.steps << "  train_loss " << num(s.final_train_loss) << "  val_loss "
        << num(s.final_val_loss) << "  perplexity " << num(s.perplexity) << "\n";
    out << "metrics " << s.metrics_path << "\n";
    out << "checkpoint " << s.checkpoint_path << "\n";
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const NonFiniteLossError& e) {
    err << "aborted: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

int cmd_eval(const std::string& checkpoint, const std::string& data, std::ostream& out, std::ostream& err) {
  try {
    configure_allocator();
    const EvalResult r = evaluate_checkpoint(checkpoint, data);
    out << "val_loss " << num(r.loss) << "\n";
    out << "perplexity " << num(r.perplexity) << "\n";
    for (std::size_t l = 0; l < r.beta.size(); ++l) {
      const BetaSummary& b = r.beta[l];
      out << "layer " << l;
      if (b.count == 0) {
        out << "  no gate\n";
        continue;
      }
      out << "  mean_beta " << num(b.mean) << "  min " << num(b.min) << "  max " << num(b.max) << "  hist";
      for (auto c : b.histogram) out << ' ' << c;
      out << "\n";
    }
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const verify::DeltaUpdateFn& kernel) {
  CLI::App app{"Deep delta residual networks: verification, spectra, training and evaluation"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  if (const char* env = std::getenv("DDL_SEED")) {
    try {
      seed = std::stoull(env);
    } catch (const std::exception&) {
      err << "error: DDL_SEED is not an unsigned integer: " << env << "\n";
      return kUsage;
    }
  }

  CheckOptions check;
  auto* c = app.add_subcommand("check", "Run the property and gradient suite; prints JSON lines");
  c->add_flag("--fast", check.fast, "Reduced seeds and sample counts");
  c->add_option("--seed", seed, "Base seed (falls back to DDL_SEED)");

  SpectrumOptions sp;
  auto* s = app.add_subcommand("spectrum", "Spectral summary of I - beta k k^T");
  s->add_option("--beta", sp.beta, "Gate value in [0, 2]")->required();
  s->add_option("--d", sp.d, "Spatial dimension")->required()->check(CLI::PositiveNumber);
  s->add_option("--dv", sp.d_v, "Value dimension (lifted determinant)")->check(CLI::PositiveNumber);
  s->add_option("--k-file", sp.k_file, "Direction k~ as d numbers (random Gaussian when absent)")
      ->check(CLI::ExistingFile);
  s->add_option("--csv", sp.csv, "Also write the table as CSV");
  s->add_option("--seed", seed, "Seed for the random direction");

  TrainFlags train;
  auto* t = app.add_subcommand("train", "Train a byte-level model and write metrics.csv and checkpoints");
  t->add_option("--config", train.config, "JSON run config")->check(CLI::ExistingFile);
  t->add_option("--residual-mode", train.residual_mode, "baseline | ddl");
  t->add_option("--dv", train.d_v, "ddl.d_v: value channels of the state");
  t->add_option("--variant", train.variant, "baseline | ec | cc | cc-ec");
  t->add_option("--map-mode", train.map_mode, "kmap | vmap");
  t->add_option("--state-kernel", train.state_kernel, "ddl.state_shortconv_kernel_size");
  t->add_option("--embed-kernel", train.embed_kernel, "ddl.input_embed_shortconv_kernel_size");
  t->add_option("--steps", train.steps, "Total optimizer steps");
  t->add_option("--stop-after", train.stop_after, "Checkpoint and stop after this many steps");
  t->add_option("--resume", train.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_option("--data", train.data, "Training corpus");
  t->add_option("--seed", seed, "Run seed (falls back to DDL_SEED)");
  t->add_option("--threads", train.threads, "Worker threads");
  t->add_option("--out", train.out, "Output directory");
  t->add_flag("--quiet", train.quiet, "No per-interval progress lines");

  std::string ckpt, data;
  auto* e = app.add_subcommand("eval", "Validation loss, perplexity and per-layer beta summary of a checkpoint");
  e->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  e->add_option("--data", data, "Corpus (defaults to the one recorded in the checkpoint)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kOk : kUsage;
  }

  if (*c) {
    check.seed = seed.value_or(0);
    return cmd_check(check, out, kernel);
  }
  if (*s) {
    sp.seed = seed.value_or(0);
    return cmd_spectrum(sp, out, err);
  }
  if (*t) {
    train.seed = seed;
    return cmd_train(train, out, err);
  }
  return cmd_eval(ckpt, data, out, err);
}

}  // namespace ddl::cli
