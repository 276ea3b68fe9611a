#include "ddl/verify.hpp"

#include "ddl/backbone.hpp"
#include "ddl/delta_block.hpp"
#include "ddl/ops.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <random>

namespace ddl::verify {

std::string CheckReport::json_line() const {
  nlohmann::json j = {{"check", check}, {"seed", seed}, {"params", params}, {"max_dev", max_dev}, {"pass", pass}};
  return j.dump();
}

namespace {

using Vec = Vector<double>;
using Mat = Matrix<double>;

std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

Mat gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

UnitDirection<double> random_direction(Index d, std::mt19937_64& rng) {
  Vec k;
  do {
    k = gaussian(d, 1, rng);
  } while (k.norm() == 0.0);
  return normalize_direction<double>(k, 0.0);
}

double uniform(double lo, double hi, std::mt19937_64& rng) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Index uniform_index(Index lo, Index hi, std::mt19937_64& rng) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

double max_abs(const Mat& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

/// Worst deviation and its seed across repeated trials.
struct Worst {
  double dev = 0;
  std::uint64_t seed = 0;
  bool any = false;

  void update(double value, std::uint64_t s) {
    if (!any || value > dev || std::isnan(value)) {
      dev = value;
      seed = s;
      any = true;
    }
  }
};

CheckReport report(const std::string& check, std::uint64_t seed, nlohmann::json params, double dev, double tol) {
  return {check, seed, std::move(params), dev, std::isfinite(dev) && dev < tol};
}

}  // namespace

std::vector<CheckReport> check_spectrum_suite(const std::vector<std::uint64_t>& seeds, const std::vector<Index>& dims,
                                              const std::vector<double>& betas) {
  std::vector<CheckReport> out;
  const std::string name = "check_spectrum_suite";
  for (Index d : dims) {
    for (std::size_t bi = 0; bi < betas.size(); ++bi) {
      const double beta = betas[bi];
      Worst action, det, lifted, eig, svd, ortho, involution, involution_apply, idempotence;
      for (std::uint64_t seed : seeds) {
        auto rng = make_rng({seed, static_cast<std::uint64_t>(d), bi});
        const DeltaOperatorView<double> op{random_direction(d, rng), beta};
        const Mat a = dense_materialize(op);
        const Mat id = Mat::Identity(d, d);

        const auto res = spectrum_residuals(op);
        action.update(std::max(res.direction, res.complement), seed);

        det.update(std::abs(a.determinant() - determinant(op, 1).spatial), seed);
        if (d <= 16) {
          double worst = 0;
          for (Index dv = 1; dv <= 3; ++dv) {
            Mat lift = Mat::Zero(d * dv, d * dv);
            for (Index j = 0; j < dv; ++j) lift.block(j * d, j * d, d, d) = a;
            worst = std::max(worst, std::abs(lift.determinant() - determinant(op, dv).lifted));
          }
          lifted.update(worst, seed);
        }

        Eigen::SelfAdjointEigenSolver<Mat> solver(a, Eigen::EigenvaluesOnly);
        const std::vector<double> closed = spectrum(op).eigenvalues();
        double eig_dev = 0;
        for (Index i = 0; i < d; ++i)
          eig_dev = std::max(eig_dev, std::abs(solver.eigenvalues()[i] - closed[static_cast<std::size_t>(i)]));
        eig.update(eig_dev, seed);

        const Eigen::BDCSVD<Mat> sv(a);
        svd.update((sv.singularValues() - singular_values(op)).cwiseAbs().maxCoeff(), seed);

        // A^T A = I - (1 - (1 - beta)^2) k k^T: orthogonal exactly when beta is 0 or 2.
        const double defect = 1.0 - (1.0 - beta) * (1.0 - beta);
        const Vec& k = op.k.vector();
        ortho.update(max_abs(a.transpose() * a - id + defect * k * k.transpose()), seed);

        if (beta == 2.0) {
          involution.update(max_abs(a * a - id), seed);
          const Mat x = gaussian(d, 3, rng);
          involution_apply.update(max_abs(apply_operator(op, apply_operator(op, x)) - x), seed);
        }
        if (beta == 1.0) idempotence.update(max_abs(a * a - a), seed);
      }
      auto emit = [&](const char* property, const Worst& w, double tol, nlohmann::json extra = nlohmann::json::object()) {
        if (!w.any) return;
        extra["property"] = property;
        extra["d"] = d;
        extra["beta"] = beta;
        extra["seeds"] = seeds.size();
        out.push_back(report(name, w.seed, extra, w.dev, tol));
      };
      emit("eigen_action", action, kSpectralTol);
      emit("determinant", det, kSpectralTol);
      emit("lifted_determinant", lifted, kSpectralTol, {{"d_v", {1, 2, 3}}});
      emit("eigenvalues", eig, kEigenTol);
      emit("singular_values", svd, kEigenTol);
      emit("orthogonality", ortho, kSpectralTol,
           {{"gram_defect", 1.0 - (1.0 - beta) * (1.0 - beta)}, {"orthogonal", beta == 0.0 || beta == 2.0}});
      emit("involution", involution, kSpectralTol);
      emit("involution_apply", involution_apply, kEigenTol);
      emit("idempotence", idempotence, kSpectralTol);
    }
  }
  return out;
}

std::vector<CheckReport> check_fused_dense(std::uint64_t seed, int instances, Index max_d, Index max_dv) {
  auto rng = make_rng({seed, 0xfd});
  Worst w;
  for (int i = 0; i < instances; ++i) {
    const Index d = uniform_index(1, max_d, rng);
    const Index dv = uniform_index(1, max_dv, rng);
    const DeltaOperatorView<double> op{random_direction(d, rng), uniform(0.0, 2.0, rng)};
    const Mat x = gaussian(d, dv, rng);
    w.update(max_abs(apply_operator(op, x) - dense_materialize(op) * x), static_cast<std::uint64_t>(i));
  }
  return {report("check_fused_dense", seed,
                 {{"instances", instances}, {"max_d", max_d}, {"max_d_v", max_dv}, {"worst_instance", w.seed}}, w.dev,
                 kAlgebraicTol)};
}

std::vector<CheckReport> check_projected_dynamics(std::uint64_t seed, int trials, const DeltaUpdateFn& kernel) {
  auto rng = make_rng({seed, 0x7d});
  Worst random_case, overwrite, reflection;
  for (int i = 0; i < trials; ++i) {
    const Index d = uniform_index(1, 64, rng);
    const Index dv = uniform_index(1, 8, rng);
    const auto k = random_direction(d, rng);
    const Mat x = gaussian(d, dv, rng);
    const Vec v = gaussian(dv, 1, rng);
    const Vec& kv = k.vector();
    auto deviation = [&](double beta) {
      const Mat next = kernel(x, k, beta, v);
      const Mat expected = (1.0 - beta) * (kv.transpose() * x) + beta * v.transpose();
      return max_abs(kv.transpose() * next - expected);
    };
    random_case.update(deviation(uniform(0.0, 2.0, rng)), static_cast<std::uint64_t>(i));
    {
      const Mat next = kernel(x, k, 1.0, v);
      overwrite.update(max_abs(kv.transpose() * next - v.transpose()), static_cast<std::uint64_t>(i));
    }
    reflection.update(deviation(2.0), static_cast<std::uint64_t>(i));
  }
  const std::string name = "check_projected_dynamics";
  return {report(name, seed, {{"case", "random_beta"}, {"trials", trials}, {"worst_trial", random_case.seed}},
                 random_case.dev, kAlgebraicTol),
          report(name, seed, {{"case", "overwrite_beta_1"}, {"trials", trials}, {"worst_trial", overwrite.seed}},
                 overwrite.dev, kAlgebraicTol),
          report(name, seed, {{"case", "reflection_beta_2"}, {"trials", trials}, {"worst_trial", reflection.seed}},
                 reflection.dev, kAlgebraicTol)};
}

std::vector<CheckReport> check_deltanet_isomorphism(std::uint64_t seed, int rollouts, int steps,
                                                    const DeltaUpdateFn& kernel) {
  auto rng = make_rng({seed, 0xde});
  Worst left, transposed;
  for (int r = 0; r < rollouts; ++r) {
    const Index d = uniform_index(2, 8, rng);
    const Index dv = uniform_index(1, 4, rng);
    Mat x = gaussian(d, dv, rng);      // depth iteration
    Mat s = x;                         // S_t, explicit operator
    Mat m = x.transpose();             // M_t = S_t^T
    double dev_left = 0, dev_t = 0;
    for (int t = 0; t < steps; ++t) {
      const auto k = random_direction(d, rng);
      const double beta = uniform(0.0, 2.0, rng);
      const Vec v = gaussian(dv, 1, rng);
      const Vec& kv = k.vector();
      x = kernel(x, k, beta, v);
      s = (Mat::Identity(d, d) - beta * kv * kv.transpose()) * s + beta * kv * v.transpose();
      m = m + beta * (v - m * kv) * kv.transpose();
      dev_left = std::max(dev_left, max_abs(x - s));
      dev_t = std::max(dev_t, max_abs(s - m.transpose()));
    }
    left.update(dev_left, static_cast<std::uint64_t>(r));
    transposed.update(dev_t, static_cast<std::uint64_t>(r));
  }
  const std::string name = "check_deltanet_isomorphism";
  return {report(name, seed, {{"case", "depth_vs_recurrence"}, {"rollouts", rollouts}, {"steps", steps},
                               {"worst_rollout", left.seed}},
                 left.dev, kAlgebraicTol),
          report(name, seed, {{"case", "transposed_form"}, {"rollouts", rollouts}, {"steps", steps},
                               {"worst_rollout", transposed.seed}},
                 transposed.dev, kAlgebraicTol)};
}

std::vector<CheckReport> check_diagonal_mixing(std::uint64_t seed, int trials) {
  auto rng = make_rng({seed, 0xd1});
  Worst w;
  for (int i = 0; i < trials; ++i) {
    const Index d = uniform_index(1, 16, rng);
    const Vec s = gaussian(d, 1, rng);
    const auto k = random_direction(d, rng);
    const double beta = uniform(0.0, 2.0, rng);
    const Mat fused = apply_operator(DeltaOperatorView<double>{k, beta}, Mat(s.asDiagonal()));
    w.update(max_abs(diagonal_case(s, k, beta) - fused), static_cast<std::uint64_t>(i));
  }
  return {report("check_diagonal_mixing", seed, {{"trials", trials}, {"worst_trial", w.seed}}, w.dev, kAlgebraicTol)};
}

namespace {

constexpr double kFiniteStep = 1e-3;
constexpr double kGradFloor = 1e-6;

ModelConfig gradient_model(const GradientCase& c) {
  ModelConfig m;
  m.d = 8;
  m.n_layers = 2;
  m.n_heads = 2;
  m.head_dim = 4;
  m.vocab_size = 16;
  m.seq_len = 4;
  m.residual_mode = ResidualMode::ddl;
  m.d_v = c.d_v;
  m.variant = c.variant;
  m.map_mode = c.map_mode;
  m.state_kernel = compresses_channels(c.variant) ? c.d_v : 3;
  m.embed_kernel = 2;
  return m;
}

std::vector<Index> sample_coords(Index n, int max_coords) {
  std::vector<Index> idx;
  if (max_coords <= 0 || n <= max_coords) {
    for (Index i = 0; i < n; ++i) idx.push_back(i);
    return idx;
  }
  for (int j = 0; j < max_coords; ++j) idx.push_back((static_cast<Index>(j) * (n - 1)) / (max_coords - 1));
  return idx;
}

struct GroupError {
  double rel = 0;
  double analytic_norm = 0;
  bool finite = true;
};

/// Relative error of analytic vs central-difference gradients for one tensor.
GroupError compare_group(Tensor<double>& param, const Eigen::ArrayXd& analytic, const std::function<double()>& loss,
                         int max_coords) {
  double diff = 0, na = 0, nn = 0;
  GroupError e;
  for (Index i : sample_coords(param.size(), max_coords)) {
    double& p = param.mutable_data()[i];
    const double saved = p;
    auto at = [&](double offset) {
      p = saved + offset;
      return loss();
    };
    // Five-point central stencil, O(h^4).
    const double h = kFiniteStep;
    const double numeric = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
    p = saved;
    const double a = analytic[i];
    if (!std::isfinite(a) || !std::isfinite(numeric)) e.finite = false;
    diff += (a - numeric) * (a - numeric);
    na += a * a;
    nn += numeric * numeric;
  }
  e.analytic_norm = std::sqrt(na);
  e.rel = std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), kGradFloor);
  if (!e.finite) e.rel = std::numeric_limits<double>::infinity();
  return e;
}

struct ModelProblem {
  Model<double> model;
  std::vector<std::int32_t> tokens, targets;
  Index batch = 2, steps = 4;

  ModelProblem(const ModelConfig& cfg, std::uint64_t seed) : model(cfg, seed) {
    auto rng = make_rng({seed, 0x6d});
    std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
    for (Index i = 0; i < batch * steps; ++i) {
      tokens.push_back(tok(rng));
      targets.push_back(tok(rng));
    }
  }

  double loss() const { return model.loss(tokens, targets, batch, steps).item(); }

  ParameterList<double> analytic() {
    auto params = model.parameters();
    for (auto& p : params) p.tensor.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    backward(model.loss(tokens, targets, batch, steps));
    return params;
  }
};

nlohmann::json case_params(const GradientCase& c) {
  return {{"d", 8}, {"T", 4}, {"layers", 2}, {"d_v", c.d_v}, {"variant", to_string(c.variant)},
          {"map_mode", to_string(c.map_mode)}};
}

}  // namespace

std::vector<GradientCase> default_gradient_cases() {
  std::vector<GradientCase> cases;
  for (Index dv : {Index{1}, Index{4}})
    for (Variant v : {Variant::baseline, Variant::ec, Variant::cc, Variant::cc_ec})
      for (MapMode m : {MapMode::kmap, MapMode::vmap}) cases.push_back({dv, v, m});
  return cases;
}

std::vector<CheckReport> check_gradients(std::uint64_t seed, const std::vector<GradientCase>& cases, int max_coords) {
  std::vector<CheckReport> out;
  for (const auto& c : cases) {
    ModelProblem problem(gradient_model(c), seed);
    auto params = problem.analytic();
    double worst = 0;
    std::string worst_name;
    std::vector<std::string> failed;
    for (auto& p : params) {
      const Eigen::ArrayXd g = p.tensor.grad();
      const GroupError e = compare_group(p.tensor, g, [&] { return problem.loss(); }, max_coords);
      if (!(e.rel < kGradientTol)) failed.push_back(p.name);
      if (!(e.rel <= worst)) {
        worst = e.rel;
        worst_name = p.name;
      }
    }
    nlohmann::json params_json = case_params(c);
    params_json["groups"] = params.size();
    params_json["worst_group"] = worst_name;
    params_json["failed"] = failed;
    params_json["coords_per_group"] = max_coords > 0 ? nlohmann::json(max_coords) : nlohmann::json("all");
    out.push_back(report("check_gradients", seed, params_json, worst, kGradientTol));
  }
  return out;
}

std::vector<CheckReport> check_gradient_edge_cases(std::uint64_t seed) {
  std::vector<CheckReport> out;
  for (double logit : {10.0, -10.0}) {
    const GradientCase c{1, Variant::baseline, MapMode::kmap};
    ModelProblem problem(gradient_model(c), seed);
    for (auto& p : problem.model.parameters())
      if (p.name.ends_with("gate.bias")) p.tensor.mutable_data().setConstant(logit);
    auto params = problem.analytic();
    double worst = 0, largest = 0;
    for (auto& p : params) {
      if (!p.name.ends_with("gate.bias")) continue;
      const Eigen::ArrayXd g = p.tensor.grad();
      const GroupError e = compare_group(p.tensor, g, [&] { return problem.loss(); }, 0);
      worst = std::max(worst, e.rel);
      largest = std::max(largest, g.abs().maxCoeff());
    }
    nlohmann::json params_json = case_params(c);
    params_json["case"] = logit > 0 ? "gate_logit_+10" : "gate_logit_-10";
    params_json["max_abs_grad"] = largest;
    CheckReport r = report("check_gradients", seed, params_json, worst, kGradientTol);
    r.pass = r.pass && largest < 1e-3;
    out.push_back(r);
  }

  // Direction branch scaled so that |k~| sits near eps_k.
  {
    auto rng = make_rng({seed, 0x71});
    const Index d = 8;
    BlockConfig bc;
    bc.d = d;
    bc.eps_k = 1e-6;
    std::mt19937_64 init_rng(seed);
    DeltaBlock<double> block = DeltaBlock<double>::init(bc, init_rng);
    Tensor<double> w = Tensor<double>::parameter({d, d}, Eigen::Map<Eigen::ArrayXd>(gaussian(d, d, rng).data(), d * d));
    Tensor<double> x = Tensor<double>::parameter({2, 3, d}, Eigen::Map<Eigen::ArrayXd>(gaussian(6 * d, 1, rng).data(), 6 * d));
    const Eigen::ArrayXd probe = Eigen::Map<Eigen::ArrayXd>(gaussian(6 * d, 1, rng).data(), 6 * d);
    const Tensor<double> probe_t({2, 3, d}, probe);
    const Sublayer<double> tiny = [&w](const Tensor<double>& h) { return matmul(h, w) * 1e-9; };
    auto loss_tensor = [&] { return sum(block.forward(x, tiny, nullptr) * probe_t); };
    auto loss = [&] { return loss_tensor().item(); };

    ParameterList<double> params;
    block.collect(params, "block.");
    params.push_back({"w", w, true});
    params.push_back({"x", x, true});
    for (auto& p : params) p.tensor.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      backward(loss_tensor());
    }
    double worst = 0;
    bool finite = true;
    for (auto& p : params) {
      const Eigen::ArrayXd g = p.tensor.grad();
      finite = finite && g.allFinite();
      worst = std::max(worst, compare_group(p.tensor, g, loss, 0).rel);
    }
    CheckReport r = report("check_gradients", seed, {{"case", "tiny_direction"}, {"d", d}, {"eps_k", 1e-6}, {"scale", 1e-9}},
                           worst, kGradientTol);
    r.pass = r.pass && finite;
    out.push_back(r);
  }
  return out;
}

std::vector<CheckReport> run_all(const Options& o) {
  std::vector<CheckReport> out;
  auto append = [&out](std::vector<CheckReport> more) {
    out.insert(out.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
  };
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < (o.fast ? 5u : 50u); ++i) seeds.push_back(o.seed + i);
  append(check_spectrum_suite(seeds, {2, 4, 16, 64}, {0.0, 0.25, 0.5, 1.0, 1.5, 2.0 - 1e-9, 2.0}));
  append(check_fused_dense(o.seed, o.fast ? 100 : 1000));
  append(check_projected_dynamics(o.seed, o.fast ? 100 : 1000, o.delta_update));
  append(check_deltanet_isomorphism(o.seed, o.fast ? 10 : 100, 10, o.delta_update));
  append(check_diagonal_mixing(o.seed, o.fast ? 20 : 100));
  append(check_gradients(o.seed, default_gradient_cases(), o.fast ? 4 : 0));
  append(check_gradient_edge_cases(o.seed));
  return out;
}

}  // namespace ddl::verify
