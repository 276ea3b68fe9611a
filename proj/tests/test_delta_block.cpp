#include "doctest.h"
#include "support/oracles.hpp"

#include "ddl/delta_block.hpp"
#include "ddl/delta_op.hpp"
#include "ddl/ops.hpp"

#include <cmath>
#include <random>
#include <type_traits>

using namespace ddl;
using oracle::Array;
using oracle::Mat;
using oracle::Vec;
using T = Tensor<double>;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

BetaGate<double> zero_gate(Index d, double beta_init) {
  std::mt19937_64 rng(0);
  return BetaGate<double>::init(d, GateMode::single_linear, 0, beta_init, rng);
}

BetaGate<double> random_gate(Index d, std::mt19937_64& rng, double scale = 0.3) {
  BetaGate<double> g = zero_gate(d, 1.0);
  g.weight = oracle::random_parameter({d, 1}, rng, scale);
  g.bias = oracle::random_parameter({1}, rng, scale);
  return g;
}

/// ctx = x / sqrt(mean(x^2) + eps) * scale
Vec context(const Vec& x, const Vec& scale, double eps) {
  return (x / std::sqrt(x.squaredNorm() / static_cast<double>(x.size()) + eps)).cwiseProduct(scale);
}

double gate_oracle(const Vec& ctx, const BetaGate<double>& g) {
  return 2.0 * sigmoid(ctx.dot(g.weight.data().matrix()) + g.bias.data()[0]);
}

Vec to_vec(const T& t) { return t.data().matrix(); }

}  // namespace

TEST_CASE("gate examples") {
  const Index d = 6;
  std::mt19937_64 rng(1);
  const T ctx = oracle::random_tensor({3, d}, rng);

  BetaGate<double> g = zero_gate(d, 1.0);
  CHECK(g.bias.data()[0] == 0.0);
  CHECK((gate_beta(ctx, g).data() == 1.0).all());

  BetaGate<double> half = zero_gate(d, 0.5);
  CHECK(half.bias.data()[0] == doctest::Approx(std::log(0.25 / 0.75)).epsilon(1e-15));
  CHECK((gate_beta(ctx, half).data() - 0.5).abs().maxCoeff() < 1e-15);

  g.bias.mutable_data()[0] = 20.0;
  const double high = gate_beta(ctx, g).data()[0];
  CHECK(high > 2.0 - 1e-8);
  CHECK(high < 2.0);

  CHECK(gate_bias_for(0.0) == doctest::Approx(std::log(1e-8 / (1 - 1e-8))));
  CHECK(gate_bias_for(2.0) == doctest::Approx(std::log((1 - 1e-8) / 1e-8)));
}

TEST_CASE("gate stays in (0, 2) over random contexts") {
  std::mt19937_64 rng(2);
  const Index d = 16;
  BetaGate<double> g = random_gate(d, rng, 1.0);
  const T ctx = oracle::random_tensor({10000, d}, rng);
  const Array beta = gate_beta(ctx, g).data();
  CHECK(beta.minCoeff() > 0.0);
  CHECK(beta.maxCoeff() < 2.0);
}

TEST_CASE("gate logits are double at float precision") {
  std::mt19937_64 rng(3);
  auto g = BetaGate<float>::init(4, GateMode::single_linear, 0, 0.7, rng);
  const Tensor<float> ctx = Tensor<float>::full({2, 4}, 0.5f);
  const auto logit = gate_logit(ctx, g);
  static_assert(std::is_same_v<decltype(logit), const Tensor<double>>);
  CHECK(std::abs(2.0 * sigmoid(logit.data()[0]) - 0.7) < 1e-6);
}

TEST_CASE("two-layer gate starts at beta_init") {
  std::mt19937_64 rng(4);
  auto g = BetaGate<double>::init(8, GateMode::two_layer, 16, 0.3, rng);
  CHECK(g.weight.data().abs().maxCoeff() > 0.0);
  const T ctx = oracle::random_tensor({50, 8}, rng);
  CHECK((gate_beta(ctx, g).data() - 0.3).abs().maxCoeff() < 1e-12);
  ParameterList<double> params;
  g.collect(params, "g.");
  REQUIRE(params.size() == 4);
  CHECK(params[1].name == "g.hidden_bias");
  CHECK(!params[1].decay);
  CHECK(!params[3].decay);
}

TEST_CASE("k-map matches the delta_update oracle") {
  std::mt19937_64 rng(5);
  const Index d = 8;
  for (int trial = 0; trial < 10; ++trial) {
    const T x = oracle::random_tensor({d}, rng);
    const T w = oracle::random_tensor({d, d}, rng);
    const T w_v = oracle::random_tensor({d}, rng);
    const T scale = oracle::random_tensor({d}, rng);
    const BetaGate<double> g = random_gate(d, rng);
    BlockOptions<double> opt;
    opt.norm_scale = &scale;
    const T out = block_forward_kmap<double>(x, linear_map(w), g, w_v, opt);

    const Vec xv = to_vec(x);
    const Vec ctx = context(xv, to_vec(scale), 1e-6);
    const Mat wm = oracle::as_matrix(w, d, d);
    const Vec k_tilde = wm.transpose() * ctx;
    const double v = sigmoid(xv.dot(to_vec(w_v)));
    const double beta = gate_oracle(ctx, g);
    const Mat expected = delta_update<double>(xv, normalize_direction<double>(k_tilde, 1e-6), beta, Vec::Constant(1, v));
    CHECK((to_vec(out) - expected.col(0)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("k-map limits") {
  std::mt19937_64 rng(6);
  const Index d = 8;
  const T x = oracle::random_tensor({d}, rng);
  const T w = oracle::random_tensor({d, d}, rng);
  const T w_v = oracle::random_tensor({d}, rng);

  BlockOptions<double> opt;
  opt.beta_override = 1.0;
  const Vec out = to_vec(block_forward_kmap<double>(x, linear_map(w), zero_gate(d, 1.0), w_v, opt));
  const Vec ctx = context(to_vec(x), Vec::Ones(d), 1e-6);
  const Vec k = normalize_direction<double>(oracle::as_matrix(w, d, d).transpose() * ctx, 1e-6).vector();
  const double v = sigmoid(to_vec(x).dot(to_vec(w_v)));
  CHECK(std::abs(k.dot(out) - v) < 1e-10);

  // saturated-low gate at float precision
  std::mt19937_64 frng(7);
  auto gf = BetaGate<float>::init(d, GateMode::single_linear, 0, 1.0, frng);
  gf.bias.mutable_data()[0] = -20.0f;
  Tensor<float> xf = cast<float>(x), wf = cast<float>(w), wvf = cast<float>(w_v);
  const Tensor<float> of = block_forward_kmap<float>(xf, linear_map(wf), gf, wvf);
  CHECK((of.data() - xf.data()).abs().maxCoeff() <= 1e-6f);
}

TEST_CASE("v-map matches the delta_update oracle") {
  std::mt19937_64 rng(8);
  const Index d = 8;
  for (int trial = 0; trial < 10; ++trial) {
    const T x = oracle::random_tensor({d}, rng);
    const T w = oracle::random_tensor({d, d}, rng);
    const T phi = oracle::random_tensor({d, d}, rng);
    const T w_p = oracle::random_tensor({d}, rng);
    const BetaGate<double> g = random_gate(d, rng);
    BlockOptions<double> opt;
    opt.aux_input = AuxInput::context;
    const T out = block_forward_vmap<double>(x, linear_map(w), g, linear_map(phi), w_p, opt);

    const Vec xv = to_vec(x);
    const Vec ctx = context(xv, Vec::Ones(d), 1e-6);
    const Vec h = oracle::as_matrix(w, d, d).transpose() * ctx;
    const Vec k_tilde = oracle::as_matrix(phi, d, d).transpose() * ctx;
    const double v = sigmoid(h.dot(to_vec(w_p)));
    const Mat expected =
        delta_update<double>(xv, normalize_direction<double>(k_tilde, 1e-6), gate_oracle(ctx, g), Vec::Constant(1, v));
    CHECK((to_vec(out) - expected.col(0)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("v-map limits") {
  std::mt19937_64 rng(9);
  const Index d = 6;
  const T x = oracle::random_tensor({d}, rng);
  const T w = oracle::random_tensor({d, d}, rng);
  const T w_p = oracle::random_tensor({d}, rng);
  const Sublayer<double> e1 = [d](const T& in) {
    Array a = Array::Zero(in.size());
    for (Index r = 0; r < in.size() / d; ++r) a[r * d] = 1.0;
    return T(in.shape(), a);
  };
  const T out = block_forward_vmap<double>(x, linear_map(w), random_gate(d, rng), e1, w_p);
  for (Index i = 1; i < d; ++i) CHECK(out.data()[i] == x.data()[i]);
  CHECK(out.data()[0] != x.data()[0]);

  BetaGate<double> low = zero_gate(d, 1.0);
  low.bias.mutable_data()[0] = -40.0;
  const T same = block_forward_vmap<double>(x, linear_map(w), low, linear_map(w), w_p);
  CHECK((same.data() - x.data()).abs().maxCoeff() < 1e-15);
}

TEST_CASE("k-map and v-map coincide under matched wiring") {
  std::mt19937_64 rng(10);
  const Index d = 7;
  const T x = oracle::random_tensor({4, d}, rng);
  const T a = oracle::random_tensor({d, d}, rng);
  const T u = oracle::random_tensor({d}, rng);
  const BetaGate<double> g = random_gate(d, rng);
  BlockOptions<double> opt;
  opt.aux_input = AuxInput::context;
  const Sublayer<double> identity = [](const T& in) { return in; };
  const T k_out = block_forward_kmap<double>(x, linear_map(a), g, u, opt);
  const T v_out = block_forward_vmap<double>(x, identity, g, linear_map(a), u, opt);
  CHECK((k_out.data() - v_out.data()).abs().maxCoeff() < 1e-15);
}

TEST_CASE("block gradients match finite differences") {
  for (MapMode mode : {MapMode::kmap, MapMode::vmap})
    for (GateMode gm : {GateMode::single_linear, GateMode::two_layer}) {
      std::mt19937_64 rng(11);
      const Index d = 12;
      BlockConfig cfg;
      cfg.d = d;
      cfg.map_mode = mode;
      cfg.gate_mode = gm;
      cfg.gate_hidden = 5;
      cfg.aux_input = BlockConfig::default_aux_input(mode, 1);
      DeltaBlock<double> block = DeltaBlock<double>::init(cfg, rng);
      // move the gate off its zero-weight start so every path carries gradient
      block.gate.weight.mutable_data() = oracle::gaussian_array(block.gate.weight.size(), rng, 0.3);
      if (gm == GateMode::two_layer) block.gate.out_weight.mutable_data() = oracle::gaussian_array(5, rng, 0.3);
      T w = oracle::random_parameter({d, d}, rng, 0.3);
      T scale = oracle::random_parameter({d}, rng);
      T x = oracle::random_parameter({3, d}, rng);
      const T probe = oracle::random_tensor({3, d}, rng);
      const Sublayer<double> f = [&w](const T& h) { return ddl::tanh(matmul(h, w)); };
      auto loss = [&] { return sum(block.forward(x, f, &scale) * probe); };

      ParameterList<double> params;
      block.collect(params, "");
      params.push_back({"w", w, true});
      params.push_back({"scale", scale, false});
      params.push_back({"x", x, true});
      for (auto& p : params) p.tensor.zero_grad();
      {
        Tape tape;
        TapeScope scope(tape);
        backward(loss());
      }
      for (auto& p : params) {
        const Array numeric = oracle::central_difference(p.tensor, [&] { return loss().item(); }, 1e-5);
        INFO(to_string(mode), " ", p.name);
        CHECK(oracle::relative_error(p.tensor.grad(), numeric) < 1e-5);
      }
    }
}

TEST_CASE("32 saturated-low blocks preserve the input norm") {
  const Index d = 32;
  std::mt19937_64 rng(12);
  BlockConfig cfg;
  cfg.d = d;
  cfg.beta_init = 1e-9;
  std::vector<DeltaBlock<float>> blocks;
  std::vector<Tensor<float>> weights;
  for (int i = 0; i < 32; ++i) {
    blocks.push_back(DeltaBlock<float>::init(cfg, rng));
    weights.push_back(linear_parameter<float>(d, d, rng));
  }
  const Tensor<float> x0 = cast<float>(oracle::random_tensor({4, d}, rng));
  Tensor<float> x = x0;
  for (int i = 0; i < 32; ++i) x = blocks[i].forward(x, linear_map(weights[i]), nullptr);
  for (Index r = 0; r < 4; ++r) {
    const double n0 = x0.data().segment(r * d, d).matrix().norm();
    const double n1 = x.data().segment(r * d, d).matrix().norm();
    CHECK(std::abs(n1 - n0) / n0 < 1e-4);
  }
}

TEST_CASE("block errors") {
  std::mt19937_64 rng(13);
  const Index d = 4;
  const T x = oracle::random_tensor({d}, rng);
  const Sublayer<double> zero = [](const T& in) { return T::zeros(in.shape()); };
  BlockOptions<double> exact;
  exact.eps_k = 0.0;
  CHECK_THROWS_AS(block_forward_kmap<double>(x, zero, zero_gate(d, 1.0), oracle::random_tensor({d}, rng), exact),
                  ZeroDirectionError);
  // with the guard the degenerate direction is a no-op
  const T guarded = block_forward_kmap<double>(x, zero, zero_gate(d, 1.0), oracle::random_tensor({d}, rng));
  CHECK((guarded.data() - x.data()).abs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(block_forward_kmap<double>(x, zero, zero_gate(d, 1.0), oracle::random_tensor({d + 1}, rng)),
                  ShapeError);
}

TEST_CASE("default auxiliary input") {
  CHECK(BlockConfig::default_aux_input(MapMode::kmap, 1) == AuxInput::raw);
  CHECK(BlockConfig::default_aux_input(MapMode::vmap, 1) == AuxInput::context);
  CHECK(BlockConfig::default_aux_input(MapMode::vmap, 4) == AuxInput::raw);
}
