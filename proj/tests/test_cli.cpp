#include "doctest.h"

#include "commands.hpp"

#include "ddl/delta_op.hpp"

#include <Eigen/LU>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using ddl::Index;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result invoke(std::vector<std::string> args, const ddl::verify::DeltaUpdateFn& kernel = {}) {
  args.insert(args.begin(), "ddl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = ddl::cli::run(static_cast<int>(argv.size()), argv.data(), out, err, kernel);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ddl_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

/// Value following `key` on the first line that starts with it.
double field(const std::string& text, const std::string& key) {
  for (const auto& l : lines(text)) {
    std::istringstream in(l);
    std::string k;
    while (in >> k)
      if (k == key) {
        double v;
        in >> v;
        return v;
      }
  }
  FAIL("missing field " << key);
  return 0;
}

fs::path tiny_config(const fs::path& dir) {
  const fs::path p = dir / "tiny.json";
  write_file(p, R"({
  "model": {"d": 16, "n_layers": 2, "n_heads": 2, "head_dim": 8, "seq_len": 16},
  "ddl": {"state_shortconv_kernel_size": 2},
  "train": {"steps": 20, "batch_size": 4, "seq_len": 16, "warmup_steps": 5, "eval_interval": 10,
            "eval_batches": 3, "seed": 5}
})");
  return p;
}

std::vector<std::string> csv_column(const fs::path& csv, std::size_t col) {
  std::vector<std::string> out;
  const auto ls = lines(read_file(csv));
  for (std::size_t i = 1; i < ls.size(); ++i) {
    std::istringstream in(ls[i]);
    std::string cell;
    for (std::size_t c = 0; c <= col; ++c) std::getline(in, cell, ',');
    out.push_back(cell);
  }
  return out;
}

}  // namespace

TEST_CASE("check passes on a correct build") {
  const Result r = invoke({"check", "--fast"});
  CHECK(r.code == 0);
  CHECK(r.out.find("\"pass\":false") == std::string::npos);
  CHECK(lines(r.out).size() > 50u);
}

TEST_CASE("check reports an injected sign error") {
  const ddl::verify::DeltaUpdateFn flipped = [](const ddl::StateMatrix<double>& x,
                                                 const ddl::UnitDirection<double>& k, double beta,
                                                 const ddl::Vector<double>& v) {
    const auto& u = k.vector();
    return ddl::StateMatrix<double>(x - beta * u * (v.transpose() - u.transpose() * x));
  };
  const Result r = invoke({"check", "--fast"}, flipped);
  CHECK(r.code == 1);
  bool named = false;
  for (const auto& l : lines(r.out))
    named = named || (l.find("\"check\":\"check_projected_dynamics\"") != std::string::npos &&
                      l.find("\"pass\":false") != std::string::npos);
  CHECK(named);
}

TEST_CASE("check is deterministic given a seed") {
  const Result a = invoke({"check", "--seed", "7"});
  const Result b = invoke({"check", "--seed", "7"});
  CHECK(a.code == 0);
  CHECK(a.out == b.out);

  ::setenv("DDL_SEED", "7", 1);
  const Result env = invoke({"check", "--fast"});
  ::setenv("DDL_SEED", "not-a-number", 1);
  const Result bad_env = invoke({"check", "--fast"});
  ::unsetenv("DDL_SEED");
  CHECK(env.out == invoke({"check", "--fast", "--seed", "7"}).out);
  CHECK(bad_env.code == 2);
}

TEST_CASE("spectrum examples") {
  const fs::path dir = scratch("spectrum");
  write_file(dir / "k4.txt", "0.3 -1.2 0.5 2.0\n");
  write_file(dir / "k3.txt", "1, 2, -0.5\n");

  const Result proj = invoke({"spectrum", "--beta", "1", "--d", "4", "--dv", "2", "--k-file", (dir / "k4.txt").string(),
                              "--csv", (dir / "s.csv").string()});
  CHECK(proj.code == 0);
  CHECK(proj.out.find("regime projection") != std::string::npos);
  CHECK(proj.out.find("  1  x3\n") != std::string::npos);
  CHECK(proj.out.find("  0  x1\n") != std::string::npos);
  CHECK(std::abs(field(proj.out, "spatial_det")) < 1e-12);
  CHECK(std::abs(field(proj.out, "lifted_det")) < 1e-12);
  const auto csv = lines(read_file(dir / "s.csv"));
  REQUIRE(csv.size() == 3u);
  CHECK(csv[0] == "beta,d,d_v,regime,eigenvalue,multiplicity,spatial_det,lifted_det,sigma_min,sigma_max,orientation");

  const Result id = invoke({"spectrum", "--beta", "0", "--d", "4", "--dv", "1"});
  CHECK(id.code == 0);
  CHECK(id.out.find("regime identity") != std::string::npos);
  CHECK(id.out.find("  1  x4\n") != std::string::npos);
  CHECK(field(id.out, "spatial_det") == 1.0);

  // lifted determinant from the dense Kronecker product I_3 (x) A
  const Result flip = invoke({"spectrum", "--beta", "1.25", "--d", "3", "--dv", "3", "--k-file", (dir / "k3.txt").string()});
  CHECK(flip.code == 0);
  ddl::Vector<double> k(3);
  k << 1, 2, -0.5;
  k.normalize();
  const ddl::Matrix<double> a = ddl::Matrix<double>::Identity(3, 3) - 1.25 * k * k.transpose();
  ddl::Matrix<double> lifted = ddl::Matrix<double>::Zero(9, 9);
  for (Index j = 0; j < 3; ++j) lifted.block(j * 3, j * 3, 3, 3) = a;
  const double oracle_det = lifted.partialPivLu().determinant();
  CHECK(std::abs(oracle_det + 0.015625) < 1e-12);
  CHECK(std::abs(field(flip.out, "lifted_det") - oracle_det) < 1e-12);
  CHECK(flip.out.find("orientation flipped (d_v odd, beta > 1)") != std::string::npos);
  CHECK(flip.out.find("regime reflection-like") != std::string::npos);

  const Result even = invoke({"spectrum", "--beta", "1.25", "--d", "3", "--dv", "2"});
  CHECK(even.out.find("orientation preserved") != std::string::npos);

  CHECK(invoke({"spectrum", "--beta", "0.5", "--d", "5"}).out.find("regime contraction") != std::string::npos);
  CHECK(invoke({"spectrum", "--beta", "0.5", "--d", "3", "--seed", "4"}).out ==
        invoke({"spectrum", "--beta", "0.5", "--d", "3", "--seed", "4"}).out);
}

TEST_CASE("usage errors exit 2") {
  const fs::path dir = scratch("usage");
  write_file(dir / "short.txt", "1 2");
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"spectrum", "--beta", "3", "--d", "4"}).code == 2);
  CHECK(invoke({"spectrum", "--beta", "1", "--d", "0"}).code == 2);
  CHECK(invoke({"spectrum", "--d", "4"}).code == 2);
  CHECK(invoke({"spectrum", "--beta", "1", "--d", "4", "--k-file", (dir / "short.txt").string()}).code == 2);
  CHECK(invoke({"check", "--bogus"}).code == 2);
  CHECK(invoke({"train", "--variant", "sideways"}).code == 2);
  CHECK(invoke({"--help"}).code == 0);

  const Result cc = invoke({"train", "--variant", "cc", "--dv", "4", "--residual-mode", "ddl", "--state-kernel", "3",
                            "--out", (dir / "never").string()});
  CHECK(cc.code == 2);
  CHECK(cc.err.find("must equal") != std::string::npos);
  CHECK(!fs::exists(dir / "never"));

  write_file(dir / "broken.json", "{\n  \"train\": {\n    \"steps\": 10\n    \"lr\": 1\n  }\n}\n");
  const Result broken = invoke({"train", "--config", (dir / "broken.json").string()});
  CHECK(broken.code == 2);
  CHECK(broken.err.find("broken.json:4:") != std::string::npos);
}

TEST_CASE("train then eval") {
  const fs::path dir = scratch("train");
  const fs::path cfg = tiny_config(dir);
  const Result t = invoke({"train", "--config", cfg.string(), "--residual-mode", "ddl", "--dv", "4", "--data",
                           DDL_TEST_DATA, "--out", (dir / "run").string(), "--quiet"});
  REQUIRE(t.code == 0);
  const double val = field(t.out, "val_loss");
  CHECK(std::abs(field(t.out, "perplexity") - std::exp(val)) < 1e-6 * std::exp(val));
  const auto logged = csv_column(dir / "run" / "metrics.csv", 2);
  REQUIRE(logged.size() == 2u);

  const Result e = invoke({"eval", "--checkpoint", (dir / "run" / "checkpoint.ddl").string(), "--data", DDL_TEST_DATA});
  REQUIRE(e.code == 0);
  CHECK(std::abs(field(e.out, "val_loss") - std::stod(logged.back())) < 1e-6);
  CHECK(std::abs(field(e.out, "val_loss") - val) < 1e-6);
  CHECK(e.out.find("layer 1  mean_beta") != std::string::npos);

  const std::string bytes = read_file(dir / "run" / "checkpoint.ddl");
  std::ofstream(dir / "cut.ddl", std::ios::binary) << bytes.substr(0, bytes.size() / 3);
  const Result cut = invoke({"eval", "--checkpoint", (dir / "cut.ddl").string(), "--data", DDL_TEST_DATA});
  CHECK(cut.code != 0);
  CHECK(cut.err.find("error") != std::string::npos);
  CHECK(invoke({"eval", "--checkpoint", (dir / "absent.ddl").string()}).code != 0);
}

TEST_CASE("untrained gates report beta = 1") {
  const fs::path dir = scratch("untrained");
  for (const char* dv : {"1", "4"}) {
    const fs::path out = dir / dv;
    const Result t = invoke({"train", "--config", tiny_config(dir).string(), "--residual-mode", "ddl", "--dv", dv,
                             "--steps", "0", "--data", DDL_TEST_DATA, "--out", out.string(), "--quiet"});
    REQUIRE(t.code == 0);
    const Result e = invoke({"eval", "--checkpoint", (out / "checkpoint.ddl").string(), "--data", DDL_TEST_DATA});
    REQUIRE(e.code == 0);
    int layers = 0;
    for (const auto& l : lines(e.out))
      if (l.rfind("layer ", 0) == 0) {
        ++layers;
        CHECK(std::abs(field(l, "mean_beta") - 1.0) < 1e-6);
      }
    CHECK(layers == 2);
  }
}

TEST_CASE("baseline and ddl share the metrics step grid") {
  const fs::path dir = scratch("grid");
  const fs::path cfg = tiny_config(dir);
  std::map<std::string, std::vector<std::string>> steps;
  for (const char* mode : {"baseline", "ddl"}) {
    const Result t = invoke({"train", "--config", cfg.string(), "--residual-mode", mode, "--data", DDL_TEST_DATA,
                             "--out", (dir / mode).string(), "--quiet"});
    REQUIRE(t.code == 0);
    steps[mode] = csv_column(dir / mode / "metrics.csv", 0);
  }
  CHECK(steps["baseline"] == std::vector<std::string>{"10", "20"});
  CHECK(steps["baseline"] == steps["ddl"]);
  CHECK(csv_column(dir / "baseline" / "metrics.csv", 5) == std::vector<std::string>{"nan", "nan"});
}

TEST_CASE("200-step smoke run on the bundled corpus") {
  const fs::path dir = scratch("smoke");
  const Result t = invoke({"train", "--residual-mode", "ddl", "--dv", "1", "--map-mode", "kmap", "--steps", "200",
                           "--data", DDL_TEST_DATA, "--out", dir.string(), "--quiet"});
  REQUIRE(t.code == 0);
  const double loss = field(t.out, "train_loss");
  MESSAGE("final train loss " << loss);
  CHECK(loss < 5.0);
}
