#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "doctest.h"
#include "gmx/analysis.hpp"
#include "gmx/backbone.hpp"
#include "gmx/config.hpp"
#include "gmx/error.hpp"

#ifndef GMX_CLI_PATH
#error "GMX_CLI_PATH must point at the gmx binary"
#endif

using namespace gmx;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string out;
};

std::filesystem::path work_dir() {
  static const std::filesystem::path dir = [] {
    auto d = std::filesystem::temp_directory_path() / "gmx_cli_test";
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
  }();
  return dir;
}

// Runs the tool through the shell so env overrides can be exercised; the
// default prefix strips GMX_SEED so ambient state cannot leak into a test.
CmdResult run_cli(const std::string& args,
                  const std::string& env_prefix = "env -u GMX_SEED") {
  const std::string cmd =
      env_prefix + " " + std::string(GMX_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(bool(f));
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool has_line(const std::string& text, const std::string& line) {
  std::istringstream ss(text);
  std::string cur;
  while (std::getline(ss, cur))
    if (cur == line) return true;
  return false;
}

// value of `key` in the first CSV row whose first field equals `row`
double csv_field(const std::string& csv, const std::string& row, int col) {
  std::istringstream ss(csv);
  std::string line;
  while (std::getline(ss, line)) {
    std::istringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');
    if (field != row) continue;
    double value = 0.0;
    for (int c = 1; c <= col; ++c) {
      std::getline(ls, field, ',');
      value = std::atof(field.c_str());
    }
    return value;
  }
  FAIL("row not found: ", row);
  return 0.0;
}

// metrics rows keyed by step; fields are lr, loss, accuracy
std::vector<std::vector<double>> metrics_rows(const std::string& csv) {
  std::vector<std::vector<double>> rows;
  std::istringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  REQUIRE(line == "step,lr,loss,accuracy");
  while (std::getline(ss, line)) {
    std::vector<double> row;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) row.push_back(std::atof(field.c_str()));
    REQUIRE(row.size() == 4);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_CASE("describe prints the preset stage table") {
  CmdResult t = run_cli("describe --preset T");
  CHECK(t.exit_code == 0);
  CHECK(has_line(t.out, "preset=T"));
  CHECK(has_line(t.out, "stage0.dim=80"));
  CHECK(has_line(t.out, "stage1.dim=160"));
  CHECK(has_line(t.out, "stage2.dim=200"));
  CHECK(has_line(t.out, "stage3.dim=240"));
  CHECK(has_line(t.out, "stage2.depth=12"));
  CHECK(has_line(t.out, "stage0.out_size=56x56"));
  CHECK(has_line(t.out, "stage1.out_size=28x28"));
  CHECK(has_line(t.out, "stage2.out_size=14x14"));
  CHECK(has_line(t.out, "stage3.out_size=7x7"));
  CHECK(has_line(t.out, "num_classes=1000"));
  CHECK(has_line(t.out, "total_depth=24"));

  CmdResult l = run_cli("describe --preset L");
  CHECK(l.exit_code == 0);
  CHECK(has_line(l.out, "stage0.depth=8"));
  CHECK(has_line(l.out, "stage1.depth=10"));
  CHECK(has_line(l.out, "stage2.depth=30"));
  CHECK(has_line(l.out, "stage3.depth=10"));
}

TEST_CASE("describe rejects usage and config errors with exit 2") {
  CHECK(run_cli("describe --preset T --res 100").exit_code == 2);
  CHECK(run_cli("describe --preset Q").exit_code == 2);
  CHECK(run_cli("describe").exit_code == 2);
  CHECK(run_cli("describe --preset T --config x.json").exit_code == 2);
  CHECK(run_cli("frobnicate").exit_code == 2);
  CHECK(run_cli("").exit_code == 2);

  const auto bad = work_dir() / "bad.json";
  std::ofstream(bad) << R"({"schema_version": 1, "preset": "T", "layers": 3})";
  CmdResult r = run_cli("describe --config " + bad.string());
  CHECK(r.exit_code == 2);
  CHECK(r.out.empty());

  CHECK(run_cli("describe --config " + (work_dir() / "nope.json").string())
            .exit_code == 3);
}

TEST_CASE("cost output matches the in-process analysis exactly") {
  CmdResult r = run_cli("cost --preset B --res 224");
  CHECK(r.exit_code == 0);
  CHECK(r.out == estimate_cost(ModelConfig::preset("B"), 224, 224, 1).to_csv());

  const double params = csv_field(r.out, "total", 1);
  const double flops = csv_field(r.out, "total", 2);
  CHECK(params == doctest::Approx(45.8e6).epsilon(0.05));
  CHECK(flops == doctest::Approx(17.6e9).epsilon(0.15));
}

TEST_CASE("cost batch flag scales flops linearly and leaves params alone") {
  CmdResult one = run_cli("cost --preset M --res 224 --batch 1");
  CmdResult three = run_cli("cost --preset M --res 224 --batch 3");
  REQUIRE(one.exit_code == 0);
  REQUIRE(three.exit_code == 0);
  CHECK(csv_field(three.out, "total", 1) == csv_field(one.out, "total", 1));
  CHECK(csv_field(three.out, "total", 2) ==
        doctest::Approx(3.0 * csv_field(one.out, "total", 2)).epsilon(1e-12));
}

TEST_CASE("cost writes the same CSV to a file when asked") {
  const auto out = work_dir() / "cost" / "m.csv";
  CmdResult r = run_cli("cost --preset M --res 224 --out " + out.string());
  CHECK(r.exit_code == 0);
  CHECK(read_file(out) == r.out);
  CHECK(run_cli("cost --preset M --res 100").exit_code == 2);
}

TEST_CASE("gradcheck reports every probe as passing and is reproducible") {
  CmdResult a = run_cli("gradcheck --scale tiny --seed 7");
  CHECK(a.exit_code == 0);
  CHECK(has_line(a.out, "all_pass=1"));
  int checks = 0;
  std::istringstream ss(a.out);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.rfind("check=", 0) == 0) {
      ++checks;
      CHECK(line.find("pass=1") != std::string::npos);
    }
  }
  CHECK(checks >= 15);

  CmdResult b = run_cli("gradcheck --scale tiny --seed 7");
  CHECK(b.out == a.out);
  CHECK(run_cli("gradcheck --scale huge").exit_code == 2);
}

TEST_CASE("train writes metrics and weights and echoes the metrics CSV") {
  const auto out = work_dir() / "train_smoke";
  CmdResult r = run_cli("train --out " + out.string() +
                        " --steps 8 --batch 4 --warmup 2 --log-every 2 --seed 5");
  CHECK(r.exit_code == 0);
  const std::string metrics = read_file(out / "metrics.csv");
  CHECK(metrics == r.out);
  const auto rows = metrics_rows(metrics);
  CHECK(rows.size() >= 4);

  const std::string weights = read_file(out / "final.gmxw");
  REQUIRE(weights.size() > 8);
  CHECK(weights.substr(0, 4) == "GMXW");

  for (const auto& entry : std::filesystem::directory_iterator(out)) {
    CHECK(entry.path().extension() != ".tmp");
  }
}

TEST_CASE("resumed training reproduces the next-step loss") {
  const auto full = work_dir() / "resume_full";
  const auto half = work_dir() / "resume_half";
  const auto cont = work_dir() / "resume_cont";
  const std::string shared = " --batch 4 --warmup 2 --log-every 1 --seed 11";

  CmdResult a = run_cli("train --out " + full.string() + " --steps 7" + shared);
  REQUIRE(a.exit_code == 0);
  CmdResult b = run_cli("train --out " + half.string() + " --steps 6" + shared);
  REQUIRE(b.exit_code == 0);
  CmdResult c = run_cli("train --out " + cont.string() + " --steps 7 --start-step 6 --resume " +
                        (half / "final.gmxw").string() + shared);
  REQUIRE(c.exit_code == 0);

  const auto full_rows = metrics_rows(a.out);
  const auto cont_rows = metrics_rows(c.out);
  REQUIRE(!cont_rows.empty());
  CHECK(cont_rows[0][0] == 6.0);
  double full_loss = -1.0, cont_loss = -1.0;
  for (const auto& row : full_rows)
    if (row[0] == 7.0) full_loss = row[2];
  for (const auto& row : cont_rows)
    if (row[0] == 7.0) cont_loss = row[2];
  REQUIRE(full_loss >= 0.0);
  REQUIRE(cont_loss >= 0.0);
  CHECK(cont_loss == doctest::Approx(full_loss).epsilon(1e-5));
}

TEST_CASE("GMX_SEED overrides the seed flag") {
  const auto flag7 = work_dir() / "seed_flag7";
  const auto env7 = work_dir() / "seed_env7";
  const auto flag5 = work_dir() / "seed_flag5";
  const std::string shared = " --steps 4 --batch 4 --warmup 1 --log-every 1";

  CmdResult a = run_cli("train --out " + flag7.string() + " --seed 7" + shared);
  CmdResult b = run_cli("train --out " + env7.string() + " --seed 5" + shared,
                        "env GMX_SEED=7");
  CmdResult c = run_cli("train --out " + flag5.string() + " --seed 5" + shared);
  REQUIRE(a.exit_code == 0);
  REQUIRE(b.exit_code == 0);
  REQUIRE(c.exit_code == 0);
  CHECK(a.out == b.out);
  CHECK(a.out != c.out);
  CHECK(read_file(env7 / "final.gmxw") == read_file(flag7 / "final.gmxw"));

  const auto junk = work_dir() / "seed_junk";
  CHECK(run_cli("train --out " + junk.string() + shared, "env GMX_SEED=12x")
            .exit_code == 2);
}

TEST_CASE("training divergence exits with code 4") {
  const auto out = work_dir() / "diverge";
  CmdResult r = run_cli("train --out " + out.string() +
                        " --steps 40 --batch 4 --warmup 1 --lr 1e9 --seed 3");
  CHECK(r.exit_code == 4);
}

TEST_CASE("unwritable output directory exits with code 3") {
  CmdResult r = run_cli("train --out /proc/gmx_cli_test --steps 4 --batch 4 --warmup 1");
  CHECK(r.exit_code == 3);
}

TEST_CASE("ablate emits the full config grid as loadable files") {
  const auto out = work_dir() / "grid";
  CmdResult r = run_cli("ablate --base T --out " + out.string());
  CHECK(r.exit_code == 0);

  std::istringstream ss(r.out);
  std::string line;
  int listed = 0;
  while (std::getline(ss, line)) {
    const auto eq = line.find('=');
    REQUIRE(eq != std::string::npos);
    const std::string name = line.substr(0, eq);
    const std::string path = line.substr(eq + 1);
    CAPTURE(name);
    FileConfig fc = load_config_file(path);
    fc.model.validate();
    ++listed;
  }
  const auto grid = ablation_grid("T");
  CHECK(listed == static_cast<int>(grid.size()));
  CHECK(listed == 14);

  int files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(out)) {
    (void)entry;
    ++files;
  }
  CHECK(files == listed);

  CHECK(run_cli("ablate --base Q --out " + out.string()).exit_code == 2);
}

TEST_CASE("bench prints per-size rows and slope summaries") {
  CmdResult r = run_cli("bench --sizes 16,32 --heads 2 --dhead 4 --reps 3 --seed 1");
  CHECK(r.exit_code == 0);
  CHECK(r.out.rfind("mechanism,n,wall_ms,macs", 0) == 0);
  CHECK(r.out.find("factorized,16,") != std::string::npos);
  CHECK(r.out.find("vanilla,32,") != std::string::npos);
  CHECK(r.out.find("mac_slope_factorized=1.0000") != std::string::npos);
  CHECK(r.out.find("mac_slope_vanilla=2.0000") != std::string::npos);
  CHECK(run_cli("bench --sizes 16,bogus").exit_code == 2);
}
