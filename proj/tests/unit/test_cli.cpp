#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs the installed binary with the given arguments, capturing both streams.
CliResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out_file = fs::temp_directory_path() / ("dsran_cli_out_" + std::to_string(counter));
  const fs::path err_file = fs::temp_directory_path() / ("dsran_cli_err_" + std::to_string(counter));
  ++counter;
  const std::string cmd = std::string(DSRAN_CLI_PATH) + " " + args + " > " + out_file.string() +
                          " 2> " + err_file.string();
  const int raw = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  fs::remove(out_file);
  fs::remove(err_file);
  return r;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("dsran_cli_") + tag);
  fs::remove_all(dir);
  return dir;
}

// Shared tiny dataset + checkpoint for the eval/retrieve cases.
struct Fixture {
  fs::path data = fresh_dir("fixture_data");
  fs::path run = fresh_dir("fixture_run");
  Fixture() {
    REQUIRE(run_cli("gen --out " + data.string() +
                    " --seed 3 --items 8 --global-nodes 5 --regional-nodes 4 --dim 16"
                    " --vocab 60 --max-words 6 --captions-per-image 2 --clusters 8")
                .exit_code == 0);
    REQUIRE(run_cli("train --data " + data.string() + " --out " + run.string() + " " +
                    kTrainFlags).exit_code == 0);
  }
  static constexpr const char* kTrainFlags =
      "--epochs 60 --batch 4 --seed 5 --embed-dim 16 --word-dim 8 --val-every 0";
  std::string ckpt() const { return (run / "checkpoint.ckpt").string(); }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("gen writes a manifest and three blobs; reruns are byte-identical") {
  const fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  const std::string flags = " --seed 7 --items 4 --clusters 4 --dim 8 --global-nodes 3"
                            " --regional-nodes 2 --vocab 30 --max-words 5 --captions-per-image 2";
  CHECK(run_cli("gen --out " + a.string() + flags).exit_code == 0);
  CHECK(run_cli("gen --out " + b.string() + flags).exit_code == 0);
  for (const char* name : {"manifest.json", "global.bin", "regional.bin", "captions.bin"}) {
    CHECK(fs::exists(a / name));
    CHECK(file_bytes(a / name) == file_bytes(b / name));
  }
}

TEST_CASE("gen rejects zero items with a usage error") {
  CliResult r = run_cli("gen --out /tmp/dsran_cli_zero --items 0");
  CHECK(r.exit_code == 2);
}

TEST_CASE("train: missing dataset exits 2 with the error name on stderr") {
  CliResult r = run_cli("train --data /tmp/does_not_exist_ds");
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("IoFailure") != std::string::npos);
}

TEST_CASE("train: identical invocations produce byte-identical logs and checkpoints") {
  Fixture& f = fixture();
  const std::string log_before = file_bytes(f.run / "train_log.json");
  const std::string ckpt_before = file_bytes(f.run / "checkpoint.ckpt");
  // Same flags, same output directory: every byte must reproduce.
  CliResult r = run_cli("train --data " + f.data.string() + " --out " + f.run.string() + " " +
                        Fixture::kTrainFlags);
  REQUIRE(r.exit_code == 0);
  CHECK(file_bytes(f.run / "train_log.json") == log_before);
  CHECK(file_bytes(f.run / "checkpoint.ckpt") == ckpt_before);
}

TEST_CASE("train: zero learning rate leaves the initial parameters in the checkpoint") {
  Fixture& f = fixture();
  // Two runs differing only in epoch count: with lr 0 the parameters never
  // move. Batch norm is off so the tensor blob holds parameters only (the
  // running statistics are buffers and keep updating regardless of lr).
  const fs::path frozen = fresh_dir("train_frozen");
  const fs::path one = fresh_dir("train_frozen1");
  REQUIRE(run_cli("train --data " + f.data.string() + " --out " + frozen.string() +
                  " --epochs 5 --batch 4 --seed 5 --lr 0 --val-every 0 --no-batchnorm")
              .exit_code == 0);
  REQUIRE(run_cli("train --data " + f.data.string() + " --out " + one.string() +
                  " --epochs 1 --batch 4 --seed 5 --lr 0 --val-every 0 --no-batchnorm")
              .exit_code == 0);
  const std::string a = file_bytes(frozen / "checkpoint.ckpt");
  const std::string b = file_bytes(one / "checkpoint.ckpt");
  REQUIRE(a.size() == b.size());
  REQUIRE(a.size() > 8);
  // Skip the length-prefixed JSON header (it records the epoch).
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) {
    header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(a[static_cast<size_t>(i)]))
                  << (8 * i);
  }
  CHECK(a.substr(8 + header_len) == b.substr(8 + header_len));
}

TEST_CASE("eval: repeated runs byte-identical; self-ensemble equals the single model") {
  Fixture& f = fixture();
  const std::string base = "eval --ckpt " + f.ckpt() + " --data " + f.data.string() + " --json";
  CliResult a = run_cli(base);
  CliResult b = run_cli(base);
  REQUIRE(a.exit_code == 0);
  CHECK(a.out == b.out);

  CliResult ens = run_cli(base + " --ensemble " + f.ckpt() + " --ensemble " + f.ckpt());
  REQUIRE(ens.exit_code == 0);
  CHECK(json::parse(ens.out)["rsum"] == json::parse(a.out)["rsum"]);
  CHECK(json::parse(ens.out)["i2t"] == json::parse(a.out)["i2t"]);
}

TEST_CASE("eval: fold splitting averages sub-reports") {
  Fixture& f = fixture();
  CliResult folded = run_cli("eval --ckpt " + f.ckpt() + " --data " + f.data.string() +
                             " --folds 4 --json");
  REQUIRE(folded.exit_code == 0);
  CHECK(json::parse(folded.out)["folds"] == 4);

  CliResult bad = run_cli("eval --ckpt " + f.ckpt() + " --data " + f.data.string() + " --folds 3");
  CHECK(bad.exit_code == 1);
  CHECK(bad.err.find("ShapeMismatch") != std::string::npos);
}

TEST_CASE("retrieve: ranks the query's own captions first after training") {
  Fixture& f = fixture();
  CliResult r = run_cli("retrieve --ckpt " + f.ckpt() + " --data " + f.data.string() +
                        " --query 2 --top 2 --attention global --json");
  REQUIRE(r.exit_code == 0);
  json j = json::parse(r.out);
  // Captions of image 2 are texts 4 and 5 (two captions per image).
  const int first = j["results"][0]["index"].get<int>();
  CHECK((first == 4 || first == 5));
  CHECK(j["attention"]["indices"].size() == 5);  // all global nodes ranked

  CliResult oob = run_cli("retrieve --ckpt " + f.ckpt() + " --data " + f.data.string() +
                          " --query 99");
  CHECK(oob.exit_code == 1);
}

TEST_CASE("gradcheck: default passes, injected bug and tol 0 fail") {
  CliResult ok = run_cli("gradcheck --json");
  REQUIRE(ok.exit_code == 0);
  json j = json::parse(ok.out);
  CHECK(j["pass"] == true);
  CHECK(j["max_rel_err"].get<double>() <= 1e-4);

  CliResult bug = run_cli("gradcheck --inject-grad-bug");
  CHECK(bug.exit_code == 1);
  CHECK(bug.err.find("GradCheckFailed") != std::string::npos);

  CliResult strict = run_cli("gradcheck --tol 0");
  CHECK(strict.exit_code == 1);
}

TEST_CASE("sweep-k: single row for K={1}, K=3 rejected as a config error") {
  Fixture& f = fixture();
  CliResult one = run_cli("sweep-k --data " + f.data.string() +
                          " --epochs 3 --batch 4 --val-every 0 --embed-dim 16 --word-dim 8"
                          " --k 1 --json");
  REQUIRE(one.exit_code == 0);
  CHECK(json::parse(one.out)["rows"].size() == 1);

  CliResult bad = run_cli("sweep-k --data " + f.data.string() + " --k 3");
  CHECK(bad.exit_code == 2);
  CHECK(bad.err.find("ArityMismatch") != std::string::npos);
}

TEST_CASE("config file values are used and flags override them") {
  Fixture& f = fixture();
  const fs::path cfg_path = fs::temp_directory_path() / "dsran_cli_cfg.json";
  json cfg{{"schema_version", 1},
           {"dataset", f.data.string()},
           {"model", {{"embed_dim", 16}, {"word_dim", 8}}},
           {"train", {{"epochs", 2}, {"batch_size", 4}, {"seed", 5}, {"val_every", 0}}}};
  std::ofstream(cfg_path) << cfg.dump();

  CliResult from_file = run_cli("train --config " + cfg_path.string() + " --json");
  REQUIRE(from_file.exit_code == 0);
  CHECK(json::parse(from_file.out)["epochs"].size() == 2);

  CliResult overridden = run_cli("train --config " + cfg_path.string() + " --epochs 3 --json");
  REQUIRE(overridden.exit_code == 0);
  CHECK(json::parse(overridden.out)["epochs"].size() == 3);

  json bad = cfg;
  bad["schema_version"] = 99;
  std::ofstream(cfg_path) << bad.dump();
  CHECK(run_cli("train --config " + cfg_path.string()).exit_code == 2);
}
