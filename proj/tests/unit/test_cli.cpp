#include <fstream>
#include <sstream>

#include "doctest.h"
#include "refuseg/cli/cli.hpp"
#include "support.hpp"

using namespace refuseg;
using support::kind_of;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

// Text after the "# resolved configuration" banner, up to the first blank or non key = value line.
std::string resolved_block(const std::string& out) {
  const auto at = out.find("# resolved configuration\n");
  REQUIRE(at != std::string::npos);
  std::istringstream in(out.substr(at + 25));
  std::string line, block;
  while (std::getline(in, line) && line.find(" = ") != std::string::npos) block += line + "\n";
  return block;
}

std::vector<std::string> tiny_settings() {
  return {"--set", "stages=2", "--set", "base_width=4", "--set", "blocks_per_stage=1", "--set", "proj_dim=4",
          "--set", "epochs=1", "--set", "lr=1e-3", "--set", "val_cases=0"};
}

}  // namespace

TEST_CASE("config text round trip and precedence") {
  trainer::RunConfig c;
  c.train.beta = 1.0;
  c.train.lr = 3e-4;
  c.model.base_width = 6;
  c.loss.temperature = 0.07;
  c.augment.rotate_limit_deg = 12.5;
  const auto text = cli::format_config(c);
  CHECK(cli::parse_config(text) == c);

  size_t lines = 0;
  for (char ch : text) lines += ch == '\n';
  CHECK(lines == cli::config_keys().size());

  const auto parsed = cli::parse_config("# comment\n\nbeta = 0.5   # trailing\n  epochs=3\n");
  CHECK(parsed.train.beta == 0.5);
  CHECK(parsed.train.epochs == 3);
  CHECK(parsed.train.lr == trainer::RunConfig{}.train.lr);

  CHECK(kind_of([] { cli::parse_config("no_such_key = 1\n"); }) == ErrorKind::configuration);
  CHECK(kind_of([] { cli::parse_config("epochs = three\n"); }) == ErrorKind::configuration);
  CHECK(kind_of([] { cli::parse_config("epochs 3\n"); }) == ErrorKind::configuration);

  auto over = parsed;
  cli::apply_setting(over, "beta", "2");
  CHECK(over.train.beta == 2.0);
  CHECK(over.train.epochs == 3);
}

TEST_CASE("usage errors exit with 2") {
  auto r = invoke({"frobnicate"});
  CHECK(r.code == 2);
  r = invoke({});
  CHECK(r.code == 2);
  r = invoke({"gen-data", "--cases", "2"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--out") != std::string::npos);
  r = invoke({"infer", "--ckpt", "x.rfsg", "--case", "dir"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--out") != std::string::npos);
  r = invoke({"gen-data", "--out", "x", "--bogus", "1"});
  CHECK(r.code == 2);
}

TEST_CASE("runtime errors exit with 1") {
  const auto dir = support::scratch_dir("cli_runtime");
  auto r = invoke({"gen-data", "--out", (dir / "d").string(), "--size", "32,32"});
  CHECK(r.code == 1);
  r = invoke({"train", "--data", (dir / "missing").string(), "--out", (dir / "o").string(), "--set", "nope=1"});
  CHECK(r.code == 1);
  CHECK(r.err.find("nope") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("gen-data is byte-deterministic") {
  const auto dir = support::scratch_dir("cli_gen");
  for (const char* name : {"a", "b"})
    REQUIRE(invoke({"gen-data", "--out", (dir / name).string(), "--cases", "2", "--size", "16,16,16", "--seed", "7"})
                .code == 0);
  const auto a = tree_bytes(dir / "a"), b = tree_bytes(dir / "b");
  CHECK(a.size() == 10);
  CHECK(a == b);
  REQUIRE(invoke({"gen-data", "--out", (dir / "c").string(), "--cases", "2", "--size", "16,16,16", "--seed", "8"})
              .code == 0);
  CHECK(tree_bytes(dir / "c") != a);
  fs::remove_all(dir);
}

TEST_CASE("train, infer, eval and matrix end to end") {
  const auto dir = support::scratch_dir("cli_pipeline");
  const auto data = dir / "data";
  REQUIRE(invoke({"gen-data", "--out", data.string(), "--cases", "2", "--size", "16,16,16", "--seed", "3"}).code == 0);

  std::ofstream(dir / "run.cfg") << "beta = 0.25\nepochs = 2\nbatch_size = 2\n";
  std::vector<std::string> args{"train", "--data", data.string(), "--out", (dir / "run").string(), "--config",
                                (dir / "run.cfg").string()};
  const auto tiny = tiny_settings();
  args.insert(args.end(), tiny.begin(), tiny.end());
  args.insert(args.end(), {"--set", "beta=1.0"});
  auto r = invoke(args);
  INFO(r.err);
  REQUIRE(r.code == 0);

  const auto printed = cli::parse_config(resolved_block(r.out));
  CHECK(printed.train.beta == 1.0);
  CHECK(printed.train.batch_size == 2);
  CHECK(printed.train.epochs == 1);
  CHECK(printed.model.base_width == 4);
  CHECK(cli::format_config(printed) == resolved_block(r.out));

  const auto ckpt = dir / "run" / "final.rfsg";
  REQUIRE(fs::exists(ckpt));
  const auto case_dir = data / "case_0000";

  r = invoke({"infer", "--ckpt", ckpt.string(), "--case", case_dir.string(), "--drop", "t1,T1C,t2,flair", "--out",
              (dir / "none.nii").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("empty fusion") != std::string::npos);

  r = invoke({"infer", "--ckpt", ckpt.string(), "--case", case_dir.string(), "--drop", "t2", "--out",
              (dir / "pred.nii").string()});
  REQUIRE(r.code == 0);
  r = invoke({"eval", "--pred", (dir / "pred.nii").string(), "--gt", (case_dir / "seg.nii").string(), "--report",
              (dir / "eval.jsonl").string(), "--dropped", "t2", "--beta", "1"});
  REQUIRE(r.code == 0);
  const auto one = metrics::MetricsReport::from_json(slurp(dir / "eval.jsonl"));
  CHECK(one.case_id == "case_0000");
  CHECK(one.dropped_modality == Modality::t2);
  CHECK(one.beta == 1.0);

  r = invoke({"eval", "--pred", (case_dir / "seg.nii").string(), "--gt", (case_dir / "seg.nii").string(),
              "--report", (dir / "self.jsonl").string()});
  REQUIRE(r.code == 0);
  const auto self = metrics::MetricsReport::from_json(slurp(dir / "self.jsonl"));
  for (int k = 0; k < 3; ++k) {
    CHECK(self.scores.dice[k] == 1.0);
    CHECK(self.scores.hd95[k] == 0.0);
  }

  r = invoke({"matrix", "--ckpt", ckpt.string(), "--data", data.string(), "--report",
              (dir / "matrix.jsonl").string()});
  REQUIRE(r.code == 0);
  const auto report = trainer::read_report(dir / "matrix.jsonl");
  CHECK(report.beta == 1.0);
  CHECK(report.cases.size() == 10);
  for (const auto& row : report.cases) CHECK(row.beta == 1.0);
  for (const auto& row : report.means) CHECK(row.beta == 1.0);
  fs::remove_all(dir);
}
