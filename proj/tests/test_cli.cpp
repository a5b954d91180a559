#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "scrub/datagen.hpp"
#include "scrub/evalmod.hpp"
#include "scrub/image_io.hpp"
#include "scrub/manifest.hpp"

using namespace scrub;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SCRUB_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / "scrub_cli_ws";
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string p(const char* leaf) const { return (dir / leaf).string(); }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

// The workflow steps build on each other; run them once in order.
void ensure_corpus() {
  static bool done = [] {
    REQUIRE(run_cli("gen-data --out " + ws().p("corpus") + " --count 8 --size 16 --seed 5") == 0);
    return true;
  }();
  (void)done;
}

void ensure_checkpoint() {
  ensure_corpus();
  static bool done = [] {
    REQUIRE(run_cli("train --corpus " + ws().p("corpus") + " --out " + ws().p("toy.ckpt") +
                    " --preset micro --steps 40 --batch 2 --lr 1e-3 --seed 7 --jobs 2") == 0);
    return true;
  }();
  (void)done;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli("remove") == 2);
  CHECK(run_cli("definitely-not-a-subcommand") == 2);
  CHECK(run_cli("remove --no-such-flag x") == 2);
}

TEST_CASE("validation errors exit with code 3") {
  CHECK(run_cli("remove --image a.png --mask m.png --ckpt c.bin -o out --lambda 2.0") == 3);
  CHECK(run_cli("remove --image a.png --mask m.png --ckpt c.bin -o out --s -1") == 3);
}

TEST_CASE("runtime errors exit with code 4") {
  CHECK(run_cli("remove --image " + ws().p("missing.png") + " --mask m.png --ckpt c.bin -o " +
                ws().p("nope")) == 4);
}

TEST_CASE("gen-data writes a readable corpus") {
  ensure_corpus();
  CHECK(fs::exists(ws().dir / "corpus" / "manifest.txt"));
  CHECK(fs::exists(ws().dir / "corpus" / "README.md"));
  CHECK(fs::exists(ws().dir / "corpus" / "run_manifest.txt"));
  auto scenes = read_corpus(ws().dir / "corpus");
  CHECK(scenes.size() == 8);
}

TEST_CASE("train produces a checkpoint plus manifest") {
  ensure_checkpoint();
  CHECK(fs::exists(ws().dir / "toy.ckpt"));
  auto m = Manifest::read(ws().dir / "toy.ckpt.manifest.txt");
  CHECK(m.get_or("command", "") == "train");
  CHECK(m.get_or("seed", "") == "7");
  CHECK(m.find("loss_last") != nullptr);
}

TEST_CASE("remove writes result, manifest and trace") {
  ensure_checkpoint();
  const std::string out = ws().p("removal");
  REQUIRE(run_cli("remove --pipeline sip --image " + ws().p("corpus/scene_00000_composite.png") +
                  " --mask " + ws().p("corpus/scene_00000_mask.png") + " --ckpt " +
                  ws().p("toy.ckpt") + " -o " + out +
                  " --s 3 --lambda 0.5 --steps 6 --ss-cutoff 4 --seed 99 --trace") == 0);
  CHECK(fs::exists(fs::path(out) / "result.png"));
  CHECK(fs::exists(fs::path(out) / "trace.atte"));

  auto m = Manifest::read(fs::path(out) / "manifest.txt");
  CHECK(m.get_or("pipeline", "") == "sip");
  CHECK(m.get_or("s", "") == "3");
  CHECK(m.get_or("lambda", "") == "0.5");
  CHECK(m.get_or("steps", "") == "6");
  CHECK(m.get_or("ss_cutoff", "") == "4");
  CHECK(m.get_or("seed", "") == "99");

  // The untouched region survives the round trip through 8-bit PNGs.
  auto input = read_png(ws().dir / "corpus" / "scene_00000_composite.png");
  auto result = read_png(fs::path(out) / "result.png");
  auto mask = read_mask_png(ws().dir / "corpus" / "scene_00000_mask.png");
  CHECK(background_drift(result, input, mask) == 0.0);
}

TEST_CASE("pipeline defaults land in the manifest") {
  ensure_checkpoint();
  // Steps/cutoff defaults are per pipeline; the image is 16x16 so the run
  // itself would be slow at 50 steps - use a dip default check only.
  const std::string out = ws().p("removal_defaults");
  REQUIRE(run_cli("remove --pipeline dip --image " + ws().p("corpus/scene_00001_composite.png") +
                  " --mask " + ws().p("corpus/scene_00001_mask.png") + " --ckpt " +
                  ws().p("toy.ckpt") + " -o " + out) == 0);
  auto m = Manifest::read(fs::path(out) / "manifest.txt");
  CHECK(m.get_or("steps", "") == "50");
  CHECK(m.get_or("ss_cutoff", "") == "40");
  CHECK(m.get_or("s", "") == "9");
  CHECK(m.get_or("lambda", "") == "0.3");
  CHECK(m.get_or("seed", "") == "123");
}

TEST_CASE("config files feed flags and flags override them") {
  ensure_checkpoint();
  {
    std::ofstream cfg(ws().dir / "remove.cfg");
    cfg << "pipeline=sip\n"
        << "image=" << ws().p("corpus/scene_00002_composite.png") << "\n"
        << "mask=" << ws().p("corpus/scene_00002_mask.png") << "\n"
        << "ckpt=" << ws().p("toy.ckpt") << "\n"
        << "out=" << ws().p("removal_cfg") << "\n"
        << "s=5\n"
        << "steps=6\n"
        << "ss-cutoff=4\n";
  }
  REQUIRE(run_cli("remove --config " + ws().p("remove.cfg")) == 0);
  auto m = Manifest::read(ws().dir / "removal_cfg" / "manifest.txt");
  CHECK(m.get_or("s", "") == "5");
  CHECK(m.get_or("steps", "") == "6");

  REQUIRE(run_cli("remove --config " + ws().p("remove.cfg") + " --s 7 -o " +
                  ws().p("removal_cfg2")) == 0);
  auto m2 = Manifest::read(ws().dir / "removal_cfg2" / "manifest.txt");
  CHECK(m2.get_or("s", "") == "7");
  CHECK(m2.get_or("steps", "") == "6");
}

TEST_CASE("eval sweep writes one row per value") {
  ensure_checkpoint();
  const std::string out = ws().p("evalout");
  REQUIRE(run_cli("eval --corpus " + ws().p("corpus") + " --ckpt " + ws().p("toy.ckpt") + " -o " +
                  out + " --pipeline sip --sweep s=0,3,6,9 --steps 5 --ss-cutoff 4 --limit 2" +
                  " --jobs 2") == 0);
  std::ifstream csv(fs::path(out) / "report.csv");
  REQUIRE(csv.good());
  std::string line;
  int rows = 0;
  std::getline(csv, line);
  CHECK(line.rfind("pipeline,", 0) == 0);
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 4);
  CHECK(fs::exists(fs::path(out) / "report.txt"));
  CHECK(fs::exists(fs::path(out) / "manifest.txt"));
}

TEST_CASE("invert reports round-trip fidelity") {
  ensure_checkpoint();
  const std::string out = ws().p("invert_out");
  REQUIRE(run_cli("invert --image " + ws().p("corpus/scene_00003_composite.png") + " --ckpt " +
                  ws().p("toy.ckpt") + " -o " + out + " --steps 10") == 0);
  CHECK(fs::exists(fs::path(out) / "recon.png"));
  auto m = Manifest::read(fs::path(out) / "manifest.txt");
  // Fidelity itself depends on checkpoint quality; the smoke test only
  // requires a finite, reported error.
  REQUIRE(m.find("max_abs_error") != nullptr);
  CHECK(std::isfinite(std::stod(m.get_or("max_abs_error", "nan"))));
}

TEST_CASE("analyze emits figures from a trace") {
  ensure_checkpoint();
  const std::string removal = ws().p("removal");
  if (!fs::exists(fs::path(removal) / "trace.atte")) {
    REQUIRE(run_cli("remove --pipeline sip --image " + ws().p("corpus/scene_00000_composite.png") +
                    " --mask " + ws().p("corpus/scene_00000_mask.png") + " --ckpt " +
                    ws().p("toy.ckpt") + " -o " + removal +
                    " --s 3 --steps 6 --ss-cutoff 4 --trace") == 0);
  }
  const std::string out = ws().p("figs");
  REQUIRE(run_cli("analyze --trace " + removal + "/trace.atte -o " + out + " --k 3 --scale 2") ==
          0);
  auto m = Manifest::read(fs::path(out) / "manifest.txt");
  CHECK(std::stoi(m.get_or("heatmaps", "0")) > 0);
  CHECK(std::stoi(m.get_or("cluster_panels", "0")) > 0);
  bool found_png = false;
  for (const auto& entry : fs::recursive_directory_iterator(out)) {
    if (entry.path().extension() == ".png") found_png = true;
  }
  CHECK(found_png);
}
