#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <sys/wait.h>

#include "prtg/dataset.hpp"
#include "prtg/field.hpp"
#include "prtg/oracle.hpp"

using namespace prtg;
namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "prtg_test_cli";

int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "\"" PRTG_CLI_PATH "\" " + args + " > \"" +
                          (kDir / "last.log").string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Dataset and a two-step checkpoint shared by the cases below.
struct Fixture {
  Fixture() {
    fs::remove_all(kDir);
    fs::create_directories(kDir);
    OracleScene scene;
    scene.primitives.push_back(Primitive{});
    write_text(kDir / "scene.json", scene_to_json(scene));
    write_text(kDir / "rig.json", R"({
      "width": 12, "height": 12, "fov_deg": 40, "distance": 4,
      "train_cameras": 8, "min_elevation_deg": 5, "max_elevation_deg": 65,
      "test_cameras": [[45, 15]],
      "train_lights": [0, 14, 28, 42], "test_lights": [213],
      "eval_lights": 1, "light_distance": 100, "seed": 0})");
    write_text(kDir / "train.cfg",
               "steps = 2\nbatch = 16\nn_coarse = 8\nn_fine = 8\npos_freqs = 2\ndir_freqs = 1\n"
               "width = 16\ndepth = 2\nskip_layer = 1\nhead_width = 8\nckpt_every = 1\n");
    gen = run("generate-data " + q(kDir / "scene.json") + " " + q(kDir / "rig.json") + " " + q(kDir / "ds"));
    tr = run("train " + q(kDir / "ds") + " " + q(kDir / "train.cfg") + " " + q(kDir / "run"));
  }
  int gen = -1, tr = -1;
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::string render_args(const std::string& out) {
  return "render-olat " + q(kDir / "run" / "checkpoint.bin") + " --dataset " + q(kDir / "ds") +
         " --view 0 --light 0,0,1 --n-coarse 8 --n-fine 8 --out " + q(kDir / out);
}

}  // namespace

TEST_CASE("generate, train, render, relight and evaluate") {
  const Fixture& f = fixture();
  CHECK(f.gen == 0);
  CHECK(f.tr == 0);
  CHECK(fs::exists(kDir / "ds" / "manifest.json"));
  CHECK(fs::exists(kDir / "run" / "checkpoint.bin"));
  CHECK(fs::exists(kDir / "run" / "adam.bin"));
  CHECK(fs::exists(kDir / "run" / "loss.csv"));

  CHECK(run(render_args("olat.pfm")) == 0);
  const Image img = read_pfm(kDir / "olat.pfm");
  CHECK(img.width == 12);
  CHECK(img.height == 12);

  Image env(8, 4, 3);
  std::fill(env.data.begin(), env.data.end(), 0.5f);
  write_pfm(kDir / "env.pfm", env);
  CHECK(run("relight-envmap " + q(kDir / "run" / "checkpoint.bin") + " " + q(kDir / "env.pfm") + " --lights 4 --dataset " +
            q(kDir / "ds") + " --view 0 --n-coarse 8 --n-fine 8 --out " + q(kDir / "relit.pfm") + " --lights-json " +
            q(kDir / "lights.json")) == 0);
  CHECK(read_pfm(kDir / "relit.pfm").width == 12);
  CHECK(read_bytes(kDir / "lights.json").find("energy") != std::string::npos);

  CHECK(run("eval " + q(kDir / "run" / "checkpoint.bin") + " " + q(kDir / "ds") + " --n-coarse 8 --n-fine 8 --report " +
            q(kDir / "report.json")) == 0);
  CHECK(read_bytes(kDir / "report.json").find("mean_psnr") != std::string::npos);

  // Resuming a finished run is a no-op that still succeeds.
  CHECK(run("train --resume " + q(kDir / "ds") + " " + q(kDir / "train.cfg") + " " + q(kDir / "run")) == 0);
}

TEST_CASE("thread count does not change results") {
  fixture();
  CHECK(run(render_args("t1.pfm"), "PRTG_THREADS=1") == 0);
  CHECK(run(render_args("t3.pfm"), "PRTG_THREADS=3") == 0);
  CHECK(run(render_args("t4.pfm") + " --threads 4") == 0);
  const std::string a = read_bytes(kDir / "t1.pfm");
  CHECK(!a.empty());
  CHECK(a == read_bytes(kDir / "t3.pfm"));
  CHECK(a == read_bytes(kDir / "t4.pfm"));
}

TEST_CASE("invalid input exits with 2") {
  fixture();
  CHECK(run("") == 2);
  CHECK(run("no-such-command") == 2);
  CHECK(run("train " + q(kDir / "missing") + " " + q(kDir / "train.cfg") + " " + q(kDir / "x")) == 2);
  write_text(kDir / "bad.cfg", "steps = 2\nlearning_rate = 1\n");
  CHECK(run("train " + q(kDir / "ds") + " " + q(kDir / "bad.cfg") + " " + q(kDir / "x")) == 2);
  CHECK(run("render-olat " + q(kDir / "run" / "checkpoint.bin") + " --dataset " + q(kDir / "ds") +
            " --view 0 --light 0,0,2 --out " + q(kDir / "x.pfm")) == 2);
  CHECK(run("render-olat " + q(kDir / "run" / "checkpoint.bin") + " --dataset " + q(kDir / "ds") +
            " --view 99 --light 0,0,1 --out " + q(kDir / "x.pfm")) == 2);
  CHECK(run("relight-envmap " + q(kDir / "run" / "checkpoint.bin") + " " + q(kDir / "missing.pfm") + " --dataset " +
            q(kDir / "ds") + " --view 0 --out " + q(kDir / "x.pfm")) == 2);
  CHECK(run("eval " + q(kDir / "scene.json") + " " + q(kDir / "ds") + " --report " + q(kDir / "x.json")) == 2);
}

TEST_CASE("non-finite parameters exit with 3") {
  fixture();
  // Overwrite the first stored weight of a copied checkpoint with NaN.
  std::string bytes = read_bytes(kDir / "run" / "checkpoint.bin");
  const std::size_t header = 4 + 4 + 6 * 4 + 4;
  REQUIRE(bytes.size() > header + 4);
  const float nan = std::numeric_limits<float>::quiet_NaN();
  bytes.replace(header, 4, reinterpret_cast<const char*>(&nan), 4);
  std::ofstream(kDir / "nan.bin", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  CHECK(run("eval " + q(kDir / "nan.bin") + " " + q(kDir / "ds") + " --report " + q(kDir / "x.json")) == 3);
  CHECK(run("render-olat " + q(kDir / "nan.bin") + " --dataset " + q(kDir / "ds") + " --view 0 --light 0,0,1 --out " +
            q(kDir / "x.pfm")) == 3);
}
