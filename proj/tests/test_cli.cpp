#include "doctest.h"

#include "minutiae/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace minutiae;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "minutiae_test_cli";

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const fs::path log = kRoot / "stdout.txt";
  const std::string cmd = std::string("MINUTIAE_LOG=quiet ") + MINUTIAE_CLI + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream s;
  s << in.rdbuf();
  r.out = s.str();
  return r;
}

std::string p(const fs::path& path) { return path.string(); }

// Shared small corpus and models, built once.
void ensure_models() {
  if (fs::exists(kRoot / "m" / "fine.ckpt")) return;
  fs::remove_all(kRoot);
  fs::create_directories(kRoot);
  REQUIRE(run("synth --out " + p(kRoot / "c") + " --train 6 --test 3 --seed 5").code == 0);
  REQUIRE(run("train --corpus " + p(kRoot / "c") + " --out " + p(kRoot / "m") + " --steps 6").code == 0);
}

}  // namespace

TEST_CASE("synth writes a reproducible corpus") {
  ensure_models();
  const fs::path a = kRoot / "s1", b = kRoot / "s2";
  fs::remove_all(a);
  fs::remove_all(b);
  CHECK(run("synth --train 3 --test 2 --seed 7 --out " + p(a)).code == 0);
  CHECK(run("synth --train 3 --test 2 --seed 7 --out " + p(b)).code == 0);
  const auto ma = read_manifest(a), mb = read_manifest(b);
  CHECK(ma.size() == 5);
  CHECK(ma == mb);
  CHECK(file_checksum(a / "manifest.tsv") == file_checksum(b / "manifest.tsv"));
  CHECK(fs::exists(a / "run.log"));
}

TEST_CASE("usage errors exit with 2") {
  ensure_models();
  CHECK(run("synth --train 3").code == 2);
  CHECK(run("").code == 2);
  CHECK(run("bogus").code == 2);
  CHECK(run("extract --corpus " + p(kRoot / "c") + " --out " + p(kRoot / "x")).code == 2);
  CHECK(run("eval --corpus " + p(kRoot / "c") + " --setting 9").code == 2);
  CHECK(run("train --corpus " + p(kRoot / "c") + " --out " + p(kRoot / "x") + " --stage both --resume " +
            p(kRoot / "m" / "coarse.ckpt"))
            .code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("runtime failures exit with 1") {
  ensure_models();
  const Run r = run("extract --corpus " + p(kRoot / "c") + " --model-coarse " + p(kRoot / "nope.ckpt") +
                    " --skip-finenet --out " + p(kRoot / "x"));
  CHECK(r.code == 1);
  CHECK(r.out.find("nope.ckpt") != std::string::npos);
  CHECK(run("train --corpus " + p(kRoot / "missing") + " --out " + p(kRoot / "x")).code == 1);
}

TEST_CASE("train writes checkpoints, loss curves, patches and a run log") {
  ensure_models();
  const fs::path m = kRoot / "m";
  for (const char* f : {"coarse.ckpt", "fine.ckpt", "loss_coarse.csv", "loss_fine.csv", "run_train.log"})
    CHECK(fs::exists(m / f));
  CHECK(fs::exists(m / "patches" / "manifest.tsv"));
  std::ifstream csv(m / "loss_coarse.csv");
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 6);
  std::ifstream log(m / "run_train.log");
  std::ostringstream text;
  text << log.rdbuf();
  CHECK(text.str().find("version=") != std::string::npos);
  CHECK(text.str().find("duration_s=") != std::string::npos);
  CHECK(text.str().find("fine.t2=64") != std::string::npos);
}

TEST_CASE("coarse training lowers the smoothed loss") {
  ensure_models();
  const fs::path out = kRoot / "curve";
  REQUIRE(run("train --stage coarse --corpus " + p(kRoot / "c") + " --out " + p(out) + " --steps 60").code == 0);
  std::ifstream csv(out / "loss_coarse.csv");
  std::string line;
  std::getline(csv, line);
  std::vector<double> loss;
  while (std::getline(csv, line)) loss.push_back(std::stod(line.substr(line.find(',') + 1)));
  REQUIRE(loss.size() == 60);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 15; ++i) {
    head += loss[static_cast<size_t>(i)];
    tail += loss[loss.size() - 15 + static_cast<size_t>(i)];
  }
  CHECK(tail < head);
}

TEST_CASE("resumed training reproduces the uninterrupted checkpoint") {
  ensure_models();
  const std::string corpus = " --corpus " + p(kRoot / "c");
  for (const char* stage : {"coarse", "fine"}) {
    const fs::path whole = kRoot / ("whole_" + std::string(stage)), part = kRoot / ("part_" + std::string(stage));
    const std::string s = std::string(" --stage ") + stage;
    const std::string patches = std::string(stage) == "fine" ? " --patches " + p(kRoot / "m" / "patches") : "";
    REQUIRE(run("train" + s + corpus + patches + " --steps 4 --out " + p(whole)).code == 0);
    REQUIRE(run("train" + s + corpus + patches + " --steps 4 --until 2 --out " + p(part)).code == 0);
    const fs::path ck = part / (std::string(stage) + ".ckpt");
    const fs::path first = part / "first.ckpt";
    fs::copy_file(ck, first, fs::copy_options::overwrite_existing);
    REQUIRE(run("train" + s + corpus + patches + " --steps 4 --resume " + p(first) + " --out " + p(part)).code == 0);
    CHECK(file_checksum(whole / (std::string(stage) + ".ckpt")) == file_checksum(ck));
  }
}

TEST_CASE("extract, render and evaluate") {
  ensure_models();
  const std::string models =
      " --model-coarse " + p(kRoot / "m" / "coarse.ckpt") + " --model-fine " + p(kRoot / "m" / "fine.ckpt");
  const fs::path t1 = kRoot / "t1", t2 = kRoot / "t2";
  REQUIRE(run("extract --corpus " + p(kRoot / "c") + models + " --render --out " + p(t1)).code == 0);
  REQUIRE(run("extract --corpus " + p(kRoot / "c") + models + " --render --out " + p(t2)).code == 0);
  for (const auto& e : read_manifest(kRoot / "c")) {
    if (e.split != "test") continue;
    CHECK(file_checksum(t1 / (e.id + ".min")) == file_checksum(t2 / (e.id + ".min")));
    const GrayImage overlay = read_pgm(t1 / (e.id + "_overlay.pgm"));
    const GrayImage score = read_pgm(t1 / (e.id + "_score.pgm"));
    CHECK(overlay.width() == 128);
    CHECK(overlay.height() == 128);
    CHECK(score.width() == 128);
    CHECK(score.height() == 128);
  }

  SUBCASE("blank image gives an empty template") {
    write_pgm(kRoot / "blank.pgm", GrayImage(96, 80, 0.5f));
    REQUIRE(run("extract --image " + p(kRoot / "blank.pgm") + models + " --out " + p(kRoot / "tb")).code == 0);
    const MinutiaSet s = read_template(kRoot / "tb" / "blank.min");
    CHECK(s.size() == 0);
    CHECK(s.width == 96);
    CHECK(s.height == 80);
  }

  SUBCASE("skip-finenet keeps the coarse output") {
    const fs::path tc = kRoot / "tc";
    REQUIRE(run("extract --corpus " + p(kRoot / "c") + models + " --skip-finenet --out " + p(tc)).code == 0);
    const MinutiaSet s = read_template(tc / "img_0000.min");
    Models m = load_models(kRoot / "m" / "coarse.ckpt", std::nullopt);
    const GrayImage img = read_pgm(kRoot / "c" / "test" / "img_0000.pgm");
    CHECK(encode_template(s) == encode_template(extract_coarse(img, *m.coarse)));
  }

  SUBCASE("perfect predictions score one under every named setting") {
    const Run r = run("eval --corpus " + p(kRoot / "c") + " --pred " + p(kRoot / "c" / "test") + " --out " +
                      p(kRoot / "perfect.txt"));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("Setting 1 (D=8,O=10)") != std::string::npos);
    CHECK(r.out.find("Setting 2 (D=12,O=20)") != std::string::npos);
    CHECK(r.out.find("Setting 3 (D=16,O=30)") != std::string::npos);
    std::ifstream in(kRoot / "perfect.txt");
    std::ostringstream text;
    text << in.rdbuf();
    CHECK(text.str().find("setting.3.f1=1\n") != std::string::npos);
    CHECK(text.str().find("setting.1.precision=1\n") != std::string::npos);
  }

  SUBCASE("missing predictions are listed") {
    fs::create_directories(kRoot / "empty");
    const Run r = run("eval --corpus " + p(kRoot / "c") + " --pred " + p(kRoot / "empty"));
    CHECK(r.code == 1);
    CHECK(r.out.find("img_0000") != std::string::npos);
  }

  SUBCASE("nms ablation prints two variants") {
    const Run r = run("eval --corpus " + p(kRoot / "c") + models + " --ablation nms --setting 3 --pr-curve " +
                      p(kRoot / "pr.csv"));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("nms_iou") != std::string::npos);
    CHECK(r.out.find("nms_distance") != std::string::npos);
    CHECK(fs::exists(kRoot / "pr.csv"));
  }

  SUBCASE("render draws onto an image of the same size") {
    REQUIRE(run("render --image " + p(kRoot / "c" / "test" / "img_0001.pgm") + " --gt " +
                p(kRoot / "c" / "test" / "img_0001.min") + " --template " + p(t1 / "img_0001.min") +
                " --model-coarse " + p(kRoot / "m" / "coarse.ckpt") + " --out " + p(kRoot / "r" / "view"))
                .code == 0);
    CHECK(read_pgm(kRoot / "r" / "view_overlay.pgm").width() == 128);
    CHECK(read_pgm(kRoot / "r" / "view_score.pgm").height() == 128);
  }
}

TEST_CASE("overlay marks are burned at extreme intensities") {
  const GrayImage img(40, 40, 0.5f);
  MinutiaSet det{40, 40, {Minutia{20, 20, Angle::direction(0.0), 0.9, Provenance::fine}}};
  MinutiaSet gt{40, 40, {Minutia{10, 10, Angle::direction(0.0), 1.0, Provenance::ground_truth}}};
  const GrayImage o = render_overlay(img, det, &gt);
  CHECK(o(17, 17) == 1.0f);  // square corner
  CHECK(o(28, 20) == 1.0f);  // direction tick
  CHECK(o(10, 10) == 0.0f);  // cross centre
  CHECK(o(0, 39) == 0.5f);
  const Plane fused = Plane::Constant(3, 3, 0.25f);
  const GrayImage s = render_score_map(fused, 40, 44);
  CHECK(s.width() == 40);
  CHECK(s.height() == 44);
  CHECK(s(5, 30) == doctest::Approx(0.25));
}
