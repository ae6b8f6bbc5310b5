#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "ipsfuse/cli.hpp"
#include "ipsfuse/pnm.hpp"
#include "test_util.hpp"

using ipsfuse::Error;
using ipsfuse::Image;
using ipsfuse::Rng;

namespace {

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out << bytes;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(IPSFUSE_CLI_PATH) + " " + args + " 2>/dev/null";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("pgm reading follows maxval scaling") {
  testutil::TempDir tmp("pnm1");
  std::string p = tmp.str() + "/a.pgm";
  write_bytes(p, std::string("P5 2 2 255\n") + '\x00' + '\xff' + '\x80' + '\x40');
  Image img = ipsfuse::read_image(p);
  REQUIRE(img.height == 2);
  REQUIRE(img.width == 2);
  REQUIRE(img.channels == 1);
  CHECK(img.pixels[0] == 0.0);
  CHECK(img.pixels[1] == 1.0);
  CHECK(img.pixels[2] == Catch::Approx(128.0 / 255.0).margin(1e-12));
  CHECK(img.pixels[3] == Catch::Approx(64.0 / 255.0).margin(1e-12));
}

TEST_CASE("header comments and whitespace are tolerated") {
  testutil::TempDir tmp("pnm2");
  std::string p = tmp.str() + "/c.pgm";
  write_bytes(p, std::string("P5\n# a comment\n 2 # inline\n2\n255\n") + "\x01\x02\x03\x04");
  Image img = ipsfuse::read_image(p);
  CHECK(img.width == 2);
  CHECK(img.height == 2);
}

TEST_CASE("16-bit samples scale by 1/65535 and are big-endian") {
  testutil::TempDir tmp("pnm3");
  std::string p = tmp.str() + "/w.pgm";
  // single pixel with value 0x0100 = 256
  write_bytes(p, std::string("P5 1 1 65535\n") + '\x01' + '\x00');
  Image img = ipsfuse::read_image(p);
  CHECK(img.pixels[0] == Catch::Approx(256.0 / 65535.0).margin(1e-12));

  ipsfuse::write_image(tmp.str() + "/w2.pgm", img, 65535);
  Image back = ipsfuse::read_image(tmp.str() + "/w2.pgm");
  CHECK(back.pixels[0] == img.pixels[0]);
}

TEST_CASE("8-bit write/read round trip is bit-exact") {
  testutil::TempDir tmp("pnm4");
  Rng rng(3);
  for (std::size_t j : {std::size_t{1}, std::size_t{3}}) {
    Image img(9, 7, j);
    for (auto& v : img.pixels) v = static_cast<double>(rng.uniform_int(256)) / 255.0;
    std::string p1 = tmp.str() + "/r1." + (j == 1 ? "pgm" : "ppm");
    std::string p2 = tmp.str() + "/r2." + (j == 1 ? "pgm" : "ppm");
    ipsfuse::write_image(p1, img);
    Image mid = ipsfuse::read_image(p1);
    CHECK(mid.pixels == img.pixels);
    ipsfuse::write_image(p2, mid);
    CHECK(read_bytes(p1) == read_bytes(p2));
  }
}

TEST_CASE("each failure mode has its own diagnostic") {
  testutil::TempDir tmp("pnm5");
  SECTION("missing file") {
    try {
      ipsfuse::read_image(tmp.str() + "/nope.pgm");
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("cannot open") != std::string::npos);
    }
  }
  SECTION("malformed header") {
    std::string p = tmp.str() + "/bad.pgm";
    write_bytes(p, "P7 2 2 255\n0000");
    try {
      ipsfuse::read_image(p);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("malformed header") != std::string::npos);
    }
    write_bytes(p, "P5 2 x 255\n0000");
    CHECK_THROWS_AS(ipsfuse::read_image(p), Error);
  }
  SECTION("truncated payload") {
    std::string p = tmp.str() + "/short.pgm";
    write_bytes(p, "P5 4 4 255\nab");
    try {
      ipsfuse::read_image(p);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
}

TEST_CASE("synthesize is seed-reproducible and p=0 is the identity") {
  testutil::TempDir tmp("synth");
  std::string in_dir = tmp.str() + "/in";
  std::filesystem::create_directories(in_dir);
  Rng rng(8);
  for (int i = 0; i < 3; ++i) {
    Image img = testutil::textured_image(rng, 40, 40);
    // quantize so file round trips are exact
    for (auto& v : img.pixels) v = std::round(v * 255.0) / 255.0;
    ipsfuse::write_image(in_dir + "/img" + std::to_string(i) + ".pgm", img);
  }

  SECTION("same seed twice gives identical output bytes") {
    ipsfuse::SynthesizeOptions opt;
    opt.input_dir = in_dir;
    opt.shuffle.rng_seed = 4242;
    opt.out_dir = tmp.str() + "/outA";
    ipsfuse::cmd_synthesize(opt);
    opt.out_dir = tmp.str() + "/outB";
    ipsfuse::cmd_synthesize(opt);
    for (const auto& e : std::filesystem::directory_iterator(tmp.str() + "/outA")) {
      auto other = tmp.str() + "/outB/" + e.path().filename().string();
      CHECK(read_bytes(e.path().string()) == read_bytes(other));
    }
  }

  SECTION("p=0 leaves the sharp branch identical to the source file") {
    ipsfuse::SynthesizeOptions opt;
    opt.input_dir = in_dir;
    opt.out_dir = tmp.str() + "/out0";
    opt.shuffle.mask_zero_probability = 0.0;
    ipsfuse::cmd_synthesize(opt);
    CHECK(read_bytes(tmp.str() + "/out0/img0_if.pgm") == read_bytes(in_dir + "/img0.pgm"));
  }

  SECTION("manifest seeds replay to identical masks") {
    ipsfuse::SynthesizeOptions opt;
    opt.input_dir = in_dir;
    opt.out_dir = tmp.str() + "/outM";
    opt.shuffle.rng_seed = 77;
    ipsfuse::cmd_synthesize(opt);
    auto manifest = nlohmann::json::parse(std::ifstream(tmp.str() + "/outM/manifest.json"));
    CHECK(manifest["seed"] == 77);
    for (const auto& f : manifest["files"]) {
      Image src = ipsfuse::read_image(f["source"].get<std::string>());
      auto rec = ipsfuse::synthesize_one(src, opt.shuffle, f["seed"].get<std::uint64_t>());
      CHECK(rec.kernel == f["kernel"].get<int>());
      Image written =
          ipsfuse::read_image(tmp.str() + "/outM/" + f["stem"].get<std::string>() + "_mask.pgm");
      CHECK(ipsfuse::mask_from_image(written).bits == rec.mask.bits);
    }
  }
}

TEST_CASE("cli binary: exit codes and selftest") {
  testutil::TempDir tmp("cli");

  SECTION("usage errors exit 1") {
    CHECK(run_cli("--no-such-flag") == 1);
    CHECK(run_cli("fuse --checkpoint x") == 1);  // missing required args
  }

  SECTION("data errors exit 2") {
    CHECK(run_cli("synthesize --input " + tmp.str() + "/missing --out " + tmp.str() + "/o") == 2);
    CHECK(run_cli("fuse --checkpoint /nonexistent.ckpt --out " + tmp.str() +
                  "/f.pgm a.pgm b.pgm") == 2);
  }

  SECTION("eval of a reference against itself: psnr inf, ssim 1") {
    std::string dir = tmp.str() + "/same";
    std::filesystem::create_directories(dir);
    Rng rng(5);
    Image img = testutil::textured_image(rng, 32, 32);
    ipsfuse::write_image(dir + "/x.pgm", img);

    ipsfuse::EvalOptions ev;
    ev.fused_dir = dir;
    ev.reference_dir = dir;
    ev.metrics = {"psnr", "ssim"};
    ev.out_dir = tmp.str() + "/report";
    CHECK(ipsfuse::cmd_eval(ev) == 0);

    std::string csv = read_bytes(tmp.str() + "/report/report.csv");
    CHECK(csv.find("x,psnr,inf") != std::string::npos);
    CHECK(csv.find("x,ssim,1") != std::string::npos);
    CHECK(csv.find("q_sf") == std::string::npos);  // unrequested metric filtered out

    auto js = nlohmann::json::parse(std::ifstream(tmp.str() + "/report/report.json"));
    CHECK(js["images"][0]["metrics"]["psnr"] == "inf");
  }

  SECTION("eval rejects unpaired files by name") {
    std::string fdir = tmp.str() + "/fused", rdir = tmp.str() + "/refs";
    std::filesystem::create_directories(fdir);
    std::filesystem::create_directories(rdir);
    Rng rng(5);
    ipsfuse::write_image(fdir + "/only_here.pgm", testutil::textured_image(rng, 16, 16));
    ipsfuse::EvalOptions ev;
    ev.fused_dir = fdir;
    ev.reference_dir = rdir;
    ev.metrics = {"psnr"};
    try {
      ipsfuse::cmd_eval(ev);
      FAIL("expected unpaired error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("only_here") != std::string::npos);
    }
  }
}
