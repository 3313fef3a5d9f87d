#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "gtest/gtest.h"
#include "mp/experiment.hpp"

// Runs the mpprobe binary as a subprocess and checks files, stdout and exit codes.

namespace mp {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code = -1;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mp_cli_test_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  Result run(const std::string& args) const {
    const std::string cmd = "cd '" + dir_.string() + "' && '" MPPROBE_PATH "' " + args + " 2>/dev/null";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  ojson json_file(const std::string& name) const { return ojson::parse(read_file_bytes(path(name))); }

  void synth_cov_sep() const {
    ASSERT_EQ(run("synth --regime cov-sep --classes 2 --rho 0.8 --seed 1 --out cov.mpft").code, 0);
  }

  fs::path dir_;
};

TEST_F(Cli, SynthWritesReadableHeader) {
  const Result r = run("synth --regime cov-sep --classes 2 --rho 0.8 --out d.mpft");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("classes=2"), std::string::npos);
  const FeatureDataset ds = read_feature_file(path("d.mpft"));
  EXPECT_EQ(ds.header.class_count, 2u);
}

TEST_F(Cli, SynthMissingOutIsUsageError) { EXPECT_EQ(run("synth --regime cov-sep --classes 2").code, 1); }

TEST_F(Cli, SynthBadValuesAreUsageErrors) {
  EXPECT_EQ(run("synth --regime spiral --out x.mpft").code, 1);
  EXPECT_EQ(run("synth --classes two --out x.mpft").code, 1);
  EXPECT_EQ(run("synth --rho 1.5 --out x.mpft").code, 1);
}

TEST_F(Cli, SynthIsByteIdentical) {
  ASSERT_EQ(run("synth --regime mixed --classes 4 --dim 8 --seed 9 --with-cls --per-class 20 --out a.mpft").code, 0);
  ASSERT_EQ(run("synth --regime mixed --classes 4 --dim 8 --seed 9 --with-cls --per-class 20 --out b.mpft").code, 0);
  EXPECT_EQ(read_file_bytes(path("a.mpft")), read_file_bytes(path("b.mpft")));
}

TEST_F(Cli, TrainSeparatesCovarianceWhereGapCannot) {
  synth_cov_sep();
  ASSERT_EQ(run("train --head mp --dhat 8 --heads 2 --epochs 20 --seed 1 --features cov.mpft --out mp").code, 0);
  ASSERT_EQ(run("train --head lp-gap --epochs 20 --seed 1 --features cov.mpft --out gap").code, 0);
  const ojson mp = json_file("mp/report.json"), gap = json_file("gap/report.json");
  EXPECT_GE(mp["final"]["accuracy"].get<double>(), 0.9);
  const double g = gap["final"]["accuracy"].get<double>();
  EXPECT_GE(g, 0.40);
  EXPECT_LE(g, 0.60);
  EXPECT_NEAR(mp["step0_loss"].get<double>(), std::log(2.0), 1e-9);
  EXPECT_NEAR(gap["step0_loss"].get<double>(), std::log(2.0), 1e-9);
}

TEST_F(Cli, StepZeroLossIsLogClassCount) {
  ASSERT_EQ(run("synth --regime mean-sep --classes 5 --dim 8 --per-class 10 --out m.mpft").code, 0);
  ASSERT_EQ(run("train --head mp --dhat 8 --heads 2 --epochs 1 --features m.mpft --out r").code, 0);
  EXPECT_NEAR(json_file("r/report.json")["step0_loss"].get<double>(), std::log(5.0), 1e-9);
}

TEST_F(Cli, ConfigErrorsStopBeforeTraining) {
  synth_cov_sep();
  EXPECT_EQ(run("train --head mp --dhat 6 --heads 2 --features cov.mpft --out r").code, 1);
  EXPECT_EQ(run("train --head lp-cls --features cov.mpft --out r").code, 1);
  EXPECT_EQ(run("train --head nope --features cov.mpft").code, 1);
  EXPECT_EQ(run("train --head mp --heads 2").code, 1);
  EXPECT_FALSE(fs::exists(path("r")));
}

TEST_F(Cli, DataErrorsExitTwo) {
  EXPECT_EQ(run("train --head lp-gap --features missing.mpft").code, 2);
  std::ofstream(path("junk.mpft")) << "not a feature file";
  EXPECT_EQ(run("train --head lp-gap --features junk.mpft").code, 2);
  synth_cov_sep();
  const std::string bytes = read_file_bytes(path("cov.mpft"));
  write_bytes(path("short.mpft"), bytes.substr(0, bytes.size() - 10));
  EXPECT_EQ(run("train --head lp-gap --features short.mpft").code, 2);
}

TEST_F(Cli, EvalReproducesReportAndIsRepeatable) {
  synth_cov_sep();
  ASSERT_EQ(run("train --head mp --dhat 8 --heads 2 --epochs 5 --seed 1 --features cov.mpft --out r").code, 0);
  const Result a = run("eval --model r/model.mpck --features cov.mpft");
  const Result b = run("eval --model r/model.mpck --features cov.mpft");
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  const ojson e = ojson::parse(a.out), rep = json_file("r/report.json");
  EXPECT_EQ(e["accuracy"].get<double>(), rep["final"]["accuracy"].get<double>());
  EXPECT_EQ(e["loss"].get<double>(), rep["final"]["loss"].get<double>());
  EXPECT_EQ(e["per_class_accuracy"], rep["final"]["per_class_accuracy"]);
  EXPECT_EQ(e["config_hash"], rep["config_hash"]);
}

TEST_F(Cli, EvalRejectsEmptyAndMismatchedData) {
  synth_cov_sep();
  ASSERT_EQ(run("train --head mp --dhat 8 --heads 2 --epochs 1 --features cov.mpft --out r").code, 0);
  FeatureDataset empty = read_feature_file(path("cov.mpft")).subset({});
  write_feature_file(path("empty.mpft"), empty);
  EXPECT_EQ(run("eval --model r/model.mpck --features empty.mpft").code, 1);
  ASSERT_EQ(run("synth --regime cov-sep --classes 2 --dim 12 --per-class 10 --out wide.mpft").code, 0);
  EXPECT_EQ(run("eval --model r/model.mpck --features wide.mpft").code, 1);
  write_bytes(path("bad.mpck"), "MPCK garbage");
  EXPECT_EQ(run("eval --model bad.mpck --features cov.mpft").code, 2);
}

TEST_F(Cli, IdenticalRunsAreByteIdentical) {
  synth_cov_sep();
  const std::string args = "train --head mp --dhat 8 --heads 2 --epochs 4 --seed 3 --features cov.mpft --out ";
  ASSERT_EQ(run(args + "a").code, 0);
  ASSERT_EQ(run(args + "b").code, 0);
  EXPECT_EQ(read_file_bytes(path("a/model.mpck")), read_file_bytes(path("b/model.mpck")));
  EXPECT_EQ(strip_wall_clock(json_file("a/report.json")).dump(), strip_wall_clock(json_file("b/report.json")).dump());
}

TEST_F(Cli, ReportAloneReproducesTheRun) {
  synth_cov_sep();
  ASSERT_EQ(run("train --head gcp --gcp-dim 4 --epochs 3 --seed 2 --lr 0.02 --features cov.mpft --out a").code, 0);
  ASSERT_EQ(run("train --from-report a/report.json --out b").code, 0);
  EXPECT_EQ(read_file_bytes(path("a/model.mpck")), read_file_bytes(path("b/model.mpck")));
  EXPECT_EQ(strip_wall_clock(json_file("a/report.json")).dump(), strip_wall_clock(json_file("b/report.json")).dump());
  // A changed feature file no longer matches the pinned digest.
  ASSERT_EQ(run("synth --regime cov-sep --classes 2 --rho 0.5 --seed 1 --out cov.mpft").code, 0);
  EXPECT_EQ(run("train --from-report a/report.json --out c").code, 2);
}

TEST_F(Cli, MpPlusStartsAtFrozenAndKeepsUp) {
  synth_cov_sep();
  const std::string common = "--head mp --dhat 8 --heads 2 --epochs 20 --seed 1 --features cov.mpft";
  ASSERT_EQ(run("train-mpplus " + common + " --dh 8 --out plus").code, 0);
  ASSERT_EQ(run("train-mpplus " + common + " --no-psrp --out frozen").code, 0);
  const ojson plus = json_file("plus/report.json"), frozen = json_file("frozen/report.json");
  EXPECT_EQ(plus["init_eval"].dump(), plus["frozen_init_eval"].dump());
  EXPECT_EQ(plus["params"]["trainable"], plus["params"]["closed_form"]);
  EXPECT_GT(plus["params"]["psrp"].get<std::size_t>(), 0u);
  EXPECT_GE(plus["final"]["accuracy"].get<double>(), frozen["final"]["accuracy"].get<double>() - 0.01);
  const Result e = run("eval --model plus/model.mpck --features cov.mpft");
  ASSERT_EQ(e.code, 0);
  EXPECT_EQ(ojson::parse(e.out)["accuracy"].get<double>(), plus["final"]["accuracy"].get<double>());
}

TEST_F(Cli, AblateProbingEmitsSevenRowsInOrder) {
  ASSERT_EQ(run("synth --regime mixed --classes 4 --dim 8 --per-class 15 --with-cls --out m.mpft").code, 0);
  const Result r = run("ablate --suite probing --features m.mpft --dhat 8 --heads 2 --epochs 1 --out abl");
  ASSERT_EQ(r.code, 0);
  const ojson rep = json_file("abl/ablation.json");
  ASSERT_EQ(rep["rows"].size(), 7u);
  const char* labels[] = {"CLS_token", "GAP", "GCP", "MHC3", "CLS_token + GAP", "CLS_token + GCP", "MP"};
  std::size_t last = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(rep["rows"][i]["label"], labels[i]);
    const std::size_t at = r.out.find(std::string(labels[i]) + " ", last);
    ASSERT_NE(at, std::string::npos) << labels[i];
    last = at + 1;
  }
}

TEST_F(Cli, AblateSuiteErrors) {
  synth_cov_sep();
  EXPECT_EQ(run("ablate --suite tables --features cov.mpft").code, 1);
  EXPECT_EQ(run("ablate --features cov.mpft").code, 1);
  EXPECT_EQ(run("ablate --suite dhat --heads 2 --features cov.mpft").code, 1);  // d=8 too narrow
}

TEST_F(Cli, NoSubcommandIsUsageError) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

}  // namespace
}  // namespace mp
