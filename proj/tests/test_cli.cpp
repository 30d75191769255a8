#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "epban/cli.hpp"

namespace epban {
namespace {

namespace fs = std::filesystem;

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "epban");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

std::string first_line(const fs::path& p) {
    const auto s = slurp(p);
    return s.substr(0, s.find('\n'));
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        root = fs::temp_directory_path() / ("epban_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    void TearDown() override { fs::remove_all(root); }
    std::string at(const std::string& rel) const { return (root / rel).string(); }
    fs::path root;
};

TEST_F(Cli, NoArgumentsPrintsUsage) {
    const auto r = cli({});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST_F(Cli, UnknownSubcommandOrFlag) {
    auto r = cli({"frobnicate", "--out", at("x")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("unknown subcommand 'frobnicate'"), std::string::npos);
    r = cli({"gen-data", "--out", at("x"), "--bogus", "1"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
    EXPECT_EQ(cli({"gen-data"}).code, 1);  // --out is required
    EXPECT_EQ(cli({"gradcheck", "--out", at("g"), "--dtype", "f16"}).code, 1);
    EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST_F(Cli, GenDataIsByteStableAndHeaderFirst) {
    ASSERT_EQ(cli({"gen-data", "--refs", "4", "--variants", "3", "--size", "16", "--seed", "11", "--out", at("a")}).code, 0);
    ASSERT_EQ(cli({"gen-data", "--refs", "4", "--variants", "3", "--size", "16", "--seed", "11", "--out", at("a2")}).code, 0);
    EXPECT_EQ(slurp(root / "a/manifest.csv"), slurp(root / "a2/manifest.csv"));
    EXPECT_EQ(slurp(root / "a/sr/sr_001_02.ppm"), slurp(root / "a2/sr/sr_001_02.ppm"));
    const auto head = first_line(root / "a/run.log");
    EXPECT_EQ(head.rfind(std::string("epban ") + kVersion + " seed=11 command=gen-data", 0), 0u) << head;
    for (const char* kv : {" refs=4", " variants=3", " size=16"}) EXPECT_NE(head.find(kv), std::string::npos) << kv;
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
    std::ofstream(root / "c.cfg") << "# dataset\nrefs = 5\nvariants=2\n--size=16\nseed=3\n";
    ASSERT_EQ(cli({"gen-data", "--config", at("c.cfg"), "--variants", "3", "--out", at("d")}).code, 0);
    const auto head = first_line(root / "d/run.log");
    EXPECT_NE(head.find("seed=3"), std::string::npos) << head;
    EXPECT_NE(head.find(" refs=5"), std::string::npos) << head;
    EXPECT_NE(head.find(" variants=3"), std::string::npos) << head;
    const auto rows = read_manifest((root / "d/manifest.csv").string());
    EXPECT_EQ(rows.size(), 15u);

    std::ofstream(root / "bad.cfg") << "refs=4\nwidth=9\n";
    auto r = cli({"gen-data", "--config", at("bad.cfg"), "--out", at("e")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("unknown key 'width'"), std::string::npos);
    std::ofstream(root / "bad2.cfg") << "refs\n";
    EXPECT_EQ(cli({"gen-data", "--config", at("bad2.cfg"), "--out", at("e")}).code, 1);
    std::ofstream(root / "bad3.cfg") << "refs=many\n";
    EXPECT_EQ(cli({"gen-data", "--config", at("bad3.cfg"), "--out", at("e")}).code, 1);
    EXPECT_EQ(cli({"gen-data", "--config", at("missing.cfg"), "--out", at("e")}).code, 1);
}

TEST_F(Cli, ValidationVersusRuntimeExitCodes) {
    EXPECT_EQ(cli({"gen-data", "--refs", "2", "--out", at("v")}).code, 1);
    EXPECT_EQ(cli({"gen-data", "--size", "30", "--out", at("v")}).code, 1);
    // Missing dataset: runtime failure.
    EXPECT_EQ(cli({"eval-metric", "--data", at("nowhere"), "--checkpoint", at("m.ckpt"), "--out", at("v")}).code, 2);
    ASSERT_EQ(cli({"gen-data", "--refs", "3", "--variants", "3", "--size", "16", "--out", at("ds")}).code, 0);
    // Corrupt checkpoint: runtime failure.
    std::ofstream(root / "junk.ckpt") << "not a checkpoint";
    auto r = cli({"eval-metric", "--data", at("ds"), "--checkpoint", at("junk.ckpt"), "--out", at("v")});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("junk.ckpt"), std::string::npos);
    // Malformed manifest: validation error.
    std::ofstream(root / "ds/manifest.csv", std::ios::app) << "only,three,cols\n";
    EXPECT_EQ(cli({"train-metric", "--data", at("ds"), "--out", at("v")}).code, 1);
    EXPECT_EQ(cli({"eval-metric", "--data", at("ds"), "--checkpoint", at("junk.ckpt"), "--split", "dev", "--out", at("v")}).code, 1);
}

TEST_F(Cli, GradcheckPassesAndWritesTable) {
    const auto r = cli({"gradcheck", "--dtype", "f64", "--no-stopgrad", "--out", at("g")});
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("pban_full_eval"), std::string::npos);
    EXPECT_NE(r.out.find("all checks passed"), std::string::npos);
    const auto csv = slurp(root / "g/gradcheck.csv");
    EXPECT_EQ(csv.rfind("check,checked,max_rel_error,max_abs_error,status\n", 0), 0u);
    EXPECT_EQ(csv.find(",fail"), std::string::npos);
    EXPECT_NE(csv.find("literal_max_abs_gradient"), std::string::npos);
}

// Small end-to-end chain; every artifact must be identical on a rerun.
TEST_F(Cli, PipelineRerunIsBitwiseReproducible) {
    auto chain = [&](const std::string& tag) {
        const std::string d = at(tag + "/data"), m = at(tag + "/metric"), s = at(tag + "/sr"), a = at(tag + "/abl"),
                          e = at(tag + "/eval");
        EXPECT_EQ(cli({"gen-data", "--refs", "4", "--variants", "3", "--size", "16", "--out", d}).code, 0);
        auto r = cli({"train-metric", "--data", d, "--epochs-stage1", "2", "--epochs-stage2", "1", "--channels", "8",
                      "--out", m});
        EXPECT_EQ(r.code, 0) << r.err;
        r = cli({"eval-metric", "--data", d, "--checkpoint", m + "/metric.ckpt", "--out", e});
        EXPECT_EQ(r.code, 0) << r.err;
        r = cli({"optimize-sr", "--data", d, "--checkpoint", m + "/metric.ckpt", "--epochs", "1", "--pretrain-epochs", "1",
                 "--lr", "1e-4", "--out", s});
        EXPECT_EQ(r.code, 0) << r.err;
        r = cli({"ablate-weights", "--data", d, "--checkpoint", m + "/metric.ckpt", "--ratios", "9/1,1/9", "--epochs", "1",
                 "--init-checkpoint", s + "/tiny_sr_base.ckpt", "--out", a});
        EXPECT_EQ(r.code, 0) << r.err;
    };
    chain("one");
    chain("two");
    for (const char* f : {"metric/metric.ckpt", "metric/train_log.csv", "eval/correlation.csv", "eval/predictions.csv",
                          "sr/tiny_sr.ckpt", "sr/tiny_sr_base.ckpt", "sr/sr_log.csv", "sr/val_sr/sr_000.ppm",
                          "abl/ablation.csv", "abl/ablation_log.csv"}) {
        const auto x = slurp(root / "one" / f);
        EXPECT_FALSE(x.empty()) << f;
        EXPECT_EQ(x, slurp(root / "two" / f)) << f;
    }
    const auto abl = slurp(root / "one/abl/ablation.csv");
    EXPECT_LT(abl.find("\n1/9,"), abl.find("\n9/1,"));
    EXPECT_EQ(slurp(root / "one/eval/correlation.csv").rfind("split,n,plcc,srcc\ntest,3,", 0), 0u);
}

TEST_F(Cli, OptimizeSrRefusesDegenerateLiteralMode) {
    ASSERT_EQ(cli({"gen-data", "--refs", "3", "--variants", "1", "--size", "16", "--out", at("d")}).code, 0);
    const auto r = cli({"optimize-sr", "--data", at("d"), "--checkpoint", at("none.ckpt"), "--no-stopgrad", "--alpha", "0.5",
                        "--beta", "0.5", "--out", at("o")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("gradcheck --no-stopgrad"), std::string::npos);
}

TEST(ConfigFile, ParsesFlatKeyValue) {
    const auto p = fs::temp_directory_path() / "epban_cfg_parse.cfg";
    std::ofstream(p) << "  a = 1 \n\n# skip\n--b=x=y\nc=\n";
    const auto kv = read_config_file(p.string());
    ASSERT_EQ(kv.size(), 3u);
    EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"a", "1"}));
    EXPECT_EQ(kv[1], (std::pair<std::string, std::string>{"b", "x=y"}));
    EXPECT_EQ(kv[2], (std::pair<std::string, std::string>{"c", ""}));
    fs::remove(p);
}

}  // namespace
}  // namespace epban
