#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "epban/synth_data.hpp"

namespace epban {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("epban_synth_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

TEST(GenerateHr, Deterministic) {
    EXPECT_EQ(generate_hr(3, 48, 7), generate_hr(3, 48, 7));
    EXPECT_NE(generate_hr(3, 48, 7), generate_hr(3, 48, 8));
}

TEST(GenerateHr, DistinctContent) {
    EXPECT_LT(psnr(generate_hr(0, 48, 7), generate_hr(1, 48, 7)), 20.0);
    for (std::size_t i = 1; i < 10; ++i) EXPECT_LT(psnr(generate_hr(i - 1, 48, 7), generate_hr(i, 48, 7)), 20.0);
}

TEST(GenerateHr, HistogramCoverage) {
    for (std::size_t i = 0; i < 5; ++i) {
        const Image img = generate_hr(i, 48, 7);
        std::set<int> bins;
        for (float v : img.values) bins.insert(to_byte(v));
        EXPECT_GE(bins.size(), 64u) << i;
    }
}

TEST(GenerateHr, SizeValidation) {
    EXPECT_THROW(generate_hr(0, 30, 7), ValidationError);
    EXPECT_THROW(generate_hr(0, 0, 7), ValidationError);
}

TEST(OracleMos, Anchors) {
    const Image hr = generate_hr(0, 32, 1);
    EXPECT_FLOAT_EQ(oracle_mos(hr, hr), 5.0f);
    EXPECT_DOUBLE_EQ(mos_from_ssim(0.0), 1.0);
    EXPECT_DOUBLE_EQ(mos_from_ssim(-0.3), 1.0);
    EXPECT_NEAR(mos_from_ssim(0.7), 3.34265, 1e-5);
    EXPECT_NEAR(mos_from_ssim(0.7), 1 + 4 * 0.7 * std::sqrt(0.7), 1e-12);
    EXPECT_THROW(oracle_mos(hr, Image(32, 28)), ShapeError);
}

TEST(OracleMos, MonotoneInSsim) {
    double prev = 0;
    for (double s = -0.5; s <= 1.0; s += 0.05) {
        const double m = mos_from_ssim(s);
        EXPECT_GE(m, prev);
        prev = m;
    }
}

TEST(Splits, Counts) {
    const auto s = assign_splits(20);
    std::map<Split, int> n;
    for (auto v : s) ++n[v];
    EXPECT_EQ(n[Split::train], 16);
    EXPECT_EQ(n[Split::val], 2);
    EXPECT_EQ(n[Split::test], 2);
    EXPECT_THROW(assign_splits(2), ValidationError);
    const auto s3 = assign_splits(3);
    EXPECT_EQ(s3, (std::vector<Split>{Split::train, Split::val, Split::test}));
}

class Dataset : public ::testing::Test {
  protected:
    static void SetUpTestSuite() {
        dir_ = new fs::path(scratch("default"));
        rows_ = new std::vector<ScoredPair>(build_dataset({}, dir_->string()));
    }
    static void TearDownTestSuite() {
        fs::remove_all(*dir_);
        delete dir_;
        delete rows_;
    }
    static fs::path* dir_;
    static std::vector<ScoredPair>* rows_;
};
fs::path* Dataset::dir_ = nullptr;
std::vector<ScoredPair>* Dataset::rows_ = nullptr;

TEST_F(Dataset, RowAndSplitCounts) {
    ASSERT_EQ(rows_->size(), 240u);
    std::map<Split, int> n;
    for (const auto& r : *rows_) ++n[r.split];
    EXPECT_EQ(n[Split::train], 192);
    EXPECT_EQ(n[Split::val], 24);
    EXPECT_EQ(n[Split::test], 24);
}

TEST_F(Dataset, NoReferenceLeak) {
    std::map<std::string, std::set<Split>> by_ref;
    for (const auto& r : *rows_) by_ref[r.hr_path].insert(r.split);
    EXPECT_EQ(by_ref.size(), 20u);
    for (const auto& [ref, splits] : by_ref) EXPECT_EQ(splits.size(), 1u) << ref;
}

TEST_F(Dataset, MosRangeAndSpread) {
    float lo = 5, hi = 1, tlo = 5, thi = 1;
    for (const auto& r : *rows_) {
        EXPECT_GE(r.mos, 1.f);
        EXPECT_LE(r.mos, 5.f);
        lo = std::min(lo, r.mos);
        hi = std::max(hi, r.mos);
        if (r.split == Split::train) {
            tlo = std::min(tlo, r.mos);
            thi = std::max(thi, r.mos);
        }
    }
    EXPECT_LE(lo, 1.5f);
    EXPECT_GE(hi, 4.8f);
    EXPECT_GE(thi - tlo, 3.0f);
}

TEST_F(Dataset, ManifestMatchesFilesAndOracle) {
    const auto read = read_manifest((*dir_ / "manifest.csv").string());
    ASSERT_EQ(read.size(), rows_->size());
    for (std::size_t i = 0; i < read.size(); i += 7) {
        const auto& r = read[i];
        EXPECT_EQ(r.sr_path, (*rows_)[i].sr_path);
        EXPECT_EQ(r.split, (*rows_)[i].split);
        const Image sr = read_ppm((*dir_ / r.sr_path).string());
        const Image hr = read_ppm((*dir_ / r.hr_path).string());
        EXPECT_EQ(sr.height, hr.height);
        EXPECT_NEAR(r.mos, oracle_mos(sr, hr), 1e-5);
        // The stored recipe reproduces the stored image.
        EXPECT_EQ(quantize_8bit(degrade(hr, r.recipe)), sr);
        EXPECT_EQ(encode_ppm(sr), read_file_bytes((*dir_ / r.sr_path).string()));
    }
}

TEST_F(Dataset, Reproducible) {
    const auto other = scratch("rerun");
    build_dataset({}, other.string());
    EXPECT_EQ(slurp(other / "manifest.csv"), slurp(*dir_ / "manifest.csv"));
    EXPECT_EQ(slurp(other / "sr" / "sr_005_03.ppm"), slurp(*dir_ / "sr" / "sr_005_03.ppm"));
    fs::remove_all(other);
}

TEST_F(Dataset, ManifestHeader) {
    const std::string text = slurp(*dir_ / "manifest.csv");
    EXPECT_EQ(text.substr(0, text.find('\n')), kManifestHeader);
    EXPECT_EQ(text.find('\r'), std::string::npos);
}

TEST(Manifest, RejectsMalformedRows) {
    const auto dir = scratch("bad");
    fs::create_directories(dir);
    const auto path = (dir / "m.csv").string();
    auto write = [&](const std::string& body) {
        std::ofstream(path, std::ios::binary) << kManifestHeader << '\n' << body;
    };
    write("a,b,3.0,train,0,0,256,1\n");
    EXPECT_THROW(read_manifest(path), ValidationError);
    write("a,b,7.0,train,0,0,256,1,0\n");
    EXPECT_THROW(read_manifest(path), ValidationError);
    write("a,b,3.0,holdout,0,0,256,1,0\n");
    EXPECT_THROW(read_manifest(path), ValidationError);
    write("a,b,x,train,0,0,256,1,0\n");
    EXPECT_THROW(read_manifest(path), ValidationError);
    std::ofstream(path, std::ios::binary) << "wrong\n";
    EXPECT_THROW(read_manifest(path), ValidationError);
    EXPECT_THROW(read_manifest((dir / "missing.csv").string()), std::runtime_error);
    fs::remove_all(dir);
}

}  // namespace
}  // namespace epban
