#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "capiqa/datagen.hpp"
#include "fixtures.hpp"

using namespace capiqa;
using namespace capiqa::testing;

namespace {

double stddev_of_difference(const Tensor<float>& a, const Tensor<float>& b) {
    double mean = 0, sq = 0;
    const auto n = static_cast<double>(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) mean += a[i] - b[i];
    mean /= n;
    for (std::size_t i = 0; i < a.numel(); ++i) sq += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
    return std::sqrt(sq / (n - 1));
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

}  // namespace

TEST(Phantom, Deterministic) {
    EXPECT_EQ(make_phantom({64, 5}).values(), make_phantom({64, 5}).values());
    EXPECT_NE(make_phantom({64, 5}).values(), make_phantom({64, 6}).values());
}

TEST(Phantom, CornersAreBackground) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto p = make_phantom({64, seed});
        for (std::size_t y : {0u, 1u, 2u, 61u, 62u, 63u}) {
            for (std::size_t x : {0u, 1u, 2u, 61u, 62u, 63u}) EXPECT_EQ(p.at({0, y, x}), 0.f);
        }
    }
}

TEST(Phantom, MeanIntensityBand) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto p = make_phantom({64, seed * 7919});
        double mean = 0;
        for (float v : p.data()) {
            ASSERT_GE(v, 0.f);
            ASSERT_LE(v, 1.f);
            mean += v;
        }
        mean /= static_cast<double>(p.numel());
        EXPECT_GT(mean, 0.05) << seed;
        EXPECT_LT(mean, 0.6) << seed;
    }
}

TEST(Phantom, SizeTooSmall) { EXPECT_THROW(make_phantom({16, 0}), ConfigError); }

TEST(Degrade, IdentityParametersReturnInputExactly) {
    const auto clean = make_phantom({64, 3});
    DegradationParams id;
    id.sigma0 = 0;
    EXPECT_EQ(degrade(clean, id, 17).values(), clean.values());
}

TEST(Degrade, NoiseFollowsInverseSquareRootDose) {
    const auto flat = Tensor<float>::full({1, 128, 128}, 0.5f);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        DegradationParams full, quarter;
        quarter.dose = 0.25;
        const double ratio =
            stddev_of_difference(degrade(flat, quarter, seed), flat) / stddev_of_difference(degrade(flat, full, seed + 100), flat);
        EXPECT_NEAR(ratio, 2.0, 0.2);
    }
    DegradationParams full;
    EXPECT_NEAR(stddev_of_difference(degrade(flat, full, 1), flat), 0.02, 0.002);
}

TEST(Degrade, MeanAbsoluteDeviationGrowsAsDoseFalls) {
    const std::vector<double> doses{1.0, 0.5, 0.25, 0.1};
    std::vector<double> mad(doses.size(), 0.0);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto clean = make_phantom({64, seed});
        for (std::size_t k = 0; k < doses.size(); ++k) {
            DegradationParams p;
            p.dose = doses[k];
            const auto noisy = degrade(clean, p, seed);
            for (std::size_t i = 0; i < clean.numel(); ++i) mad[k] += std::abs(noisy[i] - clean[i]);
        }
    }
    for (std::size_t k = 1; k < doses.size(); ++k) EXPECT_GT(mad[k], mad[k - 1]) << doses[k];
}

TEST(Degrade, DeterministicAndClamped) {
    const auto clean = make_phantom({64, 4});
    DegradationParams p;
    p.dose = 0.05;
    p.streak_count = 3;
    p.streak_amplitude = 0.4;
    p.blur_sigma = 1.2;
    const auto a = degrade(clean, p, 9);
    EXPECT_EQ(a.values(), degrade(clean, p, 9).values());
    EXPECT_NE(a.values(), degrade(clean, p, 10).values());
    for (float v : a.data()) {
        EXPECT_GE(v, 0.f);
        EXPECT_LE(v, 1.f);
    }
    p.dose = 0;
    EXPECT_THROW(degrade(clean, p, 1), ConfigError);
}

TEST(OracleScore, Examples) {
    DegradationParams id;
    id.sigma0 = 0;
    EXPECT_EQ(oracle_score(id), 4.0);

    DegradationParams worst;
    worst.dose = 0.01;  // sigma 0.2 > 0.12
    worst.streak_count = 4;
    worst.streak_amplitude = 0.5;
    worst.blur_sigma = 3.0;
    EXPECT_EQ(oracle_score(worst), 0.0);

    DegradationParams mid;
    mid.dose = 1.0;
    mid.sigma0 = 0.06;
    EXPECT_NEAR(oracle_score(mid), 2.8, 1e-12);
}

TEST(OracleScore, FrozenConstants) {
    EXPECT_EQ(oracle::kNoiseWeight, 0.6);
    EXPECT_EQ(oracle::kStreakWeight, 0.25);
    EXPECT_EQ(oracle::kBlurWeight, 0.15);
    EXPECT_EQ(oracle::kSigmaMax, 0.12);
    EXPECT_EQ(oracle::kStreakMax, 0.5);
    EXPECT_EQ(oracle::kBlurMax, 2.0);
    EXPECT_EQ(oracle::kSigma0, 0.02);
    EXPECT_STREQ(kOracleVersion, "capiqa-oracle/1");
}

TEST(Dataset, StratifiedScoresAndValidManifest) {
    TempDir dir;
    const auto m = generate_dataset(512, 64, 7, dir.path().string());
    ASSERT_EQ(m.entries.size(), 512u);
    std::array<std::size_t, 4> bins{};
    for (const auto& e : m.entries) {
        ++bins[std::min<std::size_t>(3, static_cast<std::size_t>(e.score))];
        EXPECT_EQ(std::filesystem::file_size(dir / e.file), 64u * 64u * 4u);
        ASSERT_TRUE(e.params);
        EXPECT_EQ(e.score, oracle_score(*e.params));
    }
    for (std::size_t b = 0; b < 4; ++b) EXPECT_GE(bins[b], 52u) << "bin " << b;
    const auto ds = load_dataset(dir.path().string());
    EXPECT_EQ(ds.examples.size(), 512u);
    EXPECT_EQ(ds.manifest.version, "capiqa-ds/1");
}

TEST(Dataset, RegenerationIsByteIdentical) {
    TempDir a, b;
    generate_dataset(24, 32, 3, a.path().string());
    generate_dataset(24, 32, 3, b.path().string());
    EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
    for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(slurp(a / raster_name(i)), slurp(b / raster_name(i)));
    TempDir c;
    generate_dataset(24, 32, 4, c.path().string());
    EXPECT_NE(manifest_digest(slurp(a / "manifest.json")), manifest_digest(slurp(c / "manifest.json")));
}

TEST(Dataset, EmptyManifestIsValid) {
    TempDir dir;
    const auto m = generate_dataset(0, 32, 1, dir.path().string());
    EXPECT_EQ(m.count, 0u);
    const auto ds = load_dataset(dir.path().string());
    EXPECT_TRUE(ds.examples.empty());
}

TEST(Dataset, ManifestErrorsNameTheEntry) {
    TempDir dir;
    generate_dataset(4, 32, 2, dir.path().string());
    const auto good = slurp(dir / "manifest.json");

    spit(dir / "manifest.json", good.substr(0, good.size() / 2));
    EXPECT_THROW(load_dataset(dir.path().string()), ParseError);

    auto j = nlohmann::json::parse(good);
    j["version"] = "capiqa-ds/0";
    spit(dir / "manifest.json", j.dump());
    EXPECT_THROW(load_dataset(dir.path().string()), ParseError);

    j = nlohmann::json::parse(good);
    j["count"] = 5;
    spit(dir / "manifest.json", j.dump());
    EXPECT_THROW(load_dataset(dir.path().string()), ParseError);

    j = nlohmann::json::parse(good);
    j["entries"][2]["score"] = j["entries"][2]["score"].get<double>() + 0.1;
    spit(dir / "manifest.json", j.dump());
    try {
        load_dataset(dir.path().string());
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("entry 2"), std::string::npos) << e.what();
    }

    spit(dir / "manifest.json", good);
    const auto raster = slurp(dir / raster_name(1));
    spit(dir / raster_name(1), raster.substr(0, raster.size() - 4));
    try {
        load_dataset(dir.path().string());
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find(raster_name(1)), std::string::npos) << e.what();
    }
}

TEST(Split, FloorOnTrainingSide) {
    std::vector<Example> all(512);
    for (std::size_t i = 0; i < all.size(); ++i) all[i].score = static_cast<double>(i) / 128.0;
    const auto [train, val] = split_dataset(all, 0.2, 7);
    EXPECT_EQ(train.size(), 409u);
    EXPECT_EQ(val.size(), 103u);
    const auto [train2, val2] = split_dataset(all, 0.2, 7);
    for (std::size_t i = 0; i < val.size(); ++i) EXPECT_EQ(val[i].score, val2[i].score);
    EXPECT_THROW(split_dataset(all, 1.0, 7), ConfigError);
}

TEST(WindowLevel, Examples) {
    EXPECT_EQ(window_level(50, 400, 50), 128);
    EXPECT_EQ(window_level(-150, 400, 50), 0);
    EXPECT_EQ(window_level(-900, 400, 50), 0);
    EXPECT_EQ(window_level(250, 400, 50), 255);
    EXPECT_EQ(window_level(3000, 400, 50), 255);
    EXPECT_EQ(window_level(150, 400, 50), 191);
    EXPECT_THROW(window_level(0, 0, 50), ConfigError);
}

TEST(Png, HeaderAndChunks) {
    TempDir dir;
    export_png(make_phantom({64, 1}), dir / "p.png");
    const auto bytes = slurp(dir / "p.png");
    ASSERT_GT(bytes.size(), 33u);
    EXPECT_EQ(bytes.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));
    EXPECT_EQ(bytes.substr(12, 4), "IHDR");
    EXPECT_EQ(static_cast<unsigned char>(bytes[19]), 64);  // width, big endian
    EXPECT_EQ(static_cast<unsigned char>(bytes[23]), 64);  // height
    EXPECT_EQ(bytes.substr(bytes.size() - 8, 4), "IEND");
}
