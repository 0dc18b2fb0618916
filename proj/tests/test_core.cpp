// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pancakes/core/grid.hpp"
#include "pancakes/core/grid_io.hpp"
#include "pancakes/core/rng.hpp"
#include "pancakes/core/types.hpp"

namespace fs = std::filesystem;
using namespace pancakes;

namespace {

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / ("pancakes_core_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
    fs::create_directories(d);
    return d;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
    std::ofstream f(p, std::ios::binary);
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Grid random_grid(Rng& rng, DType t) {
    const int h = static_cast<int>(rng.uniform_int(1, 17)), w = static_cast<int>(rng.uniform_int(1, 17));
    Grid g(h, w, t);
    for (std::size_t i = 0; i < g.size(); ++i) {
        switch (t) {
        case DType::u8: g.values<std::uint8_t>()[i] = static_cast<std::uint8_t>(rng.uniform_int(0, 1)); break;
        case DType::u16: g.values<std::uint16_t>()[i] = static_cast<std::uint16_t>(rng.uniform_int(0, 65535)); break;
        case DType::f32: g.values<float>()[i] = static_cast<float>(rng.uniform()); break;
        }
    }
    return g;
}

}  // namespace

TEST(GridIo, SinglePixelMaskBytes) {
    const auto dir = temp_dir();
    Grid g = Grid::from<std::uint8_t>(1, 1, {1});
    write_grid(g, dir / "one.pck");
    const std::vector<std::uint8_t> expected = {0x50, 0x43, 0x4B, 0x31, 0x00, 0x01, 0x00, 0x01, 0x00, 0x01};
    EXPECT_EQ(file_bytes(dir / "one.pck"), expected);
    EXPECT_EQ(read_grid(dir / "one.pck"), g);
}

TEST(GridIo, LabelGridLayout) {
    Grid g = Grid::from<std::uint16_t>(2, 2, {0, 1, 2, 3});
    const auto bytes = encode_grid(g);
    ASSERT_EQ(bytes.size(), 9u + 8u);
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 2);
    EXPECT_EQ(bytes[7], 2);
    const std::vector<std::uint8_t> payload(bytes.begin() + 9, bytes.end());
    EXPECT_EQ(payload, (std::vector<std::uint8_t>{0, 0, 1, 0, 2, 0, 3, 0}));
}

TEST(GridIo, RoundTripIsBitwiseIdentity) {
    const auto dir = temp_dir();
    Rng rng(7);
    for (int trial = 0; trial < 60; ++trial) {
        const auto t = static_cast<DType>(trial % 3);
        const Grid g = random_grid(rng, t);
        const auto path = dir / "rt.pck";
        write_grid(g, path);
        const Grid back = read_grid(path);
        EXPECT_EQ(back, g);
        EXPECT_EQ(encode_grid(back), encode_grid(g));
    }
}

TEST(GridIo, WritesAreByteIdentical) {
    Rng rng(3);
    const Grid g = random_grid(rng, DType::f32);
    EXPECT_EQ(encode_grid(g), encode_grid(g));
}

TEST(GridIo, BadMagic) {
    const auto dir = temp_dir();
    auto bytes = encode_grid(Grid::from<std::uint8_t>(1, 1, {1}));
    bytes[0] = bytes[1] = bytes[2] = bytes[3] = 'X';
    write_bytes(dir / "bad.pck", bytes);
    try {
        read_grid(dir / "bad.pck");
        FAIL();
    } catch (const GridFormatError& e) {
        EXPECT_EQ(e.kind(), GridFormatError::Kind::bad_magic);
    }
}

TEST(GridIo, TruncatedPayload) {
    auto bytes = encode_grid(Grid::from<std::uint8_t>(2, 2, {1, 0, 1, 0}));
    bytes.pop_back();
    try {
        decode_grid(bytes);
        FAIL();
    } catch (const GridFormatError& e) {
        EXPECT_EQ(e.kind(), GridFormatError::Kind::truncated);
    }
}

TEST(GridIo, UnknownDtype) {
    auto bytes = encode_grid(Grid::from<std::uint8_t>(1, 1, {1}));
    bytes[4] = 9;
    try {
        decode_grid(bytes);
        FAIL();
    } catch (const GridFormatError& e) {
        EXPECT_EQ(e.kind(), GridFormatError::Kind::unknown_dtype);
    }
}

TEST(GridIo, MissingFileIsIoError) {
    EXPECT_THROW(read_grid(temp_dir() / "does_not_exist.pck"), IoError);
}

TEST(GridIo, FailedWriteLeavesNoFile) {
    const auto dir = temp_dir() / "no_such_subdir";
    EXPECT_THROW(write_grid(Grid::mask(2, 2), dir / "x.pck"), IoError);
    EXPECT_FALSE(fs::exists(dir / "x.pck"));
    EXPECT_FALSE(fs::exists(dir / "x.pck.partial"));
}

TEST(Grid, RejectsEmptyShape) {
    EXPECT_THROW(Grid(0, 3, DType::u8), DomainError);
    EXPECT_THROW((Grid::from<float>(2, 2, {1.0f})), DomainError);
}

TEST(Grid, InvariantChecks) {
    EXPECT_TRUE(is_valid_mask(Grid::from<std::uint8_t>(1, 2, {0, 1})));
    EXPECT_FALSE(is_valid_mask(Grid::from<std::uint8_t>(1, 2, {0, 2})));
    EXPECT_TRUE(is_valid_intensity(Grid::from<float>(1, 2, {0.0f, 1.0f})));
    EXPECT_FALSE(is_valid_intensity(Grid::from<float>(1, 2, {0.0f, 1.5f})));
    EXPECT_TRUE(is_valid_labels(Grid::from<std::uint16_t>(1, 2, {0, 4}), 5));
    EXPECT_FALSE(is_valid_labels(Grid::from<std::uint16_t>(1, 2, {0, 5}), 5));
}

TEST(SoftLabelMap, ArgmaxTiesGoToLowestChannel) {
    SoftLabelMap<float> map{3, 1, 2, {0.4f, 0.2f, 0.4f, 0.4f, 0.2f, 0.4f}};
    const Grid hard = map.hard_map();
    EXPECT_EQ(hard.at<std::uint16_t>(0, 0), 0);  // channels 0 and 1 tie at 0.4
    EXPECT_EQ(hard.at<std::uint16_t>(0, 1), 1);  // 0.2 vs 0.4 vs 0.4 -> channel 1
    EXPECT_NEAR(map.max_normalization_error(), 0.0, 1e-6);
}

TEST(ImageSet, RequiresEqualShapes) {
    EXPECT_THROW(ImageSet(std::vector<Grid>{}), DomainError);
    EXPECT_THROW(ImageSet({Grid::image(2, 2), Grid::image(2, 3)}), DomainError);
    EXPECT_NO_THROW(ImageSet({Grid::image(2, 2), Grid::image(2, 2)}));
}

TEST(Rng, DerivedStreamsAreStableAndDistinct) {
    EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
    EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
    EXPECT_NE(derive_seed(1, {2}), derive_seed(2, {2}));
}
