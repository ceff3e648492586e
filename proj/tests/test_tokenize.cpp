#include "selfctl/tokenize.hpp"

#include "doctest.h"

#include <filesystem>
#include <random>

using namespace selfctl;

namespace {

Image random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(h, w, c);
    for (auto& v : img.pixels) v = u(rng);
    return img;
}

} // namespace

TEST_CASE("patchify of a constant mid-gray patch") {
    const auto grid = patchify(Image(2, 2, 1, 0.5), 2);
    REQUIRE(grid.tokens.rows() == 1);
    REQUIRE(grid.tokens.cols() == 4);
    CHECK(grid.tokens.cwiseAbs().maxCoeff() == 0.0);
    const Image back = unpatchify(grid);
    for (double v : back.pixels) CHECK(v == 0.5);
}

TEST_CASE("patchify shapes") {
    const auto grid = patchify(random_image(4, 4, 1, 1), 2);
    CHECK(grid.grid_h == 2);
    CHECK(grid.grid_w == 2);
    CHECK(grid.token_dim() == 4);
    CHECK(grid.num_patches() == 4);
    CHECK(patchify(random_image(16, 16, 3, 2), 4).tokens.cols() == 48);
    CHECK_THROWS_AS(patchify(random_image(6, 8, 3, 3), 4), std::invalid_argument);
}

TEST_CASE("token layout: row-major patches, channel-major within a token") {
    const Image img = random_image(8, 12, 3, 4);
    const std::size_t p = 4;
    const auto grid = patchify(img, p);
    for (std::size_t gy = 0; gy < 2; ++gy)
        for (std::size_t gx = 0; gx < 3; ++gx)
            for (std::size_t ch = 0; ch < 3; ++ch)
                for (std::size_t dy = 0; dy < p; ++dy)
                    for (std::size_t dx = 0; dx < p; ++dx) {
                        const double expect = 2.0 * img.at(gy * p + dy, gx * p + dx, ch) - 1.0;
                        CHECK(grid.tokens(static_cast<Eigen::Index>(gy * 3 + gx),
                                          static_cast<Eigen::Index>(ch * p * p + dy * p + dx)) == expect);
                    }
}

TEST_CASE("round trip and value range") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Image img = random_image(8, 8, 3, seed);
        const auto grid = patchify(img, 2);
        CHECK(grid.tokens.maxCoeff() <= 1.0);
        CHECK(grid.tokens.minCoeff() >= -1.0);
        const Image back = unpatchify(grid);
        double err = 0.0;
        for (std::size_t i = 0; i < img.pixels.size(); ++i) err = std::max(err, std::abs(img.pixels[i] - back.pixels[i]));
        CHECK(err <= 1e-6);
    }
}

TEST_CASE("unpatchify clips") {
    ImageTokenGrid grid;
    grid.tokens = Mat::Constant(1, 4, -1.0);
    grid.grid_h = grid.grid_w = 1;
    grid.patch_size = 2;
    grid.channels = 1;
    for (double v : unpatchify(grid).pixels) CHECK(v == 0.0);
    grid.tokens = Mat::Constant(1, 4, 3.0);
    for (double v : unpatchify(grid).pixels) CHECK(v == 1.0);
}

TEST_CASE("encode_text") {
    TextVocab vocab;
    CHECK(vocab.add("red") == 2);
    CHECK(vocab.add("square") == 3);
    CHECK(vocab.add("red") == 2);
    CHECK(vocab.size() == 4);

    auto e = encode_text("red square", vocab, 4);
    CHECK(e.ids == std::vector<std::int32_t>{2, 3, 0, 0});
    CHECK(e.length == 2);
    e = encode_text("blue blob", vocab, 4);
    CHECK(e.ids == std::vector<std::int32_t>{1, 1, 0, 0});
    e = encode_text("", vocab, 3);
    CHECK(e.ids == std::vector<std::int32_t>{0, 0, 0});
    CHECK(e.length == 0);
    e = encode_text("  RED\tSquare red red ", vocab, 3);
    CHECK(e.ids == std::vector<std::int32_t>{2, 3, 2});
    CHECK(e.length == 3);
    CHECK_THROWS_AS(encode_text("red", vocab, 0), std::invalid_argument);
}

TEST_CASE("vocabulary from captions and file round trip") {
    const auto vocab = TextVocab::from_captions({"red square", "blue square", "Red circle"});
    CHECK(vocab.words() == std::vector<std::string>{"red", "square", "blue", "circle"});
    CHECK(vocab.id("circle") == 5);
    CHECK(vocab.id("zzz") == kUnknownId);

    const auto path = std::filesystem::temp_directory_path() / "selfctl_vocab_test.txt";
    vocab.save(path);
    CHECK(TextVocab::load(path) == vocab);
    std::filesystem::remove(path);
}
