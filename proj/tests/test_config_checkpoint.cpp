#include "selfctl/checkpoint.hpp"
#include "selfctl/config.hpp"
#include "selfctl/image_io.hpp"
#include "selfctl/synthdata.hpp"

#include "doctest.h"

#include <filesystem>
#include <fstream>

using namespace selfctl;

namespace {

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "selfctl_test_cc";
    std::filesystem::create_directories(dir);
    return dir / name;
}

ModelConfig small_model() {
    ModelConfig m;
    m.width = 16;
    m.depth_enc = 1;
    m.depth_dec = 1;
    m.heads = 2;
    m.mlp_ratio = 2;
    m.head_hidden = 16;
    m.head_blocks = 1;
    m.head_time_dim = 8;
    m.schedule.sample_steps = 10;
    return m;
}

std::vector<TokenizedExample> examples(const MarModel& model, std::size_t n) {
    std::vector<TokenizedExample> out;
    for (const auto& s : synth::make_dataset(n, synth::Jitter::standard(), 4))
        out.push_back(tokenize_example(model, s.caption, s.target, s.condition));
    return out;
}

} // namespace

TEST_CASE("config round-trips through its INI form") {
    RunConfig cfg;
    cfg.model = small_model();
    cfg.model.policy = ablation_policy(6);
    cfg.train.lr = 3.0e-4 + 1e-19;
    cfg.train.mask_ratio_lo = 0.1 * 3;
    cfg.data.seed = 123456789012345ULL;
    cfg.eval.temperature = 0.9;
    cfg.output_dir = "some/dir";
    const RunConfig back = RunConfig::parse(cfg.to_ini());
    CHECK(back == cfg);

    const auto path = scratch("roundtrip.ini");
    cfg.save(path);
    CHECK(RunConfig::load(path) == cfg);
}

TEST_CASE("keys are optional and defaults apply") {
    const RunConfig cfg = RunConfig::parse("[model]\nwidth = 32\n");
    RunConfig expect;
    expect.model.width = 32;
    CHECK(cfg == expect);
    CHECK(RunConfig::parse("") == RunConfig{});
}

TEST_CASE("unknown keys, bad values and stray keys are rejected") {
    CHECK_THROWS_AS(RunConfig::parse("[model]\nwidht = 32\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[modle]\nwidth = 32\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\nwidth = 3x\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[train]\nlr = fast\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[policy]\ncross = sideways\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("width = 32\n"), ConfigError);
    try {
        RunConfig::parse("[model]\nwidht = 32\n");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("model.widht") != std::string::npos);
    }
}

TEST_CASE("policy option sets the modes and excludes explicit keys") {
    for (int o = 1; o <= 8; ++o) {
        const RunConfig cfg = RunConfig::parse("[policy]\noption = " + std::to_string(o) + "\n");
        CHECK(cfg.model.policy == ablation_policy(o));
    }
    CHECK(RunConfig::parse("[policy]\ntext = bidirectional\ncross = causal\n").model.policy.text ==
          IntraMode::Bidirectional);
    CHECK_THROWS_AS(RunConfig::parse("[policy]\noption = 3\ntext = causal\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[policy]\noption = 9\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[policy]\noption = 0\n"), ConfigError);
}

TEST_CASE("missing config file error names the path") {
    const auto path = scratch("does_not_exist.ini");
    std::filesystem::remove(path);
    try {
        RunConfig::load(path);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find(path.string()) != std::string::npos);
    }
}

TEST_CASE("validation checks ranges and referenced paths") {
    RunConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    RunConfig bad = cfg;
    bad.model.width = 30; // not divisible by 4 heads
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.eval.k = 17;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.init_checkpoint = scratch("absent.bin").string();
    std::filesystem::remove(bad.init_checkpoint);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.data.jitter_max_size = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoint reload reproduces forward outputs bit-exactly") {
    const TextVocab vocab = TextVocab::from_captions(synth::all_captions());
    MarModel model(small_model(), vocab, 9);
    {
        Trainer trainer(model, TrainConfig{.batch_size = 4, .steps = 3});
        Rng rng(1);
        const auto ex = examples(model, 4);
        for (int i = 0; i < 3; ++i) trainer.step(ex, rng);
    }
    const auto path = scratch("model.bin");
    save_checkpoint(path, model);
    const auto loaded = load_checkpoint(path);

    CHECK(loaded->config() == model.config());
    CHECK(loaded->vocab().words() == model.vocab().words());
    REQUIRE(loaded->params().all().size() == model.params().all().size());
    for (std::size_t i = 0; i < model.params().all().size(); ++i) {
        CHECK(loaded->params().all()[i].name == model.params().all()[i].name);
        CHECK(loaded->params().all()[i].value == model.params().all()[i].value);
    }

    SequenceBatch batch = assemble_batch(model, examples(model, 3));
    for (std::size_t i = 0; i < batch.visible.size(); ++i) batch.visible[i] = (i % 3) == 0;
    CHECK(hidden_conditioning(*loaded, batch) == hidden_conditioning(model, batch));

    std::vector<GenerationRequest> req(2);
    for (auto& r : req) r.text_ids = encode_text("green cross", vocab, 4).ids;
    Rng r1(5), r2(5);
    CHECK(generate_tokens(*loaded, req, {4, 1.0, 2.0}, r1) == generate_tokens(model, req, {4, 1.0, 2.0}, r2));
}

TEST_CASE("load_parameters rejects a different configuration or vocabulary") {
    const TextVocab vocab = TextVocab::from_captions(synth::all_captions());
    MarModel model(small_model(), vocab, 1);
    const auto path = scratch("model2.bin");
    save_checkpoint(path, model);

    MarModel same(small_model(), vocab, 2);
    load_parameters(path, same);
    CHECK(same.params().all().front().value == model.params().all().front().value);

    ModelConfig wider = small_model();
    wider.width = 32;
    MarModel other(wider, vocab, 1);
    CHECK_THROWS_AS(load_parameters(path, other), ConfigError);

    MarModel other_vocab(small_model(), TextVocab::from_captions({"red square"}), 1);
    CHECK_THROWS_AS(load_parameters(path, other_vocab), ConfigError);
}

TEST_CASE("malformed checkpoints are rejected") {
    const auto path = scratch("junk.bin");
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOTACKPT";
    }
    CHECK_THROWS_AS(load_checkpoint(path), ConfigError);

    const TextVocab vocab = TextVocab::from_captions(synth::all_captions());
    MarModel model(small_model(), vocab, 1);
    const auto good = scratch("model3.bin");
    save_checkpoint(good, model);
    const auto size = std::filesystem::file_size(good);
    std::filesystem::resize_file(good, size - 8);
    CHECK_THROWS_AS(load_checkpoint(good), ConfigError);
    CHECK_THROWS_AS(load_checkpoint(scratch("never_written.bin")), ConfigError);
}

TEST_CASE("PNG round trip is exact on 8-bit levels") {
    Image rgb(4, 6, 3), grey(5, 3, 1);
    for (std::size_t i = 0; i < rgb.pixels.size(); ++i) rgb.pixels[i] = static_cast<double>((i * 37) % 256) / 255.0;
    for (std::size_t i = 0; i < grey.pixels.size(); ++i) grey.pixels[i] = static_cast<double>((i * 11) % 256) / 255.0;
    write_png(scratch("rgb.png"), rgb);
    write_png(scratch("grey.png"), grey);
    CHECK(read_png(scratch("rgb.png")) == rgb);
    CHECK(read_png(scratch("grey.png")) == grey);

    Image wild(2, 2, 1);
    wild.pixels = {-0.5, 1.5, 0.5, 0.25};
    write_png(scratch("wild.png"), wild);
    const Image back = read_png(scratch("wild.png"));
    CHECK(back.pixels[0] == 0.0);
    CHECK(back.pixels[1] == 1.0);
    CHECK(back.pixels[2] == 128.0 / 255.0);
    CHECK(back.pixels[3] == 64.0 / 255.0);
}

TEST_CASE("tile_images lays out a row-major grid") {
    std::vector<Image> imgs;
    for (int i = 0; i < 4; ++i) imgs.emplace_back(2, 2, 1, i / 4.0);
    const Image grid = tile_images(imgs, 2);
    REQUIRE(grid.height == 4);
    REQUIRE(grid.width == 4);
    CHECK(grid.at(0, 0, 0) == 0.0);
    CHECK(grid.at(0, 3, 0) == 0.25);
    CHECK(grid.at(3, 0, 0) == 0.5);
    CHECK(grid.at(3, 3, 0) == 0.75);
}
