#include "selfctl/cli.hpp"
#include "selfctl/checkpoint.hpp"
#include "selfctl/image_io.hpp"

#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

using namespace selfctl;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "selfctl");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch() {
    auto dir = fs::temp_directory_path() / "selfctl_test_cli";
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const char* kTinyConfig = R"([model]
width = 16
depth_enc = 1
depth_dec = 1
heads = 2
mlp_ratio = 2

[diffhead]
hidden = 16
blocks = 1
time_dim = 8
sample_steps = 5

[train]
batch_size = 4
steps = 40
log_every = 3
checkpoint_every = 4

[data]
num_samples = 18

[eval]
samples = 9
)";

fs::path tiny_config(const std::string& name) {
    const auto path = scratch() / name;
    std::ofstream(path) << kTinyConfig << "\n[paths]\noutput_dir = " << (scratch() / (name + ".run")).string()
                        << '\n';
    return path;
}

} // namespace

TEST_CASE("mask prints the default-policy example") {
    const Run r = cli({"mask", "--layout", "2,1,2", "--option", "3"});
    CHECK(r.code == 0);
    CHECK(r.out == "layout=2,1,2 policy=causal,bidirectional,bidirectional,causal\n"
                   "10000\n11000\n11100\n11111\n11111\n");
}

TEST_CASE("mask with explicit policy and reachability") {
    const Run r = cli({"mask", "--layout", "2,1,2", "--policy", "causal,bidirectional,bidirectional,bidirectional",
                       "--reach", "4"});
    CHECK(r.code == 0);
    CHECK(r.out == "layout=2,1,2 policy=causal,bidirectional,bidirectional,bidirectional\n"
                   "10111\n11111\n11111\n11111\n11111\n"
                   "reach depth=4\n"
                   "11111\n11111\n11111\n11111\n11111\n");
}

TEST_CASE("generated-only layout under option 8 is all ones") {
    const Run r = cli({"mask", "--layout", "0,0,3", "--option", "8"});
    CHECK(r.code == 0);
    CHECK(r.out.substr(r.out.find('\n') + 1) == "111\n111\n111\n");
}

TEST_CASE("usage errors exit with 2") {
    CHECK(cli({"mask", "--layout", "2,1,2", "--option", "9"}).code == 2);
    CHECK(cli({"mask", "--layout", "2,1,2"}).code == 2);
    CHECK(cli({"mask", "--layout", "2,x,2", "--option", "1"}).code == 2);
    CHECK(cli({"mask", "--layout", "2,1,0", "--option", "1"}).code == 2);
    CHECK(cli({"mask", "--layout", "2,1,2", "--policy", "causal,sideways,causal,causal"}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    CHECK(cli({}).code == 2);
    CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("missing config exits 2 and names the path") {
    const auto path = (scratch() / "missing.ini").string();
    fs::remove(path);
    const Run r = cli({"train", path});
    CHECK(r.code == 2);
    CHECK(r.err.find(path) != std::string::npos);
}

TEST_CASE("train smoke run, metrics format and sampling") {
    const auto cfg = tiny_config("smoke.ini");
    const auto out_dir = scratch() / "smoke.ini.run";
    fs::remove_all(out_dir);
    const Run r = cli({"train", cfg.string(), "--steps", "10"});
    REQUIRE(r.code == 0);
    const auto ckpt = out_dir / "checkpoint.bin";
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(out_dir / "config.ini"));

    std::istringstream log(read_file(out_dir / "metrics.log"));
    const std::regex line_re(R"(step=(\d+) loss=[-+0-9.eE]+)");
    std::vector<int> steps;
    for (std::string line; std::getline(log, line);) {
        std::smatch m;
        REQUIRE(std::regex_match(line, m, line_re));
        steps.push_back(std::stoi(m[1]));
    }
    CHECK(steps == std::vector<int>{3, 6, 9, 10});

    // Same seed twice: byte-identical images.
    const auto a = scratch() / "a.png", b = scratch() / "b.png";
    for (const auto& p : {a, b})
        REQUIRE(cli({"sample", ckpt.string(), "--text", "red circle", "--k", "4", "--seed", "3", "--out", p.string()})
                    .code == 0);
    CHECK(read_file(a) == read_file(b));
    const Image img = read_png(a);
    CHECK(img.height == 16);
    CHECK(img.channels == 3);

    // Plan extremes, a condition image and a grid.
    const auto cond = scratch() / "cond.png";
    write_png(cond, Image(16, 16, 1, 1.0));
    CHECK(cli({"sample", ckpt.string(), "--text", "blue cross", "--k", "1", "--out", a.string()}).code == 0);
    CHECK(cli({"sample", ckpt.string(), "--cond-image", cond.string(), "--k", "16", "--out", a.string()}).code == 0);
    CHECK(cli({"sample", ckpt.string(), "--k", "17", "--out", a.string()}).code == 2);
    CHECK(cli({"sample", ckpt.string(), "--grid", "2", "--guidance", "2", "--out", a.string()}).code == 0);
    CHECK(read_png(a).width == 32);

    // Checkpoint/config mismatch.
    const auto other = scratch() / "other.ini";
    std::ofstream(other) << kTinyConfig << "\n[policy]\noption = 8\n";
    CHECK(cli({"sample", ckpt.string(), "--config", other.string(), "--out", a.string()}).code == 2);
    CHECK(cli({"sample", ckpt.string(), "--config", cfg.string(), "--out", a.string()}).code == 0);

    const Run ev = cli({"eval", ckpt.string(), "--config", cfg.string(), "--samples", "9", "--k", "2"});
    CHECK(ev.code == 0);
    CHECK(std::regex_search(ev.out, std::regex(R"(conditional_accuracy=\d\.\d{4} \(\d+/9\))")));
    CHECK(std::regex_search(ev.out, std::regex(R"(null_accuracy=\d\.\d{4} \(\d+/9\))")));
}

TEST_CASE("same-seed training runs give identical loss traces") {
    const auto cfg = tiny_config("det.ini");
    const auto d1 = scratch() / "det1", d2 = scratch() / "det2";
    REQUIRE(cli({"train", cfg.string(), "--steps", "6", "--output-dir", d1.string()}).code == 0);
    REQUIRE(cli({"train", cfg.string(), "--steps", "6", "--output-dir", d2.string()}).code == 0);
    CHECK(read_file(d1 / "metrics.log") == read_file(d2 / "metrics.log"));
    CHECK(read_file(d1 / "checkpoint.bin") == read_file(d2 / "checkpoint.bin"));
}

TEST_CASE("dataset export") {
    const auto dir = scratch() / "data";
    fs::remove_all(dir);
    CHECK(cli({"dataset", "--out", dir.string(), "--count", "9", "--seed", "2"}).code == 0);
    CHECK(fs::exists(dir / "manifest.jsonl"));
    CHECK(fs::exists(dir / "target_00008.png"));
    CHECK(cli({"dataset", "--out", dir.string(), "--jitter", "wild"}).code == 2);
}

TEST_CASE("ablation table has eight rows and leakage follows the cross mode") {
    const auto cfg = tiny_config("ablate.ini");
    const Run r = cli({"ablate", cfg.string(), "--steps", "2"});
    REQUIRE(r.code == 0);
    std::istringstream table(r.out);
    std::vector<std::vector<std::string>> rows;
    bool footnote = false;
    for (std::string line; std::getline(table, line);) {
        if (line.find("FID") != std::string::npos) footnote = true;
        std::istringstream fields(line);
        std::vector<std::string> f;
        for (std::string w; fields >> w;) f.push_back(w);
        if (!f.empty() && std::all_of(f[0].begin(), f[0].end(), ::isdigit)) rows.push_back(f);
    }
    CHECK(footnote);
    REQUIRE(rows.size() == 8);
    for (int o = 1; o <= 8; ++o) {
        const auto& f = rows[static_cast<std::size_t>(o - 1)];
        CHECK(std::stoi(f[0]) == o);
        const double leak = std::stod(f.back());
        if (ablation_policy(o).cross == IntraMode::Causal) CHECK(leak == 0.0);
        else CHECK(leak > 0.0);
    }
    CHECK(fs::exists(scratch() / "ablate.ini.run" / "ablation.txt"));
}
