#include "selfctl/cli.hpp"

#include "selfctl/checkpoint.hpp"
#include "selfctl/errors.hpp"
#include "selfctl/image_io.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace selfctl {

namespace fs = std::filesystem;

synth::Jitter jitter_of(const DataConfig& data) {
    return synth::Jitter{data.jitter_offset, data.jitter_min_size, data.jitter_max_size};
}

namespace {

std::string fixed(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, format, v);
    return buf;
}

std::string metric_line(int step, double loss) {
    return "step=" + std::to_string(step) + " loss=" + fixed("%.9g", loss);
}

std::vector<TokenizedExample> tokenize_all(const MarModel& model, const std::vector<synth::Sample>& samples) {
    std::vector<TokenizedExample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(tokenize_example(model, s.caption, s.target, s.condition));
    return out;
}

std::pair<std::string, std::string> class_of(std::size_t i) {
    const std::size_t c = i % (synth::kColors.size() * synth::kShapes.size());
    return {synth::kColors[c / synth::kShapes.size()], synth::kShapes[c % synth::kShapes.size()]};
}

} // namespace

double trailing_mean(const std::vector<double>& values, std::size_t window) {
    if (values.empty()) return 0.0;
    const std::size_t n = std::min(window, values.size());
    double sum = 0.0;
    for (std::size_t i = values.size() - n; i < values.size(); ++i) sum += values[i];
    return sum / static_cast<double>(n);
}

TrainResult run_training(const RunConfig& cfg, std::ostream* log) {
    cfg.validate();
    const auto samples =
        synth::make_dataset(static_cast<std::size_t>(cfg.data.num_samples), jitter_of(cfg.data), cfg.data.seed);
    TrainResult result;
    result.model = std::make_unique<MarModel>(cfg.model, TextVocab::from_captions(synth::all_captions()), cfg.train.seed);
    MarModel& model = *result.model;
    if (!cfg.init_checkpoint.empty()) load_parameters(cfg.init_checkpoint, model);
    const auto examples = tokenize_all(model, samples);

    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    cfg.save(dir / "config.ini");
    model.vocab().save(dir / "vocab.txt");
    std::ofstream metrics(dir / "metrics.log", std::ios::trunc);
    if (!metrics) throw ConfigError("cannot write " + (dir / "metrics.log").string());

    Trainer trainer(model, cfg.train);
    Rng rng(cfg.train.seed * 0x9E3779B97F4A7C15ull + 1);
    std::uniform_int_distribution<std::size_t> pick(0, examples.size() - 1);
    std::vector<TokenizedExample> batch(static_cast<std::size_t>(cfg.train.batch_size));
    result.losses.reserve(static_cast<std::size_t>(cfg.train.steps));

    for (int step = 1; step <= cfg.train.steps; ++step) {
        for (auto& ex : batch) ex = examples[pick(rng)];
        const double loss = trainer.step(batch, rng);
        result.losses.push_back(loss);
        if (step % cfg.log_every == 0 || step == cfg.train.steps) {
            const std::string line = metric_line(step, loss);
            metrics << line << '\n';
            metrics.flush();
            if (log) *log << line << '\n' << std::flush;
        }
        if (step % cfg.checkpoint_every == 0 || step == cfg.train.steps) save_checkpoint(dir / "checkpoint.bin", model);
    }
    if (cfg.train.steps == 0) save_checkpoint(dir / "checkpoint.bin", model);
    return result;
}

ConditioningScore evaluate_conditioning(const MarModel& model, const EvalConfig& eval, const DataConfig& data,
                                        bool null_conditions) {
    Rng rng(eval.seed);
    const auto jitter = jitter_of(data);
    const GenerateOptions opts{static_cast<std::size_t>(eval.k), eval.temperature, eval.guidance};
    constexpr std::size_t kChunk = 60;

    ConditioningScore score;
    const auto total = static_cast<std::size_t>(eval.samples);
    for (std::size_t begin = 0; begin < total; begin += kChunk) {
        const std::size_t end = std::min(total, begin + kChunk);
        std::vector<ImageRequest> requests;
        std::vector<std::pair<std::string, std::string>> wanted;
        for (std::size_t i = begin; i < end; ++i) {
            const auto [color, shape] = class_of(i);
            synth::Sample s = synth::make_sample(color, shape, jitter, rng);
            ImageRequest r;
            r.text = s.caption;
            if (!null_conditions) r.cond_image = std::move(s.condition);
            r.null_text = null_conditions;
            requests.push_back(std::move(r));
            wanted.emplace_back(color, shape);
        }
        const auto images = generate_images(model, requests, opts, rng);
        for (std::size_t j = 0; j < images.size(); ++j) {
            const auto probe = synth::probe_classify(images[j]);
            ++score.total;
            if (probe.color == wanted[j].first && probe.shape == wanted[j].second) ++score.correct;
        }
    }
    return score;
}

double leakage_indicator(const MarModel& model, const DataConfig& data, std::uint64_t seed) {
    const auto samples = synth::make_dataset(2, jitter_of(data), seed);
    SequenceBatch batch = assemble_batch(model, tokenize_all(model, samples));
    const std::size_t gen = batch.layout.gen_len();
    for (std::size_t b = 0; b < batch.batch_size; ++b)
        for (std::size_t i = 0; i < gen; ++i) batch.visible[b * gen + i] = (i % 2 == 0) ? 1 : 0;
    Rng rng(seed + 17);
    return max_condition_sensitivity(model.backbone(), batch, 8, rng);
}

std::vector<AblationRow> run_ablation(const RunConfig& base, std::ostream* log) {
    std::vector<AblationRow> rows;
    for (int option = 1; option <= 8; ++option) {
        AblationRow row;
        row.option = option;
        row.policy = ablation_policy(option);
        RunConfig cfg = base;
        cfg.model.policy = row.policy;
        cfg.output_dir = (fs::path(base.output_dir) / ("option_" + std::to_string(option))).string();
        if (log) *log << "option " << option << " (" << to_string(row.policy) << ")\n" << std::flush;
        try {
            TrainResult run = run_training(cfg, nullptr);
            row.smoothed_loss = trailing_mean(run.losses, 100);
            row.accuracy = evaluate_conditioning(*run.model, cfg.eval, cfg.data, false).accuracy();
            row.leakage = leakage_indicator(*run.model, cfg.data, cfg.data.seed + 1000);
            row.ok = true;
        } catch (const std::exception& e) {
            row.error = e.what();
            if (log) *log << "option " << option << " failed: " << e.what() << '\n';
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-7s %-14s %-14s %-14s %-13s %-13s %s\n", "option", "text", "image",
                  "multimodal", "smooth_loss", "cond_acc", "leakage");
    os << buf;
    for (const auto& r : rows) {
        const std::string head =
            (std::snprintf(buf, sizeof buf, "%-7d %-14s %-14s %-14s ", r.option, to_string(r.policy.text).c_str(),
                           to_string(r.policy.imgcond).c_str(), to_string(r.policy.cross).c_str()),
             std::string(buf));
        if (r.ok) {
            std::snprintf(buf, sizeof buf, "%-13.6f %-13.3f %.3e\n", r.smoothed_loss, r.accuracy, r.leakage);
            os << head << buf;
        } else {
            os << head << "failed: " << r.error << '\n';
        }
    }
    os << "\nsmooth_loss: mean of the last 100 training losses. leakage: max |d condition output / d generated\n"
          "input| (random projections). FID and IS are not computed at this scale, so the table has no\n"
          "columns for them.\n";
    return os.str();
}

namespace {

std::vector<std::size_t> parse_layout(const std::string& text) {
    std::vector<std::size_t> v;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        std::size_t pos = 0;
        long long n = -1;
        try {
            n = std::stoll(part, &pos);
        } catch (const std::exception&) {
        }
        if (n < 0 || pos != part.size()) throw ConfigError("--layout expects t,c,g with non-negative integers");
        v.push_back(static_cast<std::size_t>(n));
    }
    if (v.size() != 3) throw ConfigError("--layout expects exactly three lengths t,c,g");
    return v;
}

Image as_condition(const Image& img, const ImageGeometry& geom) {
    if (static_cast<int>(img.height) != geom.image_size || static_cast<int>(img.width) != geom.image_size)
        throw ConfigError("condition image must be " + std::to_string(geom.image_size) + "x" +
                          std::to_string(geom.image_size));
    if (img.channels == 1) return img;
    Image out(img.height, img.width, 1);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) out.at(y, x, 0) = synth::luminance(img, y, x);
    return out;
}

struct Options {
    std::string config;
    int steps = -1;
    std::string output_dir;

    std::string checkpoint;
    std::string text;
    std::string cond_image;
    std::size_t k = 8;
    double temperature = 1.0;
    double guidance = 1.0;
    std::uint64_t seed = 0;
    std::string out;
    std::size_t grid = 0;
    std::string check_config;

    std::string layout;
    std::string policy;
    int option = 0;
    std::size_t reach = 0;

    int samples = 0;
    bool k_set = false;
    bool temperature_set = false;

    std::string data_dir;
    std::size_t count = 90;
    std::string jitter = "standard";
};

RunConfig load_run_config(const Options& o) {
    RunConfig cfg = RunConfig::load(o.config);
    if (o.steps >= 0) cfg.train.steps = o.steps;
    if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
    return cfg;
}

int cmd_train(const Options& o, std::ostream& out) {
    const RunConfig cfg = load_run_config(o);
    const TrainResult r = run_training(cfg, &out);
    out << "checkpoint written to " << (fs::path(cfg.output_dir) / "checkpoint.bin").string() << '\n';
    (void)r;
    return kExitOk;
}

int cmd_sample(const Options& o, std::ostream& out) {
    auto model = load_checkpoint(o.checkpoint);
    if (!o.check_config.empty()) {
        const RunConfig cfg = RunConfig::load(o.check_config);
        if (!(cfg.model == model->config()))
            throw ConfigError("checkpoint/config mismatch: " + o.checkpoint + " was not trained with " + o.check_config);
    }
    const auto gen_len = static_cast<std::size_t>(model->config().geometry.num_patches());
    if (o.k < 1 || o.k > gen_len)
        throw ConfigError("--k must be in 1.." + std::to_string(gen_len));
    if (o.temperature < 0.0) throw ConfigError("--temperature must be non-negative");

    ImageRequest req;
    req.text = o.text;
    if (!o.cond_image.empty()) req.cond_image = as_condition(read_png(o.cond_image), model->config().geometry);
    const std::size_t n = o.grid == 0 ? 1 : o.grid * o.grid;
    std::vector<ImageRequest> requests(n, req);
    Rng rng(o.seed);
    const auto images = generate_images(*model, requests, GenerateOptions{o.k, o.temperature, o.guidance}, rng);
    write_png(o.out, o.grid == 0 ? images.front() : tile_images(images, o.grid));
    out << "wrote " << o.out << '\n';
    return kExitOk;
}

int cmd_mask(const Options& o, std::ostream& out) {
    const auto l = parse_layout(o.layout);
    AttentionPolicy policy;
    try {
        policy = o.option != 0 ? ablation_policy(o.option) : parse_policy(o.policy);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    const SegmentLayout layout = [&] {
        try {
            return SegmentLayout(l[0], l[1], l[2]);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    }();
    const AttentionMask mask = build_attention_mask(layout, policy);
    out << format_mask_dump(layout, policy, mask);
    if (o.reach > 0) {
        out << "reach depth=" << o.reach << '\n';
        out << reachability(mask, o.reach).rows_string();
    }
    return kExitOk;
}

int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = load_run_config(o);
    cfg.validate();
    const auto rows = run_ablation(cfg, &err);
    const std::string table = format_ablation_table(rows);
    out << table;
    fs::create_directories(cfg.output_dir);
    std::ofstream(fs::path(cfg.output_dir) / "ablation.txt") << table;
    return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
    auto model = load_checkpoint(o.checkpoint);
    RunConfig cfg;
    if (!o.config.empty()) {
        cfg = RunConfig::load(o.config);
        if (!(cfg.model == model->config()))
            throw ConfigError("checkpoint/config mismatch: " + o.checkpoint + " was not trained with " + o.config);
    }
    if (o.samples > 0) cfg.eval.samples = o.samples;
    if (o.k_set) cfg.eval.k = static_cast<int>(o.k);
    if (o.temperature_set) cfg.eval.temperature = o.temperature;
    cfg.validate();
    const auto cond = evaluate_conditioning(*model, cfg.eval, cfg.data, false);
    const auto null = evaluate_conditioning(*model, cfg.eval, cfg.data, true);
    out << "conditional_accuracy=" << fixed("%.4f", cond.accuracy()) << " (" << cond.correct << "/" << cond.total
        << ")\n";
    out << "null_accuracy=" << fixed("%.4f", null.accuracy()) << " (" << null.correct << "/" << null.total << ")\n";
    return kExitOk;
}

int cmd_dataset(const Options& o, std::ostream& out) {
    synth::Jitter jitter;
    if (o.jitter == "standard") jitter = synth::Jitter::standard();
    else if (o.jitter == "none") jitter = synth::Jitter::none();
    else throw ConfigError("--jitter must be 'standard' or 'none'");
    synth::export_dataset(synth::make_dataset(o.count, jitter, o.seed), o.data_dir);
    out << "wrote " << o.count << " samples to " << o.data_dir << '\n';
    return kExitOk;
}

} // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Masked autoregressive image generation with in-sequence conditioning"};
    app.require_subcommand(1);
    Options o;

    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("config", o.config, "config file")->required();
    train->add_option("--steps", o.steps, "override train.steps")->check(CLI::NonNegativeNumber);
    train->add_option("--output-dir", o.output_dir, "override paths.output_dir");

    auto* sample = app.add_subcommand("sample", "generate images from a checkpoint");
    sample->add_option("checkpoint", o.checkpoint, "checkpoint file")->required();
    sample->add_option("--text", o.text, "caption");
    sample->add_option("--cond-image", o.cond_image, "condition PNG (omitted = null condition)");
    sample->add_option("--k", o.k, "number of generation steps");
    sample->add_option("--temperature", o.temperature, "diffusion sampling temperature");
    sample->add_option("--guidance", o.guidance, "classifier-free guidance scale (1 = off)");
    sample->add_option("--seed", o.seed, "random seed");
    sample->add_option("--out", o.out, "output PNG")->required();
    sample->add_option("--grid", o.grid, "write an n x n grid of samples")->check(CLI::PositiveNumber);
    sample->add_option("--config", o.check_config, "refuse to sample unless the checkpoint matches this config");

    auto* mask = app.add_subcommand("mask", "print an attention mask");
    mask->add_option("--layout", o.layout, "segment lengths t,c,g")->required();
    auto* pol = mask->add_option("--policy", o.policy, "text,imgcond,gen,cross modes");
    auto* opt = mask->add_option("--option", o.option, "ablation option 1..8");
    pol->excludes(opt);
    opt->excludes(pol);
    mask->add_option("--reach", o.reach, "also print depth-d reachability")->check(CLI::PositiveNumber);

    auto* ablate = app.add_subcommand("ablate", "train and compare the eight attention policies");
    ablate->add_option("config", o.config, "config file")->required();
    ablate->add_option("--steps", o.steps, "override train.steps")->check(CLI::NonNegativeNumber);
    ablate->add_option("--output-dir", o.output_dir, "override paths.output_dir");

    auto* eval = app.add_subcommand("eval", "score conditioning fidelity of a checkpoint with the probe");
    eval->add_option("checkpoint", o.checkpoint, "checkpoint file")->required();
    eval->add_option("--config", o.config, "config supplying [eval] and [data] settings");
    eval->add_option("--samples", o.samples, "number of generated samples per mode")->check(CLI::PositiveNumber);
    auto* eval_k = eval->add_option("--k", o.k, "number of generation steps");
    auto* eval_t = eval->add_option("--temperature", o.temperature, "diffusion sampling temperature");

    auto* dataset = app.add_subcommand("dataset", "export the synthetic dataset");
    dataset->add_option("--out", o.data_dir, "output directory")->required();
    dataset->add_option("--count", o.count, "number of samples");
    dataset->add_option("--seed", o.seed, "random seed");
    dataset->add_option("--jitter", o.jitter, "standard or none");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*train) return cmd_train(o, out);
        if (*sample) return cmd_sample(o, out);
        if (*mask) {
            if (o.policy.empty() && o.option == 0) throw ConfigError("mask needs --policy or --option");
            return cmd_mask(o, out);
        }
        if (*ablate) return cmd_ablate(o, out, err);
        if (*eval) {
            o.k_set = eval_k->count() > 0;
            o.temperature_set = eval_t->count() > 0;
            return cmd_eval(o, out);
        }
        if (*dataset) return cmd_dataset(o, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::out_of_range& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace selfctl
