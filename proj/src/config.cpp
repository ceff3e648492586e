#include "selfctl/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace selfctl {

namespace {

namespace pt = boost::property_tree;

struct Field {
    std::string section;
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
T parse_number(const std::string& section, const std::string& key, const std::string& text) {
    T value{};
    const char* begin = text.data();
    const char* end = begin + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end)
        throw ConfigError("invalid value '" + text + "' for " + section + "." + key);
    return value;
}

template <class T>
Field number(const std::string& section, const std::string& key, T& ref) {
    return Field{section, key,
                 [&ref] {
                     if constexpr (std::is_floating_point_v<T>) return fmt(ref);
                     else return std::to_string(ref);
                 },
                 [&ref, section, key](const std::string& s) { ref = parse_number<T>(section, key, s); }};
}

Field text(const std::string& section, const std::string& key, std::string& ref) {
    return Field{section, key, [&ref] { return ref; }, [&ref](const std::string& s) { ref = s; }};
}

Field mode(const std::string& section, const std::string& key, IntraMode& ref) {
    return Field{section, key, [&ref] { return to_string(ref); },
                 [&ref, section, key](const std::string& s) {
                     try {
                         ref = parse_intra_mode(s);
                     } catch (const std::invalid_argument& e) {
                         throw ConfigError(section + "." + key + ": " + e.what());
                     }
                 }};
}

std::vector<Field> model_fields(ModelConfig& m) {
    return {
        number("model", "image_size", m.geometry.image_size),
        number("model", "patch_size", m.geometry.patch_size),
        number("model", "channels", m.geometry.channels),
        number("model", "cond_channels", m.geometry.cond_channels),
        number("model", "text_max_len", m.geometry.text_max_len),
        number("model", "width", m.width),
        number("model", "depth_enc", m.depth_enc),
        number("model", "depth_dec", m.depth_dec),
        number("model", "heads", m.heads),
        number("model", "mlp_ratio", m.mlp_ratio),
        number("diffhead", "hidden", m.head_hidden),
        number("diffhead", "blocks", m.head_blocks),
        number("diffhead", "time_dim", m.head_time_dim),
        number("diffhead", "train_steps", m.schedule.train_steps),
        number("diffhead", "beta_start", m.schedule.beta_start),
        number("diffhead", "beta_end", m.schedule.beta_end),
        number("diffhead", "sample_steps", m.schedule.sample_steps),
        mode("policy", "text", m.policy.text),
        mode("policy", "imgcond", m.policy.imgcond),
        mode("policy", "gen", m.policy.gen),
        mode("policy", "cross", m.policy.cross),
    };
}

std::vector<Field> run_fields(RunConfig& c) {
    auto fields = model_fields(c.model);
    std::vector<Field> rest{
        number("train", "batch_size", c.train.batch_size),
        number("train", "lr", c.train.lr),
        number("train", "steps", c.train.steps),
        number("train", "mask_ratio_lo", c.train.mask_ratio_lo),
        number("train", "mask_ratio_hi", c.train.mask_ratio_hi),
        number("train", "condition_dropout", c.train.condition_dropout),
        number("train", "seed", c.train.seed),
        number("train", "diffusion_repeats", c.train.diffusion_repeats),
        number("train", "grad_clip", c.train.grad_clip),
        number("train", "log_every", c.log_every),
        number("train", "checkpoint_every", c.checkpoint_every),
        number("data", "num_samples", c.data.num_samples),
        number("data", "seed", c.data.seed),
        number("data", "jitter_offset", c.data.jitter_offset),
        number("data", "jitter_min_size", c.data.jitter_min_size),
        number("data", "jitter_max_size", c.data.jitter_max_size),
        number("eval", "k", c.eval.k),
        number("eval", "temperature", c.eval.temperature),
        number("eval", "guidance", c.eval.guidance),
        number("eval", "samples", c.eval.samples),
        number("eval", "seed", c.eval.seed),
        text("paths", "output_dir", c.output_dir),
        text("paths", "init_checkpoint", c.init_checkpoint),
    };
    fields.insert(fields.end(), rest.begin(), rest.end());
    return fields;
}

void apply_ini(const std::string& ini, std::vector<Field>& fields) {
    pt::ptree tree;
    std::istringstream is(ini);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    std::map<std::string, Field*> by_name;
    for (auto& f : fields) by_name[f.section + "." + f.key] = &f;

    std::string option_value;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw ConfigError("key '" + section + "' must live inside a [section]");
        for (const auto& [key, value] : body) {
            const std::string name = section + "." + key;
            if (name == "policy.option") {
                option_value = value.data();
                continue;
            }
            auto it = by_name.find(name);
            if (it == by_name.end()) throw ConfigError("unknown config key '" + name + "'");
            it->second->set(value.data());
        }
    }
    if (!option_value.empty()) {
        // A Table-style option number sets the three ablated modes at once;
        // explicit policy keys are not allowed alongside it.
        for (const char* k : {"text", "imgcond", "gen", "cross"})
            if (tree.get_child_optional(std::string("policy.") + k))
                throw ConfigError("policy.option cannot be combined with policy." + std::string(k));
        const int option = parse_number<int>("policy", "option", option_value);
        try {
            const AttentionPolicy p = ablation_policy(option);
            by_name["policy.text"]->set(to_string(p.text));
            by_name["policy.imgcond"]->set(to_string(p.imgcond));
            by_name["policy.gen"]->set(to_string(p.gen));
            by_name["policy.cross"]->set(to_string(p.cross));
        } catch (const std::out_of_range& e) {
            throw ConfigError(e.what());
        }
    }
}

std::string emit_ini(const std::vector<Field>& fields) {
    std::ostringstream os;
    std::string current;
    for (const auto& f : fields) {
        if (f.section != current) {
            if (!current.empty()) os << '\n';
            os << '[' << f.section << "]\n";
            current = f.section;
        }
        os << f.key << " = " << f.get() << '\n';
    }
    return os.str();
}

} // namespace

RunConfig RunConfig::parse(const std::string& ini) {
    RunConfig cfg;
    auto fields = run_fields(cfg);
    apply_ini(ini, fields);
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string RunConfig::to_ini() const {
    RunConfig copy = *this;
    return emit_ini(run_fields(copy));
}

void RunConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config file " + path.string());
    out << to_ini();
}

void RunConfig::validate() const {
    try {
        model.validate();
        train.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (data.num_samples < 1) throw ConfigError("data.num_samples must be >= 1");
    if (data.jitter_offset < 0 || data.jitter_min_size < 1 || data.jitter_max_size < data.jitter_min_size ||
        data.jitter_max_size > model.geometry.image_size)
        throw ConfigError("data jitter bounds are inconsistent");
    if (eval.k < 1 || eval.k > model.geometry.num_patches())
        throw ConfigError("eval.k must be in 1..number of generated tokens");
    if (eval.temperature < 0.0) throw ConfigError("eval.temperature must be non-negative");
    if (eval.samples < 1) throw ConfigError("eval.samples must be >= 1");
    if (log_every < 1 || checkpoint_every < 1) throw ConfigError("log_every and checkpoint_every must be >= 1");
    if (output_dir.empty()) throw ConfigError("paths.output_dir must not be empty");
    if (!init_checkpoint.empty() && !std::filesystem::exists(init_checkpoint))
        throw ConfigError("paths.init_checkpoint does not exist: " + init_checkpoint);
    if (model.geometry.image_size != 16 || model.geometry.channels != 3 || model.geometry.cond_channels != 1)
        throw ConfigError("the synthetic dataset needs image_size 16, channels 3, cond_channels 1");
}

std::string model_config_to_ini(const ModelConfig& cfg) {
    ModelConfig copy = cfg;
    return emit_ini(model_fields(copy));
}

ModelConfig parse_model_config(const std::string& ini) {
    ModelConfig cfg;
    auto fields = model_fields(cfg);
    apply_ini(ini, fields);
    return cfg;
}

} // namespace selfctl
