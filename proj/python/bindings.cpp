#include "selfctl/checkpoint.hpp"
#include "selfctl/cli.hpp"
#include "selfctl/config.hpp"
#include "selfctl/seqmask.hpp"
#include "selfctl/synthdata.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace selfctl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Image& img) {
    py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(img.height),
                                                     static_cast<py::ssize_t>(img.width),
                                                     static_cast<py::ssize_t>(img.channels)});
    std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
    return out;
}

// Accepts H x W (one channel) or H x W x C.
Image from_numpy(const Array& a) {
    if (a.ndim() != 2 && a.ndim() != 3) throw std::invalid_argument("image must be H x W or H x W x C");
    Image img(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
              a.ndim() == 3 ? static_cast<std::size_t>(a.shape(2)) : 1);
    std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
    return img;
}

py::array_t<double> mat_to_numpy(const Mat& m) {
    py::array_t<double> out(std::vector<py::ssize_t>{m.rows(), m.cols()});
    std::copy(m.data(), m.data() + m.size(), out.mutable_data());
    return out;
}

AttentionPolicy policy_from(const py::object& policy) {
    if (py::isinstance<py::int_>(policy)) return ablation_policy(policy.cast<int>());
    return parse_policy(policy.cast<std::string>());
}

py::dict sample_dict(const synth::Sample& s) {
    py::dict d;
    d["target"] = to_numpy(s.target);
    d["condition"] = to_numpy(s.condition);
    d["caption"] = s.caption;
    d["color"] = s.color;
    d["shape"] = s.shape;
    return d;
}

synth::Jitter jitter_named(const std::string& name) {
    if (name == "standard") return synth::Jitter::standard();
    if (name == "none") return synth::Jitter::none();
    throw std::invalid_argument("jitter must be 'standard' or 'none'");
}

class Model {
public:
    explicit Model(const std::string& checkpoint) : model_(load_checkpoint(checkpoint)) {}
    explicit Model(std::unique_ptr<MarModel> m) : model_(std::move(m)) {}

    std::vector<py::array_t<double>> generate(const std::vector<std::string>& texts, const py::object& cond_image,
                                              std::size_t k, double temperature, double guidance,
                                              std::uint64_t seed) const {
        ImageRequest proto;
        if (!cond_image.is_none()) proto.cond_image = from_numpy(cond_image.cast<Array>());
        std::vector<ImageRequest> reqs;
        for (const auto& t : texts) {
            ImageRequest r = proto;
            r.text = t;
            reqs.push_back(std::move(r));
        }
        std::vector<Image> images;
        {
            py::gil_scoped_release release;
            Rng rng(seed);
            images = generate_images(*model_, reqs, GenerateOptions{k, temperature, guidance}, rng);
        }
        std::vector<py::array_t<double>> out;
        for (const auto& img : images) out.push_back(to_numpy(img));
        return out;
    }

    std::pair<double, double> evaluate(int samples, int k, double temperature, std::uint64_t seed) const {
        EvalConfig eval;
        eval.samples = samples;
        eval.k = k;
        eval.temperature = temperature;
        eval.seed = seed;
        DataConfig data;
        py::gil_scoped_release release;
        return {evaluate_conditioning(*model_, eval, data, false).accuracy(),
                evaluate_conditioning(*model_, eval, data, true).accuracy()};
    }

    void save(const std::string& path) const { save_checkpoint(path, *model_); }
    std::string config_ini() const { return model_config_to_ini(model_->config()); }
    std::size_t parameter_count() const { return model_->params().scalar_count(); }

private:
    std::unique_ptr<MarModel> model_;
};

} // namespace

PYBIND11_MODULE(_selfctl, m) {
    m.doc() = "Masked autoregressive image generation with in-sequence conditioning";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    m.def(
        "attention_mask",
        [](std::size_t t, std::size_t c, std::size_t g, const py::object& policy) {
            const SegmentLayout layout(t, c, g);
            const AttentionMask mask = build_attention_mask(layout, policy_from(policy));
            py::array_t<bool> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(mask.size()),
                                                           static_cast<py::ssize_t>(mask.size())});
            auto v = out.mutable_unchecked<2>();
            for (std::size_t q = 0; q < mask.size(); ++q)
                for (std::size_t k = 0; k < mask.size(); ++k)
                    v(static_cast<py::ssize_t>(q), static_cast<py::ssize_t>(k)) = mask.allowed(q, k);
            return out;
        },
        py::arg("text_len"), py::arg("imgcond_len"), py::arg("gen_len"), py::arg("policy") = 3,
        "Boolean attention mask; policy is an ablation option 1..8 or 'text,imgcond,gen,cross'.");
    m.def(
        "mask_dump",
        [](std::size_t t, std::size_t c, std::size_t g, const py::object& policy) {
            const SegmentLayout layout(t, c, g);
            const AttentionPolicy p = policy_from(policy);
            return format_mask_dump(layout, p, build_attention_mask(layout, p));
        },
        py::arg("text_len"), py::arg("imgcond_len"), py::arg("gen_len"), py::arg("policy") = 3);
    m.def("ablation_policy", [](int option) { return to_string(ablation_policy(option)); }, py::arg("option"));

    m.def(
        "patchify", [](const Array& image, std::size_t patch) { return mat_to_numpy(patchify(from_numpy(image), patch).tokens); },
        py::arg("image"), py::arg("patch_size"));
    m.def(
        "unpatchify",
        [](const Array& tokens, std::size_t height, std::size_t width, std::size_t channels, std::size_t patch) {
            if (tokens.ndim() != 2) throw std::invalid_argument("tokens must be 2-D");
            ImageTokenGrid grid;
            grid.patch_size = patch;
            grid.channels = channels;
            grid.grid_h = height / patch;
            grid.grid_w = width / patch;
            grid.tokens = Mat(tokens.shape(0), tokens.shape(1));
            std::copy(tokens.data(), tokens.data() + tokens.size(), grid.tokens.data());
            if (grid.tokens.rows() != static_cast<Eigen::Index>(grid.num_patches()) ||
                grid.tokens.cols() != static_cast<Eigen::Index>(grid.token_dim()))
                throw std::invalid_argument("token array does not match the image geometry");
            return to_numpy(unpatchify(grid));
        },
        py::arg("tokens"), py::arg("height"), py::arg("width"), py::arg("channels"), py::arg("patch_size"));

    m.def("plan_step_sizes", &plan_step_sizes, py::arg("gen_len"), py::arg("steps"));
    m.def(
        "generation_plan",
        [](std::size_t gen_len, std::size_t steps, std::uint64_t seed) {
            Rng rng(seed);
            return make_generation_plan(gen_len, steps, rng).steps;
        },
        py::arg("gen_len"), py::arg("steps"), py::arg("seed") = 0);

    m.def(
        "make_sample",
        [](const std::string& color, const std::string& shape, const std::string& jitter, std::uint64_t seed) {
            Rng rng(seed);
            return sample_dict(synth::make_sample(color, shape, jitter_named(jitter), rng));
        },
        py::arg("color"), py::arg("shape"), py::arg("jitter") = "none", py::arg("seed") = 0);
    m.def(
        "make_dataset",
        [](std::size_t count, const std::string& jitter, std::uint64_t seed) {
            py::list out;
            for (const auto& s : synth::make_dataset(count, jitter_named(jitter), seed)) out.append(sample_dict(s));
            return out;
        },
        py::arg("count"), py::arg("jitter") = "standard", py::arg("seed") = 1);
    m.def(
        "probe_classify",
        [](const Array& image) {
            const auto r = synth::probe_classify(from_numpy(image));
            return std::make_pair(r.color, r.shape);
        },
        py::arg("image"));

    m.def(
        "train",
        [](const std::string& config_path, int steps, const std::string& output_dir) {
            RunConfig cfg = RunConfig::load(config_path);
            if (steps >= 0) cfg.train.steps = steps;
            if (!output_dir.empty()) cfg.output_dir = output_dir;
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = run_training(cfg);
            }
            return std::make_pair(Model(std::move(r.model)), r.losses);
        },
        py::arg("config"), py::arg("steps") = -1, py::arg("output_dir") = "",
        "Trains from a config file; returns (model, per-step losses).");

    py::class_<Model>(m, "Model")
        .def(py::init<const std::string&>(), py::arg("checkpoint"))
        .def("generate", &Model::generate, py::arg("texts"), py::arg("cond_image") = py::none(), py::arg("k") = 8,
             py::arg("temperature") = 1.0, py::arg("guidance") = 1.0, py::arg("seed") = 0,
             "One H x W x 3 image per caption; cond_image (H x W) is shared, None = null condition.")
        .def("evaluate", &Model::evaluate, py::arg("samples") = 180, py::arg("k") = 4, py::arg("temperature") = 1.0,
             py::arg("seed") = 7, "Probe accuracy (conditional, null-conditioned).")
        .def("save", &Model::save, py::arg("path"))
        .def("config_ini", &Model::config_ini)
        .def("parameter_count", &Model::parameter_count);

    m.def(
        "run_cli",
        [](std::vector<std::string> args) {
            args.insert(args.begin(), "selfctl");
            std::vector<char*> argv;
            for (auto& a : args) argv.push_back(a.data());
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs the command-line tool in-process; returns (exit code, stdout, stderr).");
}
