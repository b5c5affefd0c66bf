// python module exposing the main pipeline operations with numpy interop

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "musekit/pipeline.hpp"

#include <cstring>

namespace py = pybind11;
using namespace musekit;

namespace {

py::array_t<uint8_t> image_to_array(const SceneImage & img) {
    py::array_t<uint8_t> a({img.height, img.width, 3});
    std::memcpy(a.mutable_data(), img.pixels.data(), img.pixels.size());
    return a;
}

SceneImage array_to_image(const py::array & arr) {
    auto a = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>::ensure(arr);
    require(a && a.ndim() == 3 && a.shape(2) == 3, error_kind::shape,
            "image array must be [H,W,3] uint8");
    SceneImage img;
    img.height = (int)a.shape(0);
    img.width = (int)a.shape(1);
    img.pixels.assign((size_t)img.height * img.width * 3, 0);
    std::memcpy(img.pixels.data(), a.data(), img.pixels.size());
    return img;
}

DTensor array_to_dtensor2(const py::array & arr, const char * what) {
    auto a = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(arr);
    require(a && a.ndim() == 2, error_kind::shape, std::string(what) + " must be a 2D array");
    DTensor t = DTensor::zeros({(int)a.shape(0), (int)a.shape(1)});
    std::memcpy(t.data.data(), a.data(), sizeof(double) * (size_t)t.size());
    return t;
}

py::array_t<double> dtensor_to_array2(const DTensor & t) {
    py::array_t<double> a({(py::ssize_t)t.rows(), (py::ssize_t)t.cols()});
    std::memcpy(a.mutable_data(), t.data.data(), sizeof(double) * (size_t)t.size());
    return a;
}

py::dict report_to_dict(const AlignmentReport & r) {
    py::dict d;
    d["overall"] = r.overall;
    d["no_extras"] = r.no_extras;
    py::list groups;
    for (const GroupReport & g : r.groups) {
        py::dict gd;
        gd["count_ok"] = g.count_ok;
        gd["color_ok"] = g.color_ok;
        gd["shape_ok"] = g.shape_ok;
        groups.append(gd);
    }
    d["groups"] = groups;
    if (r.relation_ok.has_value()) d["relation_ok"] = *r.relation_ok;
    else d["relation_ok"] = py::none();
    return d;
}

SamplerConfig sampler_from_kwargs(int steps_base, int steps_superres, double t_max,
                                  const std::string & ramp, double temperature,
                                  double choice_temperature, const std::string & negative_prompt) {
    SamplerConfig c;
    c.steps_base = steps_base;
    c.steps_superres = steps_superres;
    c.t_max = t_max;
    c.ramp = ramp_from_name(ramp);
    c.temperature = temperature;
    c.choice_temperature = choice_temperature;
    c.negative_prompt = negative_prompt;
    c.check();
    return c;
}

} // namespace

PYBIND11_MODULE(_musekit, m) {
    m.doc() = "masked generative transformer pipeline (token-based text-to-image)";

    py::register_exception<musekit::error>(m, "MusekitError");

    py::class_<RngState>(m, "RngState")
        .def(py::init([](uint64_t seed) { return RngState::seeded(seed); }), py::arg("seed"))
        .def("uniform", &RngState::uniform)
        .def("normal", &RngState::normal)
        .def("below", &RngState::below, py::arg("n"))
        .def("split", &RngState::split, py::arg("salt"));

    m.def("softmax", [](const std::vector<double> & logits) {
        DTensor t = DTensor::zeros({(int)logits.size()});
        for (size_t i = 0; i < logits.size(); ++i) t[(int64_t)i] = logits[i];
        DTensor s = softmax(t, 0);
        return std::vector<double>(s.data.begin(), s.data.end());
    }, py::arg("logits"));

    m.def("sample_mask_rate", [](double u) { return sample_mask_rate(u); }, py::arg("u"));
    m.def("cosine_lr", &cosine_lr, py::arg("step"), py::arg("total_steps"), py::arg("warmup_steps"),
          py::arg("base_lr"));
    m.def("masked_count", &masked_count, py::arg("s"), py::arg("S"), py::arg("N"),
          py::arg("prev_masked"));
    m.def("guidance_at_step", [](int s, int S, double t_max, const std::string & ramp) {
        return guidance_at_step(s, S, t_max, ramp_from_name(ramp));
    }, py::arg("s"), py::arg("S"), py::arg("t_max"), py::arg("ramp") = "constant");
    m.def("cfg_logits", [](const py::array & lc, const py::array & lu, double t) {
        return dtensor_to_array2(cfg_logits(array_to_dtensor2(lc, "lc"),
                                            array_to_dtensor2(lu, "lu"), t));
    }, py::arg("lc"), py::arg("lu"), py::arg("t"));

    m.def("render_caption", [](const std::string & caption, const std::string & role, uint64_t seed) {
        RngState rng = RngState::seeded(seed);
        const resolution_role rr = role == "low" ? resolution_role::low : resolution_role::high;
        return image_to_array(render(parse_caption(caption), rr, rng));
    }, py::arg("caption"), py::arg("role") = "high", py::arg("seed") = 0);
    m.def("verify_caption", [](const py::array & image, const std::string & caption) {
        return report_to_dict(verify(array_to_image(image), parse_caption(caption)));
    }, py::arg("image"), py::arg("caption"));
    m.def("generate_dataset", &generate_dataset, py::arg("dir"), py::arg("count"), py::arg("seed"));

    m.def("frechet_distance", [](const py::array & a, const py::array & b) {
        auto to_stats = [](const py::array & arr, const char * what) {
            DTensor t = array_to_dtensor2(arr, what);
            std::vector<std::vector<double>> rows((size_t)t.rows());
            for (int i = 0; i < t.rows(); ++i) {
                rows[(size_t)i].assign(t.data.begin() + (size_t)i * t.cols(),
                                       t.data.begin() + (size_t)(i + 1) * t.cols());
            }
            return feature_stats_from_vectors(rows);
        };
        return frechet_distance(to_stats(a, "a"), to_stats(b, "b"));
    }, py::arg("features_a"), py::arg("features_b"),
       "Frechet distance between two [n,d] feature-vector sets (n >= 65)");

    py::class_<Pipeline>(m, "Pipeline")
        .def_static("load", &Pipeline::load, py::arg("tokenizer_base"), py::arg("tokenizer_highres"),
                    py::arg("base"), py::arg("superres"))
        .def_static("random_init", &Pipeline::random_init, py::arg("seed"))
        .def("generate",
             [](const Pipeline & p, const std::string & caption, uint64_t seed, int steps_base,
                int steps_superres, double t_max, const std::string & ramp, double temperature,
                double choice_temperature, const std::string & negative_prompt) {
                 SamplerConfig cfg =
                     sampler_from_kwargs(steps_base, steps_superres, t_max, ramp, temperature,
                                         choice_temperature, negative_prompt);
                 RngState rng = RngState::seeded(seed);
                 GenerateResult g = p.generate(caption, cfg, rng);
                 py::dict info;
                 info["base_cond_forwards"] = g.base_counters.cond_forwards;
                 info["base_uncond_forwards"] = g.base_counters.uncond_forwards;
                 info["sr_cond_forwards"] = g.sr_counters.cond_forwards;
                 info["sr_uncond_forwards"] = g.sr_counters.uncond_forwards;
                 info["low_tokens"] = g.low.tokens;
                 info["high_tokens"] = g.high.tokens;
                 return py::make_tuple(image_to_array(g.image), info);
             },
             py::arg("caption"), py::arg("seed") = 0, py::arg("steps_base") = 12,
             py::arg("steps_superres") = 6, py::arg("t_max") = 4.0, py::arg("ramp") = "constant",
             py::arg("temperature") = 1.0, py::arg("choice_temperature") = 1.0,
             py::arg("negative_prompt") = "");
}
