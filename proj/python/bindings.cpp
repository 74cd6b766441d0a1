// Python bindings. Images cross the boundary as float32 numpy arrays
// [N, 3, R, R] in [-1, 1]; everything else as plain numbers and strings.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <sstream>

#include <torch/torch.h>

#include "xswap/cli.hpp"
#include "xswap/config.hpp"
#include "xswap/encoders.hpp"
#include "xswap/error.hpp"
#include "xswap/evalkit.hpp"
#include "xswap/generator.hpp"
#include "xswap/image.hpp"
#include "xswap/jobs.hpp"
#include "xswap/losses.hpp"
#include "xswap/pipeline.hpp"
#include "xswap/procfaces.hpp"
#include "xswap/training.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace xswap;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

torch::Tensor to_tensor(const DoubleArray& a) {
  std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

template <typename T>
py::array_t<T> to_numpy(const torch::Tensor& t) {
  auto c = t.detach().to(c10::CppTypeToScalarType<T>::value).contiguous();
  py::array_t<T> out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.template data_ptr<T>(), sizeof(T) * static_cast<std::size_t>(c.numel()));
  return out;
}

py::array_t<float> images_out(const torch::Tensor& t) { return to_numpy<float>(t); }

// Accepts either the file itself or the job directory that holds it.
fs::path artifact_path(const fs::path& p, const char* name) {
  return fs::is_directory(p) ? p / name : p;
}

// A trained swap model loaded from a train job directory.
class SwapModel {
 public:
  explicit SwapModel(const fs::path& run) {
    auto lr = jobs::load_run(run);
    frozen_ = lr.frozen;
    nets_ = load_swap_nets(lr.checkpoint);
    checkpoint_ = lr.checkpoint;
  }
  py::array_t<float> swap(const FloatArray& source, const FloatArray& target) const {
    auto s = to_tensor(source), t = to_tensor(target);
    torch::Tensor y;
    {
      py::gil_scoped_release nogil;
      torch::NoGradGuard ng;
      y = xswap::swap(*frozen_, nets_, s, t);
    }
    return images_out(y);
  }
  py::array_t<float> embed(const FloatArray& images) const {
    auto x = to_tensor(images);
    torch::Tensor e;
    {
      py::gil_scoped_release nogil;
      torch::NoGradGuard ng;
      e = frozen_->identity.encode(x);
    }
    return to_numpy<float>(e);
  }
  std::int64_t resolution() const { return frozen_->generator.resolution(); }
  std::string checkpoint() const { return checkpoint_.string(); }

 private:
  std::shared_ptr<FrozenParts> frozen_;
  SwapNets nets_;
  fs::path checkpoint_;
};

int run_cli(const std::vector<std::string>& args) {
  std::optional<std::string> env_out;
  if (const char* e = std::getenv("XSWAP_OUT")) env_out = e;
  cli::JobSpec spec;
  try {
    spec = cli::parse_args(args, env_out);
  } catch (const cli::UsageError& e) {
    py::print("usage error:", e.what(), py::arg("file") = py::module_::import("sys").attr("stderr"));
    return cli::kExitUsage;
  }
  if (spec.help) {
    py::print(spec.help_text, py::arg("end") = "");
    return cli::kExitOk;
  }
  std::ostringstream err;
  int code;
  {
    py::gil_scoped_release nogil;
    code = cli::dispatch(spec, err);
  }
  if (!err.str().empty()) py::print(err.str(), py::arg("end") = "", py::arg("file") = py::module_::import("sys").attr("stderr"));
  return code;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Desk-scale face swapping: procedural faces, toy GAN, encoders, latent mapper.";
  at::set_num_threads(1);

  // Translators are tried newest first, so the base class goes first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("set_num_threads", [](int n) { at::set_num_threads(n); }, py::arg("n"));
  m.def("num_styles", &num_styles, py::arg("resolution"));
  m.def("split_sizes", &split_sizes, py::arg("n"), py::arg("train_fraction"));

  m.def("default_config", [] { return format_config(RunConfig{}); }, "Every config key with its default value.");
  m.def(
      "check_config",
      [](const std::string& text) {
        auto cfg = parse_config(text);
        cfg.validate();
        return format_config(cfg);
      },
      py::arg("text"), "Parse and validate config text; returns the normalized full form.");

  m.def("cli", &run_cli, py::arg("args"),
        "Run one CLI subcommand, e.g. cli(['gen-faces', '--config', 'c.cfg', '--out', 'd']). Returns the exit code.");

  m.def(
      "make_corpus",
      [](std::int64_t identities, std::int64_t per_identity, std::int64_t resolution, std::uint64_t seed) {
        procfaces::Corpus c;
        {
          py::gil_scoped_release nogil;
          c = procfaces::make_corpus(identities, per_identity, resolution, seed);
        }
        auto labels = eval::factor_labels(c);
        py::dict d;
        d["images"] = images_out(c.images());
        d["identity"] = to_numpy<std::int64_t>(c.labels());
        d["yaw"] = to_numpy<double>(labels.select(1, 0));
        d["mouth_curve"] = to_numpy<double>(labels.select(1, 1));
        return d;
      },
      py::arg("identities"), py::arg("per_identity"), py::arg("resolution"), py::arg("seed") = 0,
      "Procedural face corpus: dict of images, identity labels, yaw (degrees) and mouth curve.");

  m.def("sample_z", [](std::uint64_t seed, std::int64_t n) { return to_numpy<float>(sample_z(seed, n)); },
        py::arg("seed"), py::arg("n"));

  py::class_<Generator>(m, "Generator")
      .def_static(
          "load", [](const fs::path& p) { return Generator::load(artifact_path(p, jobs::kGeneratorFile)); },
          py::arg("path"), "Load generator.xswg (or the pretrain-gan job holding it).")
      .def_property_readonly("resolution", &Generator::resolution)
      .def_property_readonly("num_styles", &Generator::num_styles)
      .def_property_readonly("w_avg", [](const Generator& g) { return to_numpy<float>(g.w_avg()); })
      .def(
          "generate",
          [](const Generator& g, const FloatArray& z) {
            auto t = to_tensor(z);
            torch::Tensor y;
            {
              py::gil_scoped_release nogil;
              torch::NoGradGuard ng;
              y = g.generate(t);
            }
            return images_out(y);
          },
          py::arg("z"))
      .def(
          "synthesize",
          [](const Generator& g, const FloatArray& styles) {
            auto t = to_tensor(styles);
            torch::Tensor y;
            {
              py::gil_scoped_release nogil;
              torch::NoGradGuard ng;
              y = g.synthesize(t);
            }
            return images_out(y);
          },
          py::arg("styles"));

  m.def(
      "project",
      [](Generator g, const FloatArray& images, std::int64_t steps, double lr, double reg) {
        auto x = to_tensor(images);
        ProjectConfig pc;
        pc.steps = steps;
        pc.lr = lr;
        pc.reg = reg;
        pc.batch = std::max<std::int64_t>(1, x.size(0));
        torch::Tensor styles;
        {
          py::gil_scoped_release nogil;
          g.freeze();
          styles = project_wplus(g, x, pc).styles;
        }
        return to_numpy<float>(styles);
      },
      py::arg("generator"), py::arg("images"), py::arg("steps") = 300, py::arg("lr") = 0.05, py::arg("reg") = 1e-3,
      "Invert images into per-layer styles [N, S, 512].");

  py::class_<SwapModel>(m, "SwapModel")
      .def(py::init<const fs::path&>(), py::arg("run"), "Load the latest checkpoint of a train job directory.")
      .def("swap", &SwapModel::swap, py::arg("source"), py::arg("target"))
      .def("embed", &SwapModel::embed, py::arg("images"), "Unit-norm identity embeddings [N, 512].")
      .def_property_readonly("resolution", &SwapModel::resolution)
      .def_property_readonly("checkpoint", &SwapModel::checkpoint);

  m.def(
      "ms_ssim",
      [](const FloatArray& x, const FloatArray& y) {
        auto a = to_tensor(x).to(torch::kFloat64), b = to_tensor(y).to(torch::kFloat64);
        const int scales = losses::max_scales(std::min(a.size(-1), a.size(-2)));
        return to_numpy<double>(losses::ms_ssim_per_image(a, b, scales));
      },
      py::arg("x"), py::arg("y"), "Per-image MS-SSIM at the largest scale count the size allows.");
  m.def(
      "psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(to_tensor(a), to_tensor(b)); },
      py::arg("a"), py::arg("b"));

  m.def(
      "frechet_distance",
      [](const DoubleArray& a, const DoubleArray& b) {
        return eval::frechet_distance(eval::gaussian_stats(to_tensor(a)), eval::gaussian_stats(to_tensor(b)));
      },
      py::arg("features_a"), py::arg("features_b"), "Frechet distance between Gaussians fitted to two [N, d] sets.");
  m.def(
      "fid",
      [](const FloatArray& real, const FloatArray& fake, const fs::path& encoder) {
        auto id = IdentityEncoder::load(artifact_path(encoder, jobs::kIdentityFile));
        id.freeze();
        auto r = to_tensor(real), f = to_tensor(fake);
        py::gil_scoped_release nogil;
        return eval::fid(r, f, eval::probe_features(id));
      },
      py::arg("real"), py::arg("fake"), py::arg("encoder"),
      "FID under the identity encoder's pooled features (identity.xswe or a pretrain-id job).");
}
