#include "xswap/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "xswap/config.hpp"
#include "xswap/error.hpp"
#include "xswap/jobs.hpp"

namespace xswap::cli {

namespace fs = std::filesystem;

namespace {

struct InputFlag {
  std::string name;      // key in JobSpec::inputs, flag is --name
  std::string producer;  // default sibling directory; empty = required
  std::string help;
};

struct Command {
  std::string name;
  std::string help;
  bool needs_config;
  std::vector<InputFlag> inputs;
};

const std::vector<Command>& commands() {
  static const std::vector<Command> c{
      {"gen-faces", "render the procedural face corpus", true, {}},
      {"pretrain-gan", "train the generator on the corpus", true,
       {{"corpus", "gen-faces", "corpus directory or gen-faces job"}}},
      {"pretrain-id", "train identity encoder, landmark regressor and factor probes", true,
       {{"corpus", "gen-faces", "corpus directory or gen-faces job"}}},
      {"build-dataset", "sample (image, latent) records and split them", true,
       {{"generator", "pretrain-gan", "generator file or pretrain-gan job"}}},
      {"train", "train the attribute encoder and latent mapper", true,
       {{"generator", "pretrain-gan", "generator file or pretrain-gan job"},
        {"encoders", "pretrain-id", "pretrain-id job"},
        {"dataset", "build-dataset", "build-dataset job"}}},
      {"swap", "swap one source face onto one target", false,
       {{"run", "train", "train job"}, {"source", "", "source PNG"}, {"target", "", "target PNG"}}},
      {"evaluate", "score a train run on held-out pairs", true, {{"run", "train", "train job"}}},
      {"fid", "FID between two PNG directories", true,
       {{"real", "", "directory of real PNGs"},
        {"fake", "", "directory of generated PNGs"},
        {"encoders", "pretrain-id", "pretrain-id job (feature extractor)"}}},
      {"plot", "swap montage for a train run", false, {{"run", "train", "train job"}}},
  };
  return c;
}

const Command* find_command(const std::string& name) {
  for (const auto& c : commands())
    if (c.name == name) return &c;
  return nullptr;
}

std::string joined_names() {
  std::string s;
  for (const auto& c : commands()) s += (s.empty() ? "" : ", ") + c.name;
  return s;
}

}  // namespace

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& c : commands()) v.push_back(c.name);
    return v;
  }();
  return names;
}

JobSpec parse_args(const std::vector<std::string>& args, const std::optional<std::string>& env_out) {
  JobSpec spec;
  CLI::App app("xswap: desk-scale face swapping pipeline", "xswap");
  app.require_subcommand(0, 1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  struct Values {
    std::string config, out;
    std::uint64_t seed = 0;
    int workers = 1;
    bool force = false, all = false, quiet = false;
    int verbose = 0;
    std::map<std::string, std::string> inputs;
  };
  std::map<std::string, Values> values;
  std::map<std::string, CLI::App*> subs;
  std::map<std::string, CLI::Option*> seed_opts;
  for (const auto& c : commands()) {
    auto* sub = app.add_subcommand(c.name, c.help);
    auto& v = values[c.name];
    if (c.needs_config) sub->add_option("--config", v.config, "run configuration file");
    sub->add_option("--out", v.out, "output directory (default: $XSWAP_OUT/" + c.name + ")");
    if (c.needs_config) seed_opts[c.name] = sub->add_option("--seed", v.seed, "override run.seed");
    sub->add_option("--workers", v.workers, "intra-op threads (1 keeps runs bitwise reproducible)")
        ->check(CLI::Range(1, 256));
    sub->add_flag("--force", v.force, "replace a completed job");
    sub->add_flag("-v,--verbose", v.verbose, "more progress output");
    sub->add_flag("-q,--quiet", v.quiet, "no progress output");
    if (c.name == "evaluate") sub->add_flag("--all", v.all, "evaluate every checkpoint of the run");
    for (const auto& in : c.inputs) sub->add_option("--" + in.name, v.inputs[in.name], in.help);
    subs[c.name] = sub;
  }

  if (args.empty()) throw UsageError("missing subcommand; expected one of: " + joined_names());
  const auto& first = args.front();
  if (!first.empty() && first[0] != '-' && !find_command(first))
    throw UsageError("unknown subcommand '" + first + "'; expected one of: " + joined_names());

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    spec.help = true;
    spec.help_text = app.help();
    for (const auto& [name, sub] : subs)
      if (sub->parsed()) spec.help_text = sub->help();
    return spec;
  } catch (const CLI::CallForAllHelp&) {
    spec.help = true;
    spec.help_text = app.help("", CLI::AppFormatMode::All);
    return spec;
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }

  const Command* cmd = nullptr;
  for (const auto& c : commands())
    if (subs[c.name]->parsed()) cmd = &c;
  if (!cmd) throw UsageError("missing subcommand; expected one of: " + joined_names());

  const auto& v = values[cmd->name];
  spec.subcommand = cmd->name;
  spec.config = v.config;
  spec.workers = v.workers;
  spec.force = v.force;
  spec.all = v.all;
  spec.verbosity = v.quiet ? 0 : 1 + std::min(v.verbose, 1);
  if (seed_opts.count(cmd->name) && seed_opts[cmd->name]->count() > 0) spec.seed = v.seed;

  std::vector<std::string> missing;
  if (cmd->needs_config && v.config.empty()) missing.push_back("--config");
  if (!v.out.empty()) {
    spec.out = v.out;
  } else if (env_out && !env_out->empty()) {
    spec.out = fs::path(*env_out) / cmd->name;
  } else {
    missing.push_back("--out");
  }
  for (const auto& in : cmd->inputs) {
    const auto& given = v.inputs.at(in.name);
    if (!given.empty()) {
      spec.inputs[in.name] = given;
    } else if (!in.producer.empty()) {
      if (!spec.out.empty()) spec.inputs[in.name] = spec.out.parent_path() / in.producer;
    } else {
      missing.push_back("--" + in.name);
    }
  }
  if (!missing.empty()) {
    std::string s;
    for (const auto& m : missing) s += (s.empty() ? "" : ", ") + m;
    throw UsageError("'" + cmd->name + "' is missing required flags: " + s + "\n" + subs[cmd->name]->help());
  }
  return spec;
}

namespace {

constexpr const char* kDoneMarker = "job.done";

void run_job(const JobSpec& spec, const RunConfig& cfg, const jobs::Log& log) {
  const auto& in = spec.inputs;
  const auto& out = spec.out;
  const auto& s = spec.subcommand;
  if (s == "gen-faces") {
    jobs::gen_faces(cfg, out, log);
  } else if (s == "pretrain-gan") {
    jobs::pretrain_gan(cfg, in.at("corpus"), out, log);
  } else if (s == "pretrain-id") {
    jobs::pretrain_id(cfg, in.at("corpus"), out, log);
  } else if (s == "build-dataset") {
    jobs::build_dataset(cfg, in.at("generator"), out, log);
  } else if (s == "train") {
    jobs::train(cfg, in.at("generator"), in.at("encoders"), in.at("dataset"), out, log);
  } else if (s == "swap") {
    jobs::swap(in.at("run"), in.at("source"), in.at("target"), out);
  } else if (s == "evaluate") {
    jobs::evaluate(cfg, in.at("run"), out, spec.all, log);
  } else if (s == "fid") {
    jobs::fid(cfg, in.at("real"), in.at("fake"), in.at("encoders"), out, log);
  } else if (s == "plot") {
    jobs::plot(in.at("run"), out);
  } else {
    throw UsageError("unknown subcommand '" + s + "'");
  }
}

}  // namespace

int dispatch(const JobSpec& spec, std::ostream& err) {
  try {
    const auto cmd = find_command(spec.subcommand);
    if (!cmd) throw UsageError("unknown subcommand '" + spec.subcommand + "'");
    if (spec.out.empty()) throw UsageError("no output directory");

    RunConfig cfg;
    if (cmd->needs_config) cfg = load_config(spec.config);
    if (spec.seed) cfg.seed = *spec.seed;
    cfg.validate();

    if (fs::exists(spec.out / kDoneMarker)) {
      if (!spec.force) {
        err << "error: " << spec.out.string() << " holds a completed '" << spec.subcommand
            << "' job; pass --force to replace it\n";
        return kExitUsage;
      }
      fs::remove_all(spec.out);
    } else if (spec.force && fs::exists(spec.out)) {
      fs::remove_all(spec.out);
    }
    if (!spec.out.parent_path().empty()) fs::create_directories(spec.out.parent_path());
    fs::create_directory(spec.out);

    at::set_num_threads(spec.workers);
    if (cmd->needs_config) {
      std::ofstream f(spec.out / jobs::kRunConfigFile, std::ios::trunc);
      f << format_config(cfg);
      if (!f) throw IoError("cannot write " + (spec.out / jobs::kRunConfigFile).string());
    }
    jobs::Log log;
    if (spec.verbosity > 0) log = [&err](const std::string& line) { err << line << '\n' << std::flush; };
    run_job(spec, cfg, log);

    std::ofstream done(spec.out / kDoneMarker, std::ios::trunc);
    done << spec.subcommand << '\n';
    if (!done) throw IoError("cannot write " + (spec.out / kDoneMarker).string());
    return kExitOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::optional<std::string> env_out;
  if (const char* e = std::getenv("XSWAP_OUT")) env_out = e;
  JobSpec spec;
  try {
    spec = parse_args(args, env_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }
  if (spec.help) {
    std::cout << spec.help_text;
    return kExitOk;
  }
  return dispatch(spec, std::cerr);
}

}  // namespace xswap::cli
