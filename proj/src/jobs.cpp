#include "xswap/jobs.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xswap/error.hpp"
#include "xswap/gan.hpp"
#include "xswap/image.hpp"
#include "xswap/pipeline.hpp"
#include "xswap/procfaces.hpp"
#include "xswap/training.hpp"

namespace xswap::jobs {

namespace {

void say(const Log& log, const std::string& s) {
  if (log) log(s);
}

// `p` itself if it is a file, else `p / name`; must exist.
fs::path artifact(const fs::path& p, const char* name, const char* what) {
  if (fs::is_regular_file(p)) return p;
  const auto inner = p / name;
  if (fs::is_regular_file(inner)) return inner;
  throw IoError(std::string("missing ") + what + ": neither " + p.string() + " nor " + inner.string() + " exists");
}

fs::path corpus_dir(const fs::path& p) {
  if (fs::is_regular_file(p / "manifest.tsv")) return p;
  if (fs::is_regular_file(p / kCorpusDir / "manifest.tsv")) return p / kCorpusDir;
  throw IoError("missing corpus: no manifest.tsv under " + p.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  f << text;
  if (!f) throw IoError("cannot write " + path.string());
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

Generator load_frozen_generator(const fs::path& p) {
  auto g = Generator::load(artifact(p, kGeneratorFile, "generator"));
  g.freeze();
  return g;
}

}  // namespace

void gen_faces(const RunConfig& cfg, const fs::path& out, const Log& log) {
  const auto& c = cfg.corpus;
  auto corpus = procfaces::make_corpus(c.identities, c.per_identity, c.resolution, cfg.stage_seed("corpus"));
  fs::create_directories(out / kCorpusDir);
  procfaces::export_corpus(corpus, out / kCorpusDir);
  say(log, "wrote " + std::to_string(corpus.entries.size()) + " faces to " + (out / kCorpusDir).string());
}

void pretrain_gan(const RunConfig& cfg, const fs::path& corpus, const fs::path& out, const Log& log) {
  const auto rc = cfg.resolved();
  auto faces = procfaces::load_corpus(corpus_dir(corpus));
  if (faces.resolution != rc.corpus.resolution)
    throw ConfigError("corpus resolution " + std::to_string(faces.resolution) + " differs from corpus.resolution");
  const auto log_path = out / "gan_log.tsv";
  // Rows are appended as steps complete. On resume the first new row tells
  // which step the snapshot restarted from; later rows of the old log go.
  std::ofstream rows;
  auto open_log = [&](std::int64_t first_step) {
    std::string kept = "step\td_loss\tg_loss\tr1\n";
    if (fs::exists(log_path)) {
      std::ifstream in(log_path);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line))
        if (!line.empty() && std::stoll(line.substr(0, line.find('\t'))) < first_step) kept += line + '\n';
    }
    write_text(log_path, kept);
    rows.open(log_path, std::ios::app);
  };
  auto g = xswap::pretrain_gan(faces, rc.gan, out / "state", [&](const GanLogRow& r) {
    if (!rows.is_open()) open_log(r.step);
    rows << r.step << '\t' << fmt(r.d_loss) << '\t' << fmt(r.g_loss) << '\t' << fmt(r.r1) << '\n' << std::flush;
    if (r.step % 100 == 0)
      say(log, "gan step " + std::to_string(r.step) + " d " + fmt(r.d_loss) + " g " + fmt(r.g_loss));
  });
  if (!rows.is_open()) open_log(rc.gan.steps);
  rows.close();
  g.save(out / kGeneratorFile);
  say(log, "generator saved to " + (out / kGeneratorFile).string());
}

void pretrain_id(const RunConfig& cfg, const fs::path& corpus, const fs::path& out, const Log& log) {
  const auto rc = cfg.resolved();
  auto faces = procfaces::load_corpus(corpus_dir(corpus));
  if (faces.resolution != rc.corpus.resolution)
    throw ConfigError("corpus resolution " + std::to_string(faces.resolution) + " differs from corpus.resolution");
  say(log, "identity encoder: " + std::to_string(rc.id.steps) + " steps");
  auto id = pretrain_identity_encoder(faces, rc.id);
  id.encoder.save(out / kIdentityFile);
  say(log, "held-out top-1 " + fmt(id.held_out_accuracy));

  say(log, "landmark regressor: " + std::to_string(rc.id.landmark_steps) + " steps");
  double lm_err = 0.0;
  auto lm = train_landmark_regressor(faces, rc.id.landmark_steps, rc.id.batch, rc.id.landmark_lr,
                                     derive_seed(rc.id.seed, 0x1A), rc.id.held_out, &lm_err);
  lm.save(out / kLandmarkFile);

  say(log, "factor probes: " + std::to_string(rc.probe.steps) + " steps");
  auto probe = eval::train_factor_probes(faces, rc.probe);
  probe.probe.save(out / kProbeFile);

  write_text(out / "id_report.tsv",
             "held_out_top1\ttrain_loss\tlandmark_px_error\tyaw_mae\tmouth_mae\n" + fmt(id.held_out_accuracy) + '\t' +
                 fmt(id.train_loss) + '\t' + fmt(lm_err) + '\t' + fmt(probe.yaw_mae) + '\t' + fmt(probe.mouth_mae) +
                 '\n');
  say(log, "landmark error " + fmt(lm_err) + " px, yaw MAE " + fmt(probe.yaw_mae) + ", mouth MAE " +
               fmt(probe.mouth_mae));
}

void build_dataset(const RunConfig& cfg, const fs::path& generator, const fs::path& out, const Log& log) {
  const auto rc = cfg.resolved();
  auto g = load_frozen_generator(generator);
  if (g.resolution() != rc.corpus.resolution) throw ConfigError("generator resolution differs from corpus.resolution");
  say(log, "building " + std::to_string(rc.dataset.records) + " records");
  auto ds = xswap::build_dataset(g, rc.dataset.records, rc.stage_seed("dataset"), rc.dataset.build);
  auto [tr, te] = split(ds, rc.dataset.train_fraction, rc.stage_seed("split"));
  save_dataset(tr, out / kTrainSplit);
  save_dataset(te, out / kHeldOutSplit);
  say(log, "split " + std::to_string(tr.size()) + " / " + std::to_string(te.size()));
}

namespace {

std::shared_ptr<FrozenParts> load_frozen(const fs::path& generator, const fs::path& encoders) {
  auto f = std::make_shared<FrozenParts>();
  f->generator = load_frozen_generator(generator);
  f->identity = IdentityEncoder::load(artifact(encoders, kIdentityFile, "identity encoder"));
  f->identity.freeze();
  auto lm = std::make_shared<LandmarkRegressor>(LandmarkRegressor::load(artifact(encoders, kLandmarkFile, "landmark regressor")));
  lm->freeze();
  f->landmarks = Landmarks(lm);
  return f;
}

fs::path dataset_split(const fs::path& p, const char* split_name) {
  if (fs::is_regular_file(p / split_name / "manifest.tsv")) return p / split_name;
  throw IoError("missing dataset split '" + std::string(split_name) + "' under " + p.string());
}

}  // namespace

void train(const RunConfig& cfg, const fs::path& generator, const fs::path& encoders, const fs::path& dataset,
           const fs::path& out, const Log& log) {
  const auto rc = cfg.resolved();
  auto frozen = load_frozen(generator, encoders);
  auto train_set = load_dataset(dataset_split(dataset, kTrainSplit));

  nlohmann::json inputs{{"generator", fs::absolute(artifact(generator, kGeneratorFile, "generator")).string()},
                        {"encoders", fs::absolute(encoders).string()},
                        {"dataset", fs::absolute(dataset).string()}};
  write_text(out / kInputsFile, inputs.dump(2) + '\n');
  write_text(out / kRunConfigFile, format_config(cfg));

  auto r = xswap::train(rc.train, frozen, train_set, out, [&](const losses::LossReport& rep) {
    if (rep.step % 100 == 0) say(log, "train step " + std::to_string(rep.step) + " total " + fmt(rep.total));
  });
  say(log, "trained " + std::to_string(r.steps) + " steps; checkpoint " + r.final_checkpoint.string());
}

torch::Tensor load_png_dir(const fs::path& dir) {
  auto d = fs::is_directory(dir / "images") ? dir / "images" : dir;
  if (!fs::is_directory(d)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(d))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no PNG files in " + d.string());
  std::vector<torch::Tensor> ims;
  for (const auto& f : files) ims.push_back(read_png(f));
  return torch::stack(ims);
}

LoadedRun load_run(const fs::path& run) {
  const auto inputs_path = run / kInputsFile;
  if (!fs::is_regular_file(inputs_path)) throw IoError("missing checkpoint: " + run.string() + " is not a train run (no " + kInputsFile + ")");
  nlohmann::json inputs;
  try {
    std::ifstream f(inputs_path);
    inputs = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cannot parse " + inputs_path.string() + ": " + e.what());
  }
  LoadedRun r;
  r.config = load_config(run / kRunConfigFile).resolved();
  r.encoders = inputs.at("encoders").get<std::string>();
  r.dataset = inputs.at("dataset").get<std::string>();
  r.checkpoint = latest_checkpoint(run);
  if (r.checkpoint.empty()) throw IoError("missing checkpoint: no swap_step*.xswm in " + run.string());
  r.frozen = load_frozen(inputs.at("generator").get<std::string>(), r.encoders);
  return r;
}

std::vector<EvalOutcome> evaluate(const RunConfig& cfg, const fs::path& run, const fs::path& out, bool all,
                                  const Log& log) {
  auto lr = load_run(run);
  const auto rc = cfg.resolved();
  auto probe = eval::FactorProbe::load(artifact(lr.encoders, kProbeFile, "factor probes"));
  auto held_out = load_dataset(dataset_split(lr.dataset, kHeldOutSplit));
  auto train_set = load_dataset(dataset_split(lr.dataset, kTrainSplit));
  const auto reals = held_out.image_batch([&] {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(held_out.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
    return idx;
  }());

  std::vector<fs::path> checkpoints;
  if (all) {
    for (const auto& e : fs::directory_iterator(run))
      if (e.path().extension() == ".xswm") checkpoints.push_back(e.path());
    std::sort(checkpoints.begin(), checkpoints.end());
  } else {
    checkpoints.push_back(lr.checkpoint);
  }

  eval::SwapEvalConfig ec{std::min(rc.eval.pairs, std::int64_t{1000000}), rc.eval.batch, rc.stage_seed("eval")};
  // Baseline: the untrained initialization of the same run.
  Trainer init(lr.config.train, lr.frozen, train_set);
  const double fid_init = eval::swap_fid(*lr.frozen, init.nets(), held_out, reals, ec);

  std::vector<EvalOutcome> outcomes;
  for (const auto& ck : checkpoints) {
    auto nets = load_swap_nets(ck);
    const auto step = std::stoll(ck.stem().string().substr(std::string("swap_step").size()));
    say(log, "evaluating " + ck.filename().string());
    EvalOutcome o{step, eval::evaluate_swaps(*lr.frozen, nets, probe, held_out, reals, ec), fid_init};
    o.metrics.report.step = step;
    eval::append_eval_report(out / "eval_report.tsv", o.metrics.report);

    const auto transfer = out / "transfer.tsv";
    const bool fresh = !fs::exists(transfer);
    std::ofstream t(transfer, std::ios::app);
    if (fresh)
      t << "step\tid_to_source\tid_to_target\tpose_vs_target\tpose_vs_source\texpr_vs_target\texpr_vs_source\t"
           "self_ms_ssim\tfid\tfid_init\n";
    const auto& m = o.metrics;
    t << step << '\t' << fmt(m.report.id_similarity) << '\t' << fmt(m.id_to_target) << '\t' << fmt(m.report.pose_error)
      << '\t' << fmt(m.pose_vs_source) << '\t' << fmt(m.report.expr_error) << '\t' << fmt(m.expr_vs_source) << '\t'
      << fmt(m.self_ms_ssim) << '\t' << fmt(m.report.fid) << '\t' << fmt(fid_init) << '\n';
    if (!t) throw IoError("cannot write " + transfer.string());

    char name[48];
    std::snprintf(name, sizeof name, "montage_step%08lld.png", static_cast<long long>(step));
    eval::write_swap_montage(out / name, m.sources, m.targets, m.swaps);
    say(log, "id " + fmt(m.report.id_similarity) + " (target " + fmt(m.id_to_target) + "), pose " +
                 fmt(m.report.pose_error) + " (source " + fmt(m.pose_vs_source) + "), self ms-ssim " +
                 fmt(m.self_ms_ssim) + ", fid " + fmt(m.report.fid) + " (init " + fmt(fid_init) + ")");
    outcomes.push_back(std::move(o));
  }
  return outcomes;
}

double fid(const RunConfig& cfg, const fs::path& real_dir, const fs::path& fake_dir, const fs::path& encoders,
           const fs::path& out, const Log& log) {
  auto enc = IdentityEncoder::load(artifact(encoders, kIdentityFile, "identity encoder"));
  enc.freeze();
  auto real = load_png_dir(real_dir), fake = load_png_dir(fake_dir);
  const double v = eval::fid(real, fake, eval::probe_features(enc), cfg.eval.batch);
  write_text(out / "fid.tsv", "real\tfake\treal_count\tfake_count\tfid\n" + real_dir.string() + '\t' +
                                  fake_dir.string() + '\t' + std::to_string(real.size(0)) + '\t' +
                                  std::to_string(fake.size(0)) + '\t' + fmt(v) + '\n');
  say(log, "fid " + fmt(v));
  return v;
}

void swap(const fs::path& run, const fs::path& source, const fs::path& target, const fs::path& out) {
  auto lr = load_run(run);
  auto nets = load_swap_nets(lr.checkpoint);
  auto s = read_png(source), t = read_png(target);
  torch::NoGradGuard ng;
  auto y = xswap::swap(*lr.frozen, nets, s, t);
  write_png(out / "swap.png", y[0]);
}

void plot(const fs::path& run, const fs::path& out) {
  auto lr = load_run(run);
  auto nets = load_swap_nets(lr.checkpoint);
  auto held_out = load_dataset(dataset_split(lr.dataset, kHeldOutSplit));
  const auto pairs = eval::eval_pairs(held_out, 8, lr.config.stage_seed("eval"));
  std::vector<std::int64_t> s, t;
  for (const auto& p : pairs) {
    s.push_back(p.source);
    t.push_back(p.target);
  }
  auto src = held_out.image_batch(s), tgt = held_out.image_batch(t);
  torch::NoGradGuard ng;
  eval::write_swap_montage(out / "montage.png", src, tgt, xswap::swap(*lr.frozen, nets, src, tgt));
}

}  // namespace xswap::jobs
