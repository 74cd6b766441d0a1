#include "xswap/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "xswap/error.hpp"
#include "xswap/rng.hpp"

namespace xswap {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("not a valid number: '" + v + "'");
  return out;
}

template <>
double parse_number<double>(const std::string& v) {
  // from_chars rejects a leading '+'; accept it like strtod would.
  std::string s = !v.empty() && v[0] == '+' ? v.substr(1) : v;
  double out = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("not a valid number: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("not a boolean: '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Access>
Field number_field(Access acc) {
  using T = std::remove_reference_t<decltype(acc(std::declval<RunConfig&>()))>;
  return {[acc](RunConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, bool>) {
              acc(c) = parse_bool(v);
            } else {
              acc(c) = parse_number<T>(v);
            }
          },
          [acc](const RunConfig& c) {
            auto& m = acc(const_cast<RunConfig&>(c));
            if constexpr (std::is_same_v<T, bool>) {
              return std::string(m ? "true" : "false");
            } else if constexpr (std::is_floating_point_v<T>) {
              return fmt(m);
            } else {
              return std::to_string(m);
            }
          }};
}

#define XSWAP_FIELD(key, expr) \
  { key, number_field([](RunConfig& c) -> auto& { return c.expr; }) }

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t{
        XSWAP_FIELD("run.seed", seed),

        XSWAP_FIELD("corpus.identities", corpus.identities),
        XSWAP_FIELD("corpus.per_identity", corpus.per_identity),
        XSWAP_FIELD("corpus.resolution", corpus.resolution),

        XSWAP_FIELD("gan.steps", gan.steps),
        XSWAP_FIELD("gan.batch", gan.batch),
        XSWAP_FIELD("gan.lr", gan.lr),
        XSWAP_FIELD("gan.beta1", gan.beta1),
        XSWAP_FIELD("gan.beta2", gan.beta2),
        XSWAP_FIELD("gan.r1_gamma", gan.r1_gamma),
        XSWAP_FIELD("gan.r1_every", gan.r1_every),
        XSWAP_FIELD("gan.ema_beta", gan.ema_beta),
        XSWAP_FIELD("gan.checkpoint_every", gan.checkpoint_every),
        XSWAP_FIELD("gan.channel_base", gan.generator.channel_base),
        XSWAP_FIELD("gan.channel_max", gan.generator.channel_max),
        XSWAP_FIELD("gan.mapping_layers", gan.generator.mapping_layers),
        XSWAP_FIELD("gan.adain", gan.generator.adain),

        XSWAP_FIELD("id.steps", id.steps),
        XSWAP_FIELD("id.batch", id.batch),
        XSWAP_FIELD("id.lr", id.lr),
        XSWAP_FIELD("id.held_out", id.held_out),
        XSWAP_FIELD("id.scale", id.scale),
        XSWAP_FIELD("id.margin", id.margin),
        XSWAP_FIELD("id.landmark_steps", id.landmark_steps),
        XSWAP_FIELD("id.landmark_lr", id.landmark_lr),
        XSWAP_FIELD("id.patch", id.encoder.patch),
        XSWAP_FIELD("id.stride", id.encoder.stride),
        XSWAP_FIELD("id.width", id.encoder.width),
        XSWAP_FIELD("id.depth", id.encoder.depth),
        XSWAP_FIELD("id.heads", id.encoder.heads),

        XSWAP_FIELD("probe.steps", probe.steps),
        XSWAP_FIELD("probe.batch", probe.batch),
        XSWAP_FIELD("probe.lr", probe.lr),
        XSWAP_FIELD("probe.held_out", probe.held_out),

        XSWAP_FIELD("dataset.records", dataset.records),
        XSWAP_FIELD("dataset.train_fraction", dataset.train_fraction),
        XSWAP_FIELD("dataset.batch", dataset.build.batch),
        XSWAP_FIELD("dataset.project_steps", dataset.build.projection.steps),
        XSWAP_FIELD("dataset.project_lr", dataset.build.projection.lr),
        XSWAP_FIELD("dataset.project_reg", dataset.build.projection.reg),
        XSWAP_FIELD("dataset.project_batch", dataset.build.projection.batch),

        XSWAP_FIELD("train.lr_nonadv", train.lr_nonadv),
        XSWAP_FIELD("train.lr_adv", train.lr_adv),
        XSWAP_FIELD("train.beta1", train.beta1),
        XSWAP_FIELD("train.beta2", train.beta2),
        XSWAP_FIELD("train.batch", train.batch),
        XSWAP_FIELD("train.steps", train.steps),
        XSWAP_FIELD("train.p_same", train.p_same),
        XSWAP_FIELD("train.lambda_id", train.weights.lambda_id),
        XSWAP_FIELD("train.lambda_lnd", train.weights.lambda_lnd),
        XSWAP_FIELD("train.lambda_rec", train.weights.lambda_rec),
        XSWAP_FIELD("train.lambda_adv", train.weights.lambda_adv),
        XSWAP_FIELD("train.alpha", train.weights.alpha),
        XSWAP_FIELD("train.r1_gamma", train.weights.r1_gamma),
        XSWAP_FIELD("train.checkpoint_every", train.checkpoint_every),
        XSWAP_FIELD("train.clip_norm", train.clip_norm),
        XSWAP_FIELD("train.adversarial", train.adversarial),
        XSWAP_FIELD("train.adv_updates_encoder", train.adv_updates_encoder),
        XSWAP_FIELD("train.mapper_init_wavg", train.mapper_init_wavg),
        XSWAP_FIELD("train.mapper_head_scale", train.mapper_head_scale),
        XSWAP_FIELD("train.per_row_heads", train.per_row_heads),
        XSWAP_FIELD("train.attr_expand", train.attr.expand),

        XSWAP_FIELD("eval.pairs", eval.pairs),
        XSWAP_FIELD("eval.batch", eval.batch),
    };
    t.push_back({"dataset.mode",
                 {[](RunConfig& c, const std::string& v) {
                    if (v == "fast") {
                      c.dataset.build.mode = DatasetMode::kFast;
                    } else if (v == "inversion") {
                      c.dataset.build.mode = DatasetMode::kInversion;
                    } else {
                      throw ConfigError("dataset.mode must be 'fast' or 'inversion', got '" + v + "'");
                    }
                  },
                  [](const RunConfig& c) {
                    return std::string(c.dataset.build.mode == DatasetMode::kFast ? "fast" : "inversion");
                  }}});
    t.push_back({"train.attr_channels",
                 {[](RunConfig& c, const std::string& v) {
                    std::vector<std::int64_t> ch;
                    std::stringstream ss(v);
                    std::string item;
                    while (std::getline(ss, item, ',')) ch.push_back(parse_number<std::int64_t>(trim(item)));
                    c.train.attr.channels = ch;
                  },
                  [](const RunConfig& c) {
                    std::string s;
                    for (auto x : c.train.attr.channels) s += (s.empty() ? "" : ",") + std::to_string(x);
                    return s;
                  }}});
    return t;
  }();
  return table;
}

#undef XSWAP_FIELD

}  // namespace

std::uint64_t RunConfig::stage_seed(std::string_view stage) const {
  static const std::map<std::string_view, std::uint64_t> tags{
      {"corpus", 1}, {"gan", 2}, {"id", 3}, {"probe", 4}, {"dataset", 5}, {"split", 6}, {"train", 7}, {"eval", 8}};
  auto it = tags.find(stage);
  if (it == tags.end()) throw ArgumentError("unknown stage '" + std::string(stage) + "'");
  return derive_seed(seed, it->second);
}

RunConfig RunConfig::resolved() const {
  RunConfig c = *this;
  const auto r = corpus.resolution;
  c.gan.generator.resolution = r;
  c.gan.seed = stage_seed("gan");
  c.gan.generator.seed = derive_seed(c.gan.seed, 0x6E);
  c.id.encoder.resolution = r;
  c.id.seed = stage_seed("id");
  c.probe.seed = stage_seed("probe");
  c.train.resolution = r;
  c.train.seed = stage_seed("train");
  return c;
}

void RunConfig::validate() const {
  if (corpus.identities < 2) throw ConfigError("corpus.identities must be >= 2");
  if (corpus.per_identity < 1) throw ConfigError("corpus.per_identity must be >= 1");
  if (!procfaces::supported_resolution(corpus.resolution))
    throw ConfigError("corpus.resolution " + std::to_string(corpus.resolution) + " is not supported");
  if (gan.steps < 0 || gan.batch < 1 || gan.r1_every < 1 || gan.checkpoint_every < 1)
    throw ConfigError("gan: steps >= 0, batch, r1_every and checkpoint_every >= 1 required");
  if (!(gan.ema_beta >= 0.0 && gan.ema_beta < 1.0)) throw ConfigError("gan.ema_beta must lie in [0, 1)");
  if (id.steps < 0 || id.batch < 1 || id.landmark_steps < 0) throw ConfigError("id: bad step or batch count");
  if (!(id.held_out > 0.0 && id.held_out < 1.0)) throw ConfigError("id.held_out must lie in (0, 1)");
  if (probe.steps < 0 || probe.batch < 1) throw ConfigError("probe: bad step or batch count");
  if (!(probe.held_out > 0.0 && probe.held_out < 1.0)) throw ConfigError("probe.held_out must lie in (0, 1)");
  if (dataset.records < 2) throw ConfigError("dataset.records must be >= 2");
  if (!(dataset.train_fraction > 0.0 && dataset.train_fraction < 1.0))
    throw ConfigError("dataset.train_fraction must lie in (0, 1)");
  if (dataset.build.batch < 1 || dataset.build.projection.steps < 0 || dataset.build.projection.batch < 1)
    throw ConfigError("dataset: bad batch or projection settings");
  if (eval.pairs < 2 || eval.batch < 1) throw ConfigError("eval: pairs >= 2 and batch >= 1 required");
  resolved().train.validate();
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::map<std::string, const Field*> by_key;
  for (const auto& [k, f] : fields()) by_key[k] = &f;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const auto line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = "line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'section.key = value'");
    const auto key = trim(std::string_view(line).substr(0, eq));
    const auto value = trim(std::string_view(line).substr(eq + 1));
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (auto [p, fresh] = seen.emplace(key, line_no); !fresh)
      throw ConfigError(where + "duplicate key '" + key + "' (first set on line " + std::to_string(p->second) + ")");
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    try {
      it->second->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string format_config(const RunConfig& cfg) {
  std::vector<std::string> sections;
  for (const auto& [k, f] : fields()) {
    auto s = k.substr(0, k.find('.'));
    if (std::find(sections.begin(), sections.end(), s) == sections.end()) sections.push_back(s);
  }
  std::string out;
  for (const auto& s : sections) {
    if (!out.empty()) out += '\n';
    for (const auto& [k, f] : fields())
      if (k.compare(0, s.size() + 1, s + ".") == 0) out += k + " = " + f.get(cfg) + '\n';
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : fields()) out.push_back(k);
  return out;
}

}  // namespace xswap
