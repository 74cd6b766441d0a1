#include "xswap/procfaces.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "xswap/error.hpp"

namespace xswap::procfaces {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kLandmarkGrid = 1024.0;

struct Vec2 {
  double x = 0, y = 0;
};

// Face layout in head-local pixel offsets (relative to the head center).
struct Geometry {
  double scale = 1;   // resolution / 64
  Vec2 center;        // head center in pixels
  double a = 0, b = 0;  // head half-width / half-height
  double shift = 0;   // horizontal feature shift from yaw
  double squeeze = 1; // horizontal feature compression from yaw
  Vec2 eye[2];
  double eye_rx = 0, eye_ry = 0;
  Vec2 nose_apex;
  double nose_base_y = 0, nose_half = 0;
  double mouth_y = 0, mouth_half = 0, mouth_depth = 0, mouth_thick = 0;
  double curve = 0;

  Vec2 mouth_at(double t) const {
    return {shift + t * mouth_half, mouth_y + curve * mouth_depth * (0.5 - t * t)};
  }
};

Geometry layout(const IdentityParams& id, const AttributeParams& attr, std::int64_t resolution) {
  Geometry g;
  g.scale = static_cast<double>(resolution) / 64.0;
  const double u = g.scale;
  g.center = {(32.0 + attr.translation[0]) * u, (32.0 + attr.translation[1]) * u};
  g.a = 15.0 * u;
  g.b = 15.0 * id.face_aspect * u;
  const double yaw = attr.yaw * kDegToRad;
  g.squeeze = std::cos(yaw);
  g.shift = 0.45 * g.a * std::sin(yaw);

  const double eye_dx = id.eye_spacing * g.a * g.squeeze;
  const double eye_y = -0.25 * g.b;
  g.eye[0] = {g.shift - eye_dx, eye_y};
  g.eye[1] = {g.shift + eye_dx, eye_y};
  g.eye_rx = 0.11 * g.a * (0.75 + 0.25 * g.squeeze);
  g.eye_ry = 0.07 * g.b + 0.5 * u;

  g.nose_apex = {1.1 * g.shift, -0.1 * g.b};
  g.nose_base_y = 0.2 * g.b;
  g.nose_half = id.nose_scale * g.a * g.squeeze + 0.5 * u;

  g.mouth_y = 0.52 * g.b;
  g.mouth_half = 0.4 * g.a * g.squeeze;
  g.mouth_depth = 0.14 * g.b;
  g.mouth_thick = 1.0 * u;
  g.curve = attr.mouth_curve;
  return g;
}

double ellipse_sd(Vec2 p, Vec2 c, double rx, double ry) {
  const double dx = (p.x - c.x) / rx, dy = (p.y - c.y) / ry;
  return (std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(rx, ry);
}

double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
Vec2 sub(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 pa = sub(p, a), ba = sub(b, a);
  const double h = std::clamp(dot(pa, ba) / std::max(dot(ba, ba), 1e-12), 0.0, 1.0);
  const Vec2 d{pa.x - ba.x * h, pa.y - ba.y * h};
  return std::sqrt(dot(d, d));
}

// Exact signed distance to a triangle (negative inside).
double triangle_sd(Vec2 p, Vec2 p0, Vec2 p1, Vec2 p2) {
  const double d = std::min({segment_distance(p, p0, p1), segment_distance(p, p1, p2),
                             segment_distance(p, p2, p0)});
  auto cross = [](Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; };
  const double c0 = cross(sub(p1, p0), sub(p, p0));
  const double c1 = cross(sub(p2, p1), sub(p, p1));
  const double c2 = cross(sub(p0, p2), sub(p, p2));
  const bool inside = (c0 >= 0 && c1 >= 0 && c2 >= 0) || (c0 <= 0 && c1 <= 0 && c2 <= 0);
  return inside ? -d : d;
}

// Box-filtered coverage of a shape given its signed distance in pixels.
double coverage(double sd) { return std::clamp(0.5 - sd, 0.0, 1.0); }

std::array<double, 3> hue_to_rgb(double hue_deg) {
  constexpr double s = 0.55, v = 0.65;
  const double h = std::fmod(hue_deg, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (auto& ch : rgb) ch += m;
  return rgb;
}

void blend(std::array<double, 3>& dst, const std::array<double, 3>& src, double alpha) {
  for (int i = 0; i < 3; ++i) dst[i] = dst[i] * (1.0 - alpha) + src[i] * alpha;
}

void check_resolution(std::int64_t resolution) {
  if (!supported_resolution(resolution))
    throw ConfigError("unsupported render resolution " + std::to_string(resolution) +
                      " (expected 16, 32, 64 or 128)");
}

}  // namespace

const std::array<const char*, kFactorCount>& factor_names() {
  static const std::array<const char*, kFactorCount> names{
      "face_aspect", "skin_r",      "skin_g",     "skin_b",
      "eye_spacing", "nose_scale",  "yaw",        "dx",
      "dy",          "mouth_curve", "brightness", "background_hue"};
  return names;
}

FactorVector to_factors(const IdentityParams& id, const AttributeParams& attr) {
  return {id.face_aspect,       id.skin_tone[0],      id.skin_tone[1],  id.skin_tone[2],
          id.eye_spacing,       id.nose_scale,        attr.yaw,         attr.translation[0],
          attr.translation[1],  attr.mouth_curve,     attr.brightness,  attr.background_hue};
}

std::pair<IdentityParams, AttributeParams> from_factors(const FactorVector& f,
                                                        std::int64_t identity_id) {
  IdentityParams id{identity_id, f[kFaceAspect], {f[kSkinR], f[kSkinG], f[kSkinB]},
                    f[kEyeSpacing], f[kNoseScale]};
  AttributeParams attr{f[kYaw], {f[kDx], f[kDy]}, f[kMouthCurve], f[kBrightness],
                       f[kBackgroundHue]};
  return {id, attr};
}

bool in_range(const IdentityParams& id) {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  return id.identity_id >= 0 && id.face_aspect >= 0.7 && id.face_aspect <= 1.3 &&
         unit(id.skin_tone[0]) && unit(id.skin_tone[1]) && unit(id.skin_tone[2]) &&
         id.eye_spacing >= 0.25 && id.eye_spacing <= 0.45 && id.nose_scale >= 0.05 &&
         id.nose_scale <= 0.2;
}

bool in_range(const AttributeParams& attr) {
  auto integral_shift = [](double d) {
    return d == std::round(d) && std::abs(d) <= kMaxTranslation;
  };
  return attr.yaw >= -45.0 && attr.yaw <= 45.0 && integral_shift(attr.translation[0]) &&
         integral_shift(attr.translation[1]) && attr.mouth_curve >= -1.0 &&
         attr.mouth_curve <= 1.0 && attr.brightness >= 0.6 && attr.brightness <= 1.4 &&
         attr.background_hue >= 0.0 && attr.background_hue < 360.0;
}

IdentityParams sample_identity(std::uint64_t master_seed, std::int64_t identity_id) {
  if (identity_id < 0) throw ArgumentError("identity_id must be >= 0");
  Rng rng(derive_seed(master_seed, 0x1D, static_cast<std::uint64_t>(identity_id)));
  IdentityParams id;
  id.identity_id = identity_id;
  id.face_aspect = rng.uniform(0.7, 1.3);
  // Skin stays in a band that contrasts with the darker facial features.
  for (auto& c : id.skin_tone) c = rng.uniform(0.35, 1.0);
  id.eye_spacing = rng.uniform(0.25, 0.45);
  id.nose_scale = rng.uniform(0.05, 0.2);
  return id;
}

AttributeParams sample_attributes(Rng& rng) {
  AttributeParams attr;
  attr.yaw = rng.uniform(-45.0, 45.0);
  constexpr int span = 2 * kMaxTranslation + 1;
  attr.translation[0] = std::floor(rng.uniform() * span) - kMaxTranslation;
  attr.translation[1] = std::floor(rng.uniform() * span) - kMaxTranslation;
  attr.mouth_curve = rng.uniform(-1.0, 1.0);
  attr.brightness = rng.uniform(0.6, 1.4);
  attr.background_hue = rng.uniform(0.0, 360.0);
  return attr;
}

bool supported_resolution(std::int64_t resolution) {
  return resolution == 16 || resolution == 32 || resolution == 64 || resolution == 128;
}

Image render(const IdentityParams& id, const AttributeParams& attr, std::int64_t resolution) {
  check_resolution(resolution);
  const Geometry g = layout(id, attr, resolution);
  const auto bg = hue_to_rgb(attr.background_hue);
  const auto& skin = id.skin_tone;
  const std::array<double, 3> eye_color{0.08, 0.07, 0.12};
  const std::array<double, 3> nose_color{skin[0] * 0.62, skin[1] * 0.55, skin[2] * 0.55};
  const std::array<double, 3> mouth_color{0.55, 0.08, 0.1};

  const Vec2 nose0 = g.nose_apex;
  const Vec2 nose1{g.shift - g.nose_half, g.nose_base_y};
  const Vec2 nose2{g.shift + g.nose_half, g.nose_base_y};
  constexpr int kMouthSegments = 16;
  std::array<Vec2, kMouthSegments + 1> mouth{};
  for (int i = 0; i <= kMouthSegments; ++i) mouth[i] = g.mouth_at(-1.0 + 2.0 * i / kMouthSegments);

  auto out = torch::empty({3, resolution, resolution}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  const auto plane = static_cast<std::size_t>(resolution * resolution);
  for (std::int64_t y = 0; y < resolution; ++y) {
    for (std::int64_t x = 0; x < resolution; ++x) {
      // Head-local coordinates of the pixel center.
      const Vec2 p{x + 0.5 - g.center.x, y + 0.5 - g.center.y};
      auto rgb = bg;
      blend(rgb, skin, coverage(ellipse_sd(p, {0, 0}, g.a, g.b)));
      for (const auto& e : g.eye) blend(rgb, eye_color, coverage(ellipse_sd(p, e, g.eye_rx, g.eye_ry)));
      blend(rgb, nose_color, coverage(triangle_sd(p, nose0, nose1, nose2)));
      double md = std::numeric_limits<double>::infinity();
      for (int i = 0; i < kMouthSegments; ++i) md = std::min(md, segment_distance(p, mouth[i], mouth[i + 1]));
      blend(rgb, mouth_color, coverage(md - g.mouth_thick));
      const auto idx = static_cast<std::size_t>(y * resolution + x);
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(rgb[c] * attr.brightness, 0.0, 1.0);
        dst[c * plane + idx] = static_cast<float>(2.0 * v - 1.0);
      }
    }
  }
  return out;
}

torch::Tensor landmarks_oracle(const IdentityParams& id, const AttributeParams& attr,
                               std::int64_t resolution) {
  check_resolution(resolution);
  const Geometry g = layout(id, attr, resolution);
  std::vector<Vec2> pts;
  pts.reserve(kNumLandmarks);

  // Jaw line: left temple, around the chin, right temple.
  for (int i = 0; i <= 16; ++i) {
    const double theta = std::numbers::pi - i * std::numbers::pi / 16.0;
    pts.push_back({g.a * std::cos(theta), g.b * std::sin(theta)});
  }
  // Brows above each eye.
  for (const auto& e : g.eye)
    for (double t : {-1.0, -0.5, 0.0, 0.5, 1.0})
      pts.push_back({e.x + t * 1.5 * g.eye_rx, e.y - 2.2 * g.eye_ry - 0.5 * g.eye_ry * (1 - t * t)});
  // Nose bridge then nostril base.
  for (int i = 0; i < 4; ++i) {
    const double t = i / 3.0;
    pts.push_back({g.shift + t * (g.nose_apex.x - g.shift), g.eye[0].y + t * (g.nose_apex.y - g.eye[0].y)});
  }
  for (double t : {-1.0, -0.5, 0.0, 0.5, 1.0}) pts.push_back({g.shift + t * g.nose_half, g.nose_base_y});
  // Eyes: outer corner, two upper, inner corner, two lower.
  for (const auto& e : g.eye)
    for (double deg : {180.0, 120.0, 60.0, 0.0, 300.0, 240.0}) {
      const double r = deg * kDegToRad;
      pts.push_back({e.x + g.eye_rx * std::cos(r), e.y - g.eye_ry * std::sin(r)});
    }
  // Outer lip contour: corner, upper lip, corner, lower lip.
  auto lip = [&](double t, double offset) {
    auto m = g.mouth_at(t);
    return Vec2{m.x, m.y + offset};
  };
  pts.push_back(lip(-1.0, 0));
  for (double t : {-2.0 / 3, -1.0 / 3, 0.0, 1.0 / 3, 2.0 / 3}) pts.push_back(lip(t, -g.mouth_thick));
  pts.push_back(lip(1.0, 0));
  for (double t : {2.0 / 3, 1.0 / 3, 0.0, -1.0 / 3, -2.0 / 3}) pts.push_back(lip(t, g.mouth_thick));
  // Inner lip contour.
  pts.push_back(lip(-0.8, 0));
  for (double t : {-1.0 / 3, 0.0, 1.0 / 3}) pts.push_back(lip(t, -0.5 * g.mouth_thick));
  pts.push_back(lip(0.8, 0));
  for (double t : {1.0 / 3, 0.0, -1.0 / 3}) pts.push_back(lip(t, 0.5 * g.mouth_thick));

  auto out = torch::empty({kNumLandmarks, 2}, torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  for (int i = 0; i < kNumLandmarks; ++i) {
    // Offsets snap to a dyadic grid; the center is dyadic as well, so
    // integer translations shift every point exactly.
    acc[i][0] = g.center.x + std::round(pts[i].x * kLandmarkGrid) / kLandmarkGrid;
    acc[i][1] = g.center.y + std::round(pts[i].y * kLandmarkGrid) / kLandmarkGrid;
  }
  return out;
}

std::int64_t Corpus::num_identities() const {
  std::vector<std::int64_t> ids;
  for (const auto& e : entries) ids.push_back(e.identity.identity_id);
  std::sort(ids.begin(), ids.end());
  return std::unique(ids.begin(), ids.end()) - ids.begin();
}

torch::Tensor Corpus::images() const {
  std::vector<torch::Tensor> xs;
  xs.reserve(entries.size());
  for (const auto& e : entries) xs.push_back(e.image);
  return torch::stack(xs);
}

torch::Tensor Corpus::labels() const {
  auto t = torch::empty({static_cast<std::int64_t>(entries.size())}, torch::kInt64);
  for (std::size_t i = 0; i < entries.size(); ++i) t[static_cast<std::int64_t>(i)] = entries[i].identity.identity_id;
  return t;
}

Corpus make_corpus(std::int64_t n_identities, std::int64_t images_per_identity,
                   std::int64_t resolution, std::uint64_t seed) {
  if (n_identities < 2) throw ConfigError("corpus needs at least 2 identities");
  if (images_per_identity < 1) throw ConfigError("corpus needs at least 1 image per identity");
  check_resolution(resolution);
  Corpus corpus;
  corpus.resolution = resolution;
  corpus.entries.reserve(static_cast<std::size_t>(n_identities * images_per_identity));
  for (std::int64_t i = 0; i < n_identities; ++i) {
    const auto identity = sample_identity(seed, i);
    Rng rng(derive_seed(seed, 0xA7, static_cast<std::uint64_t>(i)));
    for (std::int64_t j = 0; j < images_per_identity; ++j) {
      const auto attr = sample_attributes(rng);
      corpus.entries.push_back({render(identity, attr, resolution), identity, attr});
    }
  }
  return corpus;
}

void export_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.tsv").string());
  manifest << "#filename\tidentity_id";
  for (const auto* name : factor_names()) manifest << '\t' << name;
  manifest << "\n# resolution " << corpus.resolution << '\n';
  char name[32];
  char num[40];
  for (std::size_t i = 0; i < corpus.entries.size(); ++i) {
    const auto& e = corpus.entries[i];
    std::snprintf(name, sizeof name, "%06zu.png", i);
    write_png(dir / name, e.image);
    manifest << name << '\t' << e.identity.identity_id;
    for (double v : e.factors()) {
      std::snprintf(num, sizeof num, "%.17g", v);
      manifest << '\t' << num;
    }
    manifest << '\n';
  }
  if (!manifest) throw IoError("write failed: " + (dir / "manifest.tsv").string());
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.tsv");
  if (!manifest) throw IoError("cannot read " + (dir / "manifest.tsv").string());
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("# resolution ", 0) == 0) {
      corpus.resolution = std::stoll(line.substr(13));
      continue;
    }
    if (line[0] == '#') continue;
    std::istringstream row(line);
    std::string file;
    std::int64_t label = 0;
    FactorVector f{};
    if (!std::getline(row, file, '\t') || !(row >> label))
      throw FormatError("manifest.tsv line " + std::to_string(lineno) + ": bad filename/identity_id");
    for (auto& v : f)
      if (!(row >> v))
        throw FormatError("manifest.tsv line " + std::to_string(lineno) + ": missing factor field");
    auto [identity, attributes] = from_factors(f, label);
    corpus.entries.push_back({read_png(dir / file), identity, attributes});
  }
  if (corpus.entries.empty()) throw FormatError("empty corpus manifest in " + dir.string());
  if (corpus.resolution == 0) corpus.resolution = corpus.entries.front().image.size(1);
  return corpus;
}

}  // namespace xswap::procfaces
