#include "foamqc/synthgen.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

#include "foamqc/rng.hpp"

namespace foamqc {

using nlohmann::json;

void SynthParams::validate() const {
  if (n_groups < 1) throw ParameterError("synth: n_groups must be >= 1");
  if (image_size < 16) throw ParameterError("synth: image_size must be >= 16");
  if (raw_scale < 1) throw ParameterError("synth: raw_scale must be >= 1");
  double sum = 0.0;
  for (double f : class_mix) {
    if (f < 0.0) throw ParameterError("synth: class_mix entries must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ParameterError("synth: class_mix must sum to 1");
  if (defects.stain_min < 0 || defects.stain_max < defects.stain_min || defects.scratch_min < 0 ||
      defects.scratch_max < defects.scratch_min || defects.stain_max + defects.scratch_max < 1)
    throw ParameterError("synth: inconsistent defect counts");
}

bool SynthTruth::has_defect(ViewKind v) const {
  auto it = defect_masks.find(v);
  return it != defect_masks.end() && (it->second.array() != 0).any();
}

std::array<int, 3> synth_class_counts(const SynthParams& params) {
  params.validate();
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int used = 0;
  for (int c = 0; c < 3; ++c) {
    const double ideal = params.n_groups * params.class_mix[c];
    counts[c] = static_cast<int>(std::floor(ideal + 1e-9));
    rem[c] = ideal - counts[c];
    used += counts[c];
  }
  while (used < params.n_groups) {
    int best = -1;
    for (int c = 0; c < 3; ++c)
      if (params.class_mix[c] > 0 && (best < 0 || rem[c] > rem[best] + 1e-9)) best = c;
    ++counts[best];
    rem[best] = -1.0;
    ++used;
  }
  return counts;
}

namespace {

using Canvas = Eigen::MatrixXd;
using Mask = PixelMatrix;

struct Drawer {
  Rng& rng;
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  double normal(double sigma) { return std::normal_distribution<double>(0.0, sigma)(rng); }
};

// Rasterises a rotated ellipse into `mask` (value 1), returns pixels set.
int draw_ellipse(Mask& mask, double cx, double cy, double a, double b, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const int reach = static_cast<int>(std::ceil(std::max(a, b))) + 1;
  int count = 0;
  for (int y = static_cast<int>(cy) - reach; y <= static_cast<int>(cy) + reach; ++y)
    for (int x = static_cast<int>(cx) - reach; x <= static_cast<int>(cx) + reach; ++x) {
      if (y < 0 || x < 0 || y >= mask.rows() || x >= mask.cols()) continue;
      const double dx = x - cx, dy = y - cy;
      const double u = (dx * c + dy * s) / a, v = (-dx * s + dy * c) / b;
      if (u * u + v * v <= 1.0) {
        if (!mask(y, x)) ++count;
        mask(y, x) = 1;
      }
    }
  return count;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

void draw_polyline(Mask& mask, const std::vector<std::pair<double, double>>& pts, double width) {
  const double half = width / 2.0;
  for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
    const auto [ax, ay] = pts[k];
    const auto [bx, by] = pts[k + 1];
    const int x0 = static_cast<int>(std::floor(std::min(ax, bx) - half - 1)), x1 = static_cast<int>(std::ceil(std::max(ax, bx) + half + 1));
    const int y0 = static_cast<int>(std::floor(std::min(ay, by) - half - 1)), y1 = static_cast<int>(std::ceil(std::max(ay, by) + half + 1));
    for (int y = std::max(0, y0); y <= std::min<int>(static_cast<int>(mask.rows()) - 1, y1); ++y)
      for (int x = std::max(0, x0); x <= std::min<int>(static_cast<int>(mask.cols()) - 1, x1); ++x)
        if (segment_distance(x, y, ax, ay, bx, by) <= half) mask(y, x) = 1;
  }
}

Mask disc_mask(int size, const Circle& c, int shrink) {
  Mask m = Mask::Zero(size, size);
  const long long rr = static_cast<long long>(c.r - shrink) * (c.r - shrink);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const long long dx = x - c.cx, dy = y - c.cy;
      if (dx * dx + dy * dy <= rr) m(y, x) = 1;
    }
  return m;
}

long long count_nonzero(const Mask& m) { return (m.array() != 0).count(); }

struct PlanView {
  Canvas canvas;
  Circle circle;
  int disc_level = 0;
  Mask defects;
  Mask inside;  // disc interior available for defects
};

PlanView draw_plan(Drawer& d, int size) {
  PlanView pv;
  const double bg = d.uniform(200, 230);
  pv.disc_level = d.uniform_int(10, 40);
  const int r = static_cast<int>(std::lround(d.uniform(0.30, 0.45) * size));
  const int jitter = static_cast<int>(std::floor(0.05 * size));
  const int centre = size / 2;
  auto pick = [&] {
    const int lo = std::max(centre - jitter, r), hi = std::min(centre + jitter, size - 1 - r);
    return d.uniform_int(lo, std::max(lo, hi));
  };
  pv.circle = Circle{pick(), pick(), r};
  pv.canvas = Canvas::Constant(size, size, bg);
  const Mask disc = disc_mask(size, pv.circle, 0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double base = disc(y, x) ? pv.disc_level : bg;
      pv.canvas(y, x) = base + d.normal(3.0);
    }
  // dark specks outside the disc, removed later by circle masking
  const int specks = d.uniform_int(0, 3);
  for (int k = 0; k < specks; ++k) {
    Mask speck = Mask::Zero(size, size);
    const double rad = d.uniform(1.0, std::max(1.5, size * 0.015));
    const int cx = d.uniform_int(0, size - 1), cy = d.uniform_int(0, size - 1);
    const double dist = std::hypot(cx - pv.circle.cx, cy - pv.circle.cy);
    if (dist < r + rad + 4) continue;
    draw_ellipse(speck, cx, cy, rad, rad, 0.0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (speck(y, x)) pv.canvas(y, x) = d.uniform(10, 40);
  }
  pv.defects = Mask::Zero(size, size);
  pv.inside = disc_mask(size, pv.circle, 2);
  return pv;
}

// Random point inside the inner part of the disc.
std::pair<double, double> random_spot(Drawer& d, const Circle& c, double reach) {
  const double rho = reach * c.r * std::sqrt(d.uniform(0.0, 1.0));
  const double phi = d.uniform(0.0, 2.0 * std::numbers::pi);
  return {c.cx + rho * std::cos(phi), c.cy + rho * std::sin(phi)};
}

// Stain of roughly `area` pixels clipped to the disc interior; returns the
// clipped stain mask.
Mask make_stain(Drawer& d, const PlanView& pv, double area, int size) {
  const double elong = d.uniform(1.0, 2.0);
  const double a = std::sqrt(area / std::numbers::pi * elong), b = std::sqrt(area / std::numbers::pi / elong);
  const auto [cx, cy] = random_spot(d, pv.circle, 0.6);
  Mask m = Mask::Zero(size, size);
  draw_ellipse(m, cx, cy, std::max(a, 0.6), std::max(b, 0.6), d.uniform(0.0, std::numbers::pi));
  return (m.array() * pv.inside.array()).matrix();
}

Mask make_scratch(Drawer& d, const PlanView& pv, const DefectIntensity& di, int size) {
  const double length = d.uniform(di.scratch_length_lo, di.scratch_length_hi) * pv.circle.r;
  const int segments = d.uniform_int(2, 3);
  auto [x, y] = random_spot(d, pv.circle, 0.5);
  double heading = d.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<std::pair<double, double>> pts{{x, y}};
  for (int k = 0; k < segments; ++k) {
    heading += d.uniform(-0.6, 0.6);
    x += std::cos(heading) * length / segments;
    y += std::sin(heading) * length / segments;
    pts.emplace_back(x, y);
  }
  const int wmax = std::max(1, std::min(di.scratch_width_max, size / 48 + 1));
  Mask m = Mask::Zero(size, size);
  draw_polyline(m, pts, d.uniform_int(1, wmax) + 0.5);
  return (m.array() * pv.inside.array()).matrix();
}

void paint(Canvas& canvas, Mask& acc, const Mask& m, Drawer& d, double lo, double hi) {
  const double level = d.uniform(lo, hi);
  for (int y = 0; y < canvas.rows(); ++y)
    for (int x = 0; x < canvas.cols(); ++x)
      if (m(y, x)) {
        canvas(y, x) = level + d.normal(3.0);
        acc(y, x) = 1;
      }
}

struct ProfileView {
  Canvas canvas;
  Mask defects;
  Mask slab;
};

ProfileView draw_profile(Drawer& d, int size) {
  ProfileView pv;
  const double bg = d.uniform(2, 12);
  const double level = d.uniform(170, 220);
  const int bh = static_cast<int>(std::lround(d.uniform(0.25, 0.40) * size));
  const int bw = static_cast<int>(std::lround(d.uniform(0.60, 0.90) * size));
  const int y0 = d.uniform_int(0, size - bh), x0 = d.uniform_int(0, size - bw);
  pv.canvas = Canvas(size, size);
  pv.slab = Mask::Zero(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool in = y >= y0 && y < y0 + bh && x >= x0 && x < x0 + bw;
      pv.slab(y, x) = in ? 1 : 0;
      pv.canvas(y, x) = in ? level + d.normal(4.0) : std::min(22.0, std::max(0.0, bg + d.normal(3.0)));
    }
  pv.defects = Mask::Zero(size, size);
  return pv;
}

void add_hole(Drawer& d, ProfileView& pv, int size) {
  int y0 = size, y1 = -1, x0 = size, x1 = -1;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (pv.slab(y, x)) y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
  const double bh = y1 - y0 + 1, bw = x1 - x0 + 1;
  const double a = d.uniform(0.08, 0.15) * bw, b = d.uniform(0.15, 0.3) * bh;
  const double cx = d.uniform(x0 + a + 1, x1 - a - 1), cy = d.uniform(y0 + b + 1, y1 - b - 1);
  Mask m = Mask::Zero(size, size);
  draw_ellipse(m, cx, cy, std::max(a, 1.0), std::max(b, 1.0), 0.0);
  m = (m.array() * pv.slab.array()).matrix();
  const double level = d.uniform(0, 25);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (m(y, x)) {
        pv.canvas(y, x) = std::max(0.0, std::min(25.0, level + d.normal(2.0)));
        pv.defects(y, x) = 1;
      }
}

PixelMatrix to_pixels(const Canvas& c) { return c.unaryExpr([](double v) { return round_u8(v); }); }

PixelMatrix upscale(const PixelMatrix& m, int k) {
  if (k == 1) return m;
  return resize_nearest(m, Size2{static_cast<int>(m.rows()) * k, static_cast<int>(m.cols()) * k});
}

SynthSample generate_one(const SynthParams& params, int index, RawLabel label) {
  Rng rng(mix_seed(params.seed, 0x5e7f00dULL, static_cast<std::uint64_t>(index)));
  Drawer d{rng};
  const int size = params.image_size;
  const auto& di = params.defects;

  std::array<PlanView, 2> plans{draw_plan(d, size), draw_plan(d, size)};
  std::array<ProfileView, 3> profiles{draw_profile(d, size), draw_profile(d, size), draw_profile(d, size)};

  if (label == RawLabel::defective) {
    const int stains = d.uniform_int(di.stain_min, di.stain_max);
    const int scratches = d.uniform_int(di.scratch_min, di.scratch_max);
    for (int k = 0; k < std::max(1, stains + scratches); ++k) {
      PlanView& pv = plans[static_cast<std::size_t>(d.uniform_int(0, 1))];
      const double disc_area = static_cast<double>(count_nonzero(disc_mask(size, pv.circle, 0)));
      Mask m = k < stains || stains + scratches == 0
                   ? make_stain(d, pv, d.uniform(di.stain_area_lo, di.stain_area_hi) * disc_area, size)
                   : make_scratch(d, pv, di, size);
      paint(pv.canvas, pv.defects, m, d, 150, 230);
    }
    if (d.uniform(0.0, 1.0) < di.dark_hole_prob) add_hole(d, profiles[static_cast<std::size_t>(d.uniform_int(0, 2))], size);
  } else if (label == RawLabel::normal_defective) {
    PlanView& pv = plans[static_cast<std::size_t>(d.uniform_int(0, 1))];
    const double disc_area = static_cast<double>(count_nonzero(disc_mask(size, pv.circle, 0)));
    double area = d.uniform(0.5, 0.9) * kNdAreaThreshold * disc_area;
    Mask m;
    for (int attempt = 0; attempt < 20; ++attempt, area *= 0.8) {
      m = make_stain(d, pv, std::max(area, 1.0), size);
      const auto n = count_nonzero(m);
      if (n >= 1 && static_cast<double>(n) < kNdAreaThreshold * disc_area) break;
    }
    paint(pv.canvas, pv.defects, m, d, 150, 230);
  }

  SynthSample s;
  s.group.id = "g" + std::to_string(index);
  s.group.raw_label = label;
  s.truth.raw_label = label;
  const int k = params.raw_scale;
  for (int p = 0; p < 2; ++p) {
    const ViewKind v = p == 0 ? ViewKind::top : ViewKind::bottom;
    s.group.images[v] = GrayImage(upscale(to_pixels(plans[p].canvas), k), v);
    const Circle& c = plans[p].circle;
    s.truth.circles[v] = Circle{c.cx * k + k / 2, c.cy * k + k / 2, c.r * k};
    s.truth.defect_masks[v] = upscale(plans[p].defects, k);
    s.truth.disc_level[v] = plans[p].disc_level;
  }
  for (int p = 0; p < 3; ++p) {
    const ViewKind v = kAllViews[static_cast<std::size_t>(2 + p)];
    s.group.images[v] = GrayImage(upscale(to_pixels(profiles[p].canvas), k), v);
    s.truth.defect_masks[v] = upscale(profiles[p].defects, k);
  }
  return s;
}

}  // namespace

std::vector<SynthSample> generate(const SynthParams& params) {
  const auto counts = synth_class_counts(params);
  std::vector<RawLabel> labels;
  for (int c = 0; c < 3; ++c) labels.insert(labels.end(), static_cast<std::size_t>(counts[c]), static_cast<RawLabel>(c));
  Rng rng(mix_seed(params.seed, 0x1abe1ULL));
  for (std::size_t i = labels.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(labels[i - 1], labels[pick(rng)]);
  }
  std::vector<SynthSample> out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out.push_back(generate_one(params, static_cast<int>(i), labels[i]));
  return out;
}

std::vector<long long> encode_rle(const PixelMatrix& mask) {
  std::vector<long long> runs;
  const long long n = mask.size();
  long long i = 0;
  while (i < n) {
    if (mask.data()[i] == 0) {
      ++i;
      continue;
    }
    const long long start = i;
    while (i < n && mask.data()[i] != 0) ++i;
    runs.push_back(start);
    runs.push_back(i - start);
  }
  return runs;
}

PixelMatrix decode_rle(const std::vector<long long>& runs, int height, int width) {
  if (runs.size() % 2 != 0) throw ValidationError("RLE must have an even number of entries");
  PixelMatrix m = PixelMatrix::Zero(height, width);
  for (std::size_t k = 0; k < runs.size(); k += 2) {
    if (runs[k] < 0 || runs[k + 1] < 0 || runs[k] + runs[k + 1] > m.size()) throw ValidationError("RLE run out of range");
    std::fill(m.data() + runs[k], m.data() + runs[k] + runs[k + 1], std::uint8_t{1});
  }
  return m;
}

void write_truth(const std::filesystem::path& path, const SynthTruth& truth) {
  json j;
  j["label"] = std::string(to_string(truth.raw_label));
  json circles = json::object();
  for (const auto& [v, c] : truth.circles) circles[std::string(to_string(v))] = {{"cx", c.cx}, {"cy", c.cy}, {"r", c.r}};
  j["circles"] = circles;
  json levels = json::object();
  for (const auto& [v, l] : truth.disc_level) levels[std::string(to_string(v))] = l;
  j["disc_level"] = levels;
  json masks = json::object();
  for (const auto& [v, m] : truth.defect_masks)
    masks[std::string(to_string(v))] = {{"height", m.rows()}, {"width", m.cols()}, {"runs", encode_rle(m)}};
  j["defect_masks"] = masks;
  std::ofstream out(path, std::ios::binary);
  out << j.dump() << '\n';
  if (!out) throw Error("cannot write truth sidecar: " + path.string());
}

SynthTruth read_truth(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read truth sidecar: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("malformed truth sidecar " + path.string() + ": " + e.what());
  }
  SynthTruth t;
  auto label = parse_raw_label(j.at("label").get<std::string>());
  if (!label) throw ValidationError("truth sidecar has unknown label");
  t.raw_label = *label;
  for (const auto& [k, c] : j.at("circles").items())
    t.circles[*parse_view(k)] = Circle{c.at("cx").get<int>(), c.at("cy").get<int>(), c.at("r").get<int>()};
  if (j.contains("disc_level"))
    for (const auto& [k, l] : j["disc_level"].items()) t.disc_level[*parse_view(k)] = l.get<int>();
  for (const auto& [k, m] : j.at("defect_masks").items())
    t.defect_masks[*parse_view(k)] =
        decode_rle(m.at("runs").get<std::vector<long long>>(), m.at("height").get<int>(), m.at("width").get<int>());
  return t;
}

void write_synth_dataset(const std::filesystem::path& out_dir, std::vector<SynthSample>& samples) {
  std::filesystem::create_directories(out_dir);
  std::vector<ExampleGroup> manifest;
  for (auto& s : samples) {
    const auto dir = out_dir / s.group.id;
    std::filesystem::create_directories(dir);
    for (const auto& [v, img] : s.group.images) {
      const auto path = dir / (std::string(to_string(v)) + ".png");
      if (is_plan_view(v))
        write_png(path, gray_to_rgb(img));  // plan views as RGB, exercising the colour path
      else
        write_png(path, img.pixels);
      s.group.source_paths[v] = path;
    }
    write_truth(dir / "truth.json", s.truth);
    ExampleGroup entry;
    entry.id = s.group.id;
    entry.raw_label = s.group.raw_label;
    entry.source_paths = s.group.source_paths;
    manifest.push_back(std::move(entry));
  }
  write_manifest(out_dir / "manifest.json", manifest);
}

}  // namespace foamqc
