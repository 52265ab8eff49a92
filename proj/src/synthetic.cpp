#include "r2t/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "r2t/errors.hpp"
#include "r2t/hash.hpp"
#include "r2t/tokenizer.hpp"

namespace r2t::data {

using nlohmann::json;

Tensor Image::tensor() const {
  std::vector<double> v(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) v[i] = rgb[i] / 255.0;
  return Tensor({height, width, 3}, std::move(v));
}

const Image* Dataset::find_image(std::int64_t id) const {
  for (const auto& im : images) {
    if (im.id == id) return &im;
  }
  return nullptr;
}

std::vector<const Annotation*> Dataset::regions(std::int64_t image_id, std::size_t task) const {
  std::vector<const Annotation*> out;
  for (const auto& a : annotations) {
    if (a.image_id == image_id && a.task == task) out.push_back(&a);
  }
  return out;
}

std::vector<std::string> Dataset::texts() const {
  std::vector<std::string> out;
  for (const auto& a : annotations) out.push_back(a.text);
  return out;
}

namespace {

using Rng = std::mt19937_64;

constexpr std::array<std::array<double, 3>, 5> kPalette = {{
    {0.86, 0.14, 0.14},
    {0.16, 0.72, 0.22},
    {0.16, 0.30, 0.90},
    {0.92, 0.84, 0.14},
    {0.58, 0.18, 0.74},
}};

struct Shape {
  std::size_t cls, color;
  bool large;
  double cx, cy, half;
};

bool covers(const Shape& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy, h = s.half;
  const double r2 = dx * dx + dy * dy;
  switch (s.cls) {
    case 0: return r2 <= h * h;
    case 1: return std::abs(dx) <= h && std::abs(dy) <= h;
    case 2: return dy >= -h && dy <= h && std::abs(dx) <= 0.5 * (dy + h);
    case 3: return std::abs(dx) + std::abs(dy) <= h;
    case 4: return (std::abs(dx) <= h / 3 && std::abs(dy) <= h) || (std::abs(dy) <= h / 3 && std::abs(dx) <= h);
    default: return r2 <= h * h && r2 >= 0.25 * h * h;
  }
}

std::string relation(const Shape& a, const Shape& b) {
  const double dx = b.cx - a.cx, dy = b.cy - a.cy;
  if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? "left of" : "right of";
  return dy > 0 ? "above" : "below";
}

std::int64_t split_offset(const std::string& split) {
  if (split == "train") return 0;
  if (split == "val") return 1000000;
  if (split == "test") return 2000000;
  throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void render_scene(Rng& rng, std::int64_t id, const SceneOptions& opt, Dataset& ds) {
  const std::size_t n = opt.size;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(n * n * 3);

  // Textured background: tinted grey, a low-frequency wave and pixel noise.
  const double base = 0.38 + 0.2 * u(rng);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = 0.05 * (u(rng) - 0.5);
  const double fx = 0.1 + 0.3 * u(rng), fy = 0.1 + 0.3 * u(rng), phx = 6.3 * u(rng), phy = 6.3 * u(rng);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double wave = 0.05 * std::sin(fx * x + phx) * std::sin(fy * y + phy);
      for (std::size_t c = 0; c < 3; ++c) px[(y * n + x) * 3 + c] = base + tint[c] + wave + 0.08 * (u(rng) - 0.5);
    }

  std::uniform_int_distribution<std::size_t> count(opt.min_shapes, opt.max_shapes), cls(0, kShapes.size() - 1),
      color(0, kColors.size() - 1);
  const std::size_t target = count(rng);
  std::vector<Shape> shapes;
  for (std::size_t k = 0; k < target; ++k) {
    Shape s{cls(rng), color(rng), u(rng) < 0.5, 0, 0, 0};
    const double side = s.large ? 21 + 6 * u(rng) : 9 + 4 * u(rng);
    s.half = side / 2;
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      s.cx = s.half + 1 + u(rng) * (n - 2 * s.half - 2);
      s.cy = s.half + 1 + u(rng) * (n - 2 * s.half - 2);
      placed = std::all_of(shapes.begin(), shapes.end(), [&](const Shape& o) {
        return std::abs(o.cx - s.cx) > o.half + s.half + 2 || std::abs(o.cy - s.cy) > o.half + s.half + 2;
      });
    }
    if (placed) shapes.push_back(s);
  }

  std::vector<Box> boxes;
  for (const auto& s : shapes) {
    std::array<double, 3> col = kPalette[s.color];
    for (auto& c : col) c = clamp01(c + 0.06 * (u(rng) - 0.5));
    long x0 = static_cast<long>(n), y0 = static_cast<long>(n), x1 = -1, y1 = -1;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        if (!covers(s, x + 0.5, y + 0.5)) continue;
        for (std::size_t c = 0; c < 3; ++c) px[(y * n + x) * 3 + c] = col[c];
        x0 = std::min<long>(x0, x), y0 = std::min<long>(y0, y);
        x1 = std::max<long>(x1, x), y1 = std::max<long>(y1, y);
      }
    boxes.push_back(Box{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 + 1),
                        static_cast<double>(y1 + 1)});
  }

  Image im{id, n, n, std::vector<std::uint8_t>(n * n * 3)};
  for (std::size_t i = 0; i < px.size(); ++i) im.rgb[i] = static_cast<std::uint8_t>(std::lround(clamp01(px[i]) * 255));
  ds.images.push_back(std::move(im));

  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const Shape& s = shapes[i];
    ds.annotations.push_back({id, boxes[i], kShapes[s.cls], kTaskDetection});
    std::string caption = "a " + std::string(s.large ? "large" : "small") + " " + kColors[s.color] + " " + kShapes[s.cls];
    std::size_t nearest = i;
    double best = 1e300;
    for (std::size_t j = 0; j < shapes.size(); ++j) {
      if (j == i) continue;
      const double d = std::hypot(shapes[j].cx - s.cx, shapes[j].cy - s.cy);
      if (d < best) best = d, nearest = j;
    }
    if (nearest != i) {
      caption += " " + relation(s, shapes[nearest]) + " a " + kColors[shapes[nearest].color] + " " +
                 kShapes[shapes[nearest].cls];
    }
    ds.annotations.push_back({id, boxes[i], caption, kTaskCaption});
  }
}

const char* kHex = "0123456789abcdef";

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

Dataset generate_dataset(std::uint64_t seed, std::size_t n, const std::string& split, const SceneOptions& opt) {
  if (n == 0) throw ConfigError("generate_dataset: n must be >= 1");
  if (opt.min_shapes < 1 || opt.max_shapes < opt.min_shapes || opt.size < 32) {
    throw ConfigError("generate_dataset: invalid scene options");
  }
  const std::int64_t offset = split_offset(split);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a64(split))};
  Rng rng(seq);
  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) render_scene(rng, offset + static_cast<std::int64_t>(i), opt, ds);
  return ds;
}

std::string dataset_to_json(const Dataset& ds) {
  json images = json::array();
  for (const auto& im : ds.images) {
    std::string hex(im.rgb.size() * 2, '0');
    for (std::size_t i = 0; i < im.rgb.size(); ++i) {
      hex[2 * i] = kHex[im.rgb[i] >> 4];
      hex[2 * i + 1] = kHex[im.rgb[i] & 15];
    }
    images.push_back({{"id", im.id}, {"width", im.width}, {"height", im.height}, {"pixels", hex}});
  }
  json anns = json::array();
  for (const auto& a : ds.annotations) {
    anns.push_back({{"image_id", a.image_id},
                    {"box", {a.box.x1, a.box.y1, a.box.x2, a.box.y2}},
                    {"text", a.text},
                    {"task", a.task}});
  }
  return json{{"images", images}, {"annotations", anns}}.dump() + "\n";
}

Dataset dataset_from_json(std::string_view text) {
  Dataset ds;
  try {
    const json doc = json::parse(text);
    for (const auto& j : doc.at("images")) {
      Image im;
      im.id = j.at("id").get<std::int64_t>();
      im.width = j.at("width").get<std::size_t>();
      im.height = j.at("height").get<std::size_t>();
      const auto hex = j.at("pixels").get<std::string>();
      if (im.width == 0 || im.height == 0 || hex.size() != im.width * im.height * 6) {
        throw IntegrityError("image " + std::to_string(im.id) + ": pixel string does not match its size");
      }
      im.rgb.resize(hex.size() / 2);
      for (std::size_t i = 0; i < im.rgb.size(); ++i) {
        const int hi = hex_value(hex[2 * i]), lo = hex_value(hex[2 * i + 1]);
        if (hi < 0 || lo < 0) throw IntegrityError("image " + std::to_string(im.id) + ": bad hex digit");
        im.rgb[i] = static_cast<std::uint8_t>(hi * 16 + lo);
      }
      ds.images.push_back(std::move(im));
    }
    for (const auto& j : doc.at("annotations")) {
      Annotation a;
      a.image_id = j.at("image_id").get<std::int64_t>();
      const auto b = j.at("box").get<std::vector<double>>();
      if (b.size() != 4) throw IntegrityError("annotation box must have 4 numbers");
      a.box = {b[0], b[1], b[2], b[3]};
      a.text = j.at("text").get<std::string>();
      a.task = j.at("task").get<std::size_t>();
      if (!a.box.valid()) throw IntegrityError("annotation box is degenerate");
      ds.annotations.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("dataset: ") + e.what());
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << dataset_to_json(ds);
  if (!f) throw IoError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return dataset_from_json(ss.str());
}

Jittered scale_jitter(const Tensor& image, const std::vector<Box>& boxes, double scale) {
  if (!(scale > 0)) throw ContractViolation("scale_jitter: scale must be positive");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const auto src = image.data();
  std::vector<double> fill(c, 0.0);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < c; ++k) fill[k] += src[i * c + k] / static_cast<double>(h * w);
  std::vector<double> out(h * w * c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double sx = (x + 0.5) / scale - 0.5, sy = (y + 0.5) / scale - 0.5;
      double* o = &out[(y * w + x) * c];
      if (sx < -0.5 || sy < -0.5 || sx > w - 0.5 || sy > h - 0.5) {
        for (std::size_t k = 0; k < c; ++k) o[k] = fill[k];
        continue;
      }
      const double cx = std::clamp(sx, 0.0, w - 1.0), cy = std::clamp(sy, 0.0, h - 1.0);
      const auto x0 = static_cast<std::size_t>(cx), y0 = static_cast<std::size_t>(cy);
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = cx - x0, fy = cy - y0;
      for (std::size_t k = 0; k < c; ++k) {
        auto at = [&](std::size_t yy, std::size_t xx) { return src[(yy * w + xx) * c + k]; };
        o[k] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
    }
  Jittered j{Tensor(image.shape(), std::move(out)), {}, {}};
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box s{boxes[i].x1 * scale, boxes[i].y1 * scale, boxes[i].x2 * scale, boxes[i].y2 * scale};
    const Box cl = clip(s, static_cast<double>(w), static_cast<double>(h));
    if (cl.valid() && cl.area() >= 0.5 * s.area()) {
      j.boxes.push_back(cl);
      j.kept.push_back(i);
    }
  }
  return j;
}

Style classify_style(std::string_view text) {
  const std::string norm = text::normalize(text);
  std::vector<std::string> w;
  std::istringstream ss(norm);
  for (std::string t; ss >> t;) w.push_back(t);
  auto in = [](const std::vector<std::string>& set, const std::string& s) {
    return std::find(set.begin(), set.end(), s) != set.end();
  };
  if (w.size() == 1 && in(kShapes, w[0])) return Style::kClassName;
  if (w.size() < 4 || w[0] != "a" || (w[1] != "small" && w[1] != "large") || !in(kColors, w[2]) || !in(kShapes, w[3])) {
    return Style::kOther;
  }
  if (w.size() == 4) return Style::kSentence;
  std::size_t i = 4;
  if (w[i] == "left" || w[i] == "right") {
    if (w.size() < i + 2 || w[i + 1] != "of") return Style::kOther;
    i += 2;
  } else if (w[i] == "above" || w[i] == "below") {
    i += 1;
  } else {
    return Style::kOther;
  }
  if (w.size() == i + 3 && w[i] == "a" && in(kColors, w[i + 1]) && in(kShapes, w[i + 2])) return Style::kSentence;
  return Style::kOther;
}

}  // namespace r2t::data
