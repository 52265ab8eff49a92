#include "r2t/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "r2t/errors.hpp"

namespace r2t::harness {

using metrics::GroundTruthRegion;
using metrics::PredictionRecord;
using nlohmann::json;

std::vector<PredictionRecord> predict(const Model& model, const data::Dataset& ds, std::size_t task,
                                      std::size_t beam) {
  std::vector<PredictionRecord> out;
  for (const auto& im : ds.images) {
    auto recs = to_records(im.id, model.infer(im.tensor(), task, beam), model.vocab());
    out.insert(out.end(), recs.begin(), recs.end());
  }
  return out;
}

std::vector<GroundTruthRegion> ground_truth(const data::Dataset& ds, std::size_t task) {
  std::vector<GroundTruthRegion> out;
  for (const auto& a : ds.annotations) {
    if (a.task == task) out.push_back({a.image_id, a.box, a.text});
  }
  return out;
}

std::vector<std::string> class_names(const data::Dataset& ds) {
  std::set<std::string> names;
  for (const auto& a : ds.annotations) {
    if (a.task == data::kTaskDetection) names.insert(a.text);
  }
  return {names.begin(), names.end()};
}

double style_consistency(const std::vector<PredictionRecord>& preds, std::size_t task) {
  if (preds.empty()) return 1.0;
  const auto want = task == data::kTaskDetection ? data::Style::kClassName : data::Style::kSentence;
  std::size_t ok = 0;
  for (const auto& p : preds) ok += data::classify_style(p.text) == want;
  return static_cast<double>(ok) / static_cast<double>(preds.size());
}

std::string predictions_to_ndjson(const std::vector<PredictionRecord>& preds) {
  std::string out;
  for (const auto& p : preds) {
    json j{{"image_id", p.image_id}, {"x1", p.box.x1}, {"y1", p.box.y1}, {"x2", p.box.x2},
           {"y2", p.box.y2},         {"score", p.score}, {"text", p.text}, {"task", p.task}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<PredictionRecord> predictions_from_ndjson(std::string_view text) {
  std::vector<PredictionRecord> out;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const json j = json::parse(line);
      PredictionRecord p;
      j.at("image_id").get_to(p.image_id);
      p.box = {j.at("x1").get<double>(), j.at("y1").get<double>(), j.at("x2").get<double>(), j.at("y2").get<double>()};
      j.at("score").get_to(p.score);
      j.at("text").get_to(p.text);
      j.at("task").get_to(p.task);
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw IoError("predictions line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_predictions(const std::vector<PredictionRecord>& preds, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << predictions_to_ndjson(preds);
  if (!f) throw IoError("write failed: " + path);
}

std::vector<PredictionRecord> read_predictions(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return predictions_from_ndjson(ss.str());
}

namespace {

void put_le(std::string& out, std::uint32_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::string escape_xml(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

std::string bmp_bytes(const data::Image& image) {
  const std::uint32_t w = static_cast<std::uint32_t>(image.width), h = static_cast<std::uint32_t>(image.height);
  const std::uint32_t row = (3 * w + 3) & ~3u;
  const std::uint32_t size = 54 + row * h;
  std::string out = "BM";
  put_le(out, size, 4);
  put_le(out, 0, 4);
  put_le(out, 54, 4);
  put_le(out, 40, 4);
  put_le(out, w, 4);
  put_le(out, h, 4);
  put_le(out, 1, 2);
  put_le(out, 24, 2);
  put_le(out, 0, 4);
  put_le(out, row * h, 4);
  put_le(out, 2835, 4);
  put_le(out, 2835, 4);
  put_le(out, 0, 4);
  put_le(out, 0, 4);
  for (std::uint32_t y = h; y-- > 0;) {
    std::uint32_t written = 0;
    for (std::uint32_t x = 0; x < w; ++x) {
      const std::size_t i = 3 * (static_cast<std::size_t>(y) * w + x);
      out.push_back(static_cast<char>(image.rgb[i + 2]));
      out.push_back(static_cast<char>(image.rgb[i + 1]));
      out.push_back(static_cast<char>(image.rgb[i]));
      written += 3;
    }
    for (; written < row; ++written) out.push_back(0);
  }
  return out;
}

std::string base64(std::string_view bytes) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8) | static_cast<unsigned char>(bytes[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    if (i + 1 < bytes.size()) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string render_svg(const data::Image& image, const std::vector<PredictionRecord>& preds, double threshold) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << image.width << "\" height=\"" << image.height
    << "\" viewBox=\"0 0 " << image.width << ' ' << image.height << "\">\n";
  s << "<image x=\"0\" y=\"0\" width=\"" << image.width << "\" height=\"" << image.height
    << "\" style=\"image-rendering:pixelated\" href=\"data:image/bmp;base64," << base64(bmp_bytes(image)) << "\"/>\n";
  for (const auto& p : preds) {
    if (p.image_id != image.id || p.score < threshold) continue;
    s << "<rect x=\"" << num(p.box.x1) << "\" y=\"" << num(p.box.y1) << "\" width=\"" << num(p.box.width())
      << "\" height=\"" << num(p.box.height()) << "\" fill=\"none\" stroke=\"#ff2020\" stroke-width=\"0.5\"/>\n";
    s << "<text x=\"" << num(p.box.x1) << "\" y=\"" << num(p.box.y1)
      << "\" font-size=\"4\" fill=\"#ffffff\" stroke=\"#000000\" stroke-width=\"0.1\">" << escape_xml(p.text) << " "
      << num(std::round(p.score * 100) / 100) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

RenderReport render(const std::vector<PredictionRecord>& preds, const data::Dataset& ds, const std::string& out_dir,
                    double threshold) {
  namespace fs = std::filesystem;
  RenderReport report;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  std::set<std::int64_t> missing;
  std::map<std::int64_t, std::vector<PredictionRecord>> by_image;
  for (const auto& p : preds) {
    if (!ds.find_image(p.image_id)) {
      missing.insert(p.image_id);
    } else {
      by_image[p.image_id].push_back(p);
    }
  }
  for (const auto& im : ds.images) {
    const std::string path = (fs::path(out_dir) / (std::to_string(im.id) + ".svg")).string();
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << render_svg(im, by_image[im.id], threshold);
    if (!f) throw IoError("write failed: " + path);
    report.written.push_back(path);
  }
  report.skipped.assign(missing.begin(), missing.end());
  return report;
}

}  // namespace r2t::harness
