#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "r2t/metrics.hpp"
#include "r2t/model.hpp"
#include "r2t/synthetic.hpp"

namespace r2t::harness {

// Inference over every image; one record per (box, candidate).
std::vector<metrics::PredictionRecord> predict(const Model& model, const data::Dataset& ds, std::size_t task,
                                               std::size_t beam);

std::vector<metrics::GroundTruthRegion> ground_truth(const data::Dataset& ds, std::size_t task);

// Distinct class-name texts, sorted.
std::vector<std::string> class_names(const data::Dataset& ds);

// Fraction of records whose text has the style the task token asks for
// (class name for task 1, sentence for task 2). 1 when there are no records.
double style_consistency(const std::vector<metrics::PredictionRecord>& preds, std::size_t task);

// One JSON object per line: image_id, x1, y1, x2, y2, score, text, task.
std::string predictions_to_ndjson(const std::vector<metrics::PredictionRecord>& preds);
std::vector<metrics::PredictionRecord> predictions_from_ndjson(std::string_view text);
void write_predictions(const std::vector<metrics::PredictionRecord>& preds, const std::string& path);
std::vector<metrics::PredictionRecord> read_predictions(const std::string& path);

// 24-bit bottom-up BMP.
std::string bmp_bytes(const data::Image& image);
std::string base64(std::string_view bytes);

// Inline BMP background, then one rect and one text label per record with
// score >= threshold, in record order.
std::string render_svg(const data::Image& image, const std::vector<metrics::PredictionRecord>& preds,
                       double threshold);

struct RenderReport {
  std::vector<std::string> written;
  std::vector<std::int64_t> skipped;  // prediction image ids missing from the dataset
};

// Writes <out_dir>/<image_id>.svg for every dataset image.
RenderReport render(const std::vector<metrics::PredictionRecord>& preds, const data::Dataset& ds,
                    const std::string& out_dir, double threshold);

}  // namespace r2t::harness
