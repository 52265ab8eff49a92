#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "r2t/box.hpp"
#include "r2t/tensor.hpp"

// Geometric-shape scenes with class-name and sentence annotations.
namespace r2t::data {

inline constexpr std::size_t kTaskDetection = 1;
inline constexpr std::size_t kTaskCaption = 2;

inline const std::vector<std::string> kShapes = {"circle", "square", "triangle", "diamond", "cross", "ring"};
inline const std::vector<std::string> kColors = {"red", "green", "blue", "yellow", "purple"};

struct Image {
  std::int64_t id = 0;
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  // [H, W, 3] in [0, 1].
  Tensor tensor() const;
};

struct Annotation {
  std::int64_t image_id = 0;
  Box box;
  std::string text;
  std::size_t task = kTaskDetection;
};

struct Dataset {
  std::vector<Image> images;
  std::vector<Annotation> annotations;

  const Image* find_image(std::int64_t id) const;
  std::vector<const Annotation*> regions(std::int64_t image_id, std::size_t task) const;
  std::vector<std::string> texts() const;
};

struct SceneOptions {
  std::size_t size = 64;
  std::size_t min_shapes = 1, max_shapes = 5;
};

// Deterministic in (seed, split). Image ids are offset per split so that
// train and val never share an id.
Dataset generate_dataset(std::uint64_t seed, std::size_t n, const std::string& split, const SceneOptions& opt = {});

// Single JSON document; pixels inline as hex.
std::string dataset_to_json(const Dataset& ds);
Dataset dataset_from_json(std::string_view text);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Uniform resize by s in [lo, hi] about the top-left corner, then crop or
// pad back to the original size. Regions keeping < half their area are dropped.
struct Jittered {
  Tensor image;
  std::vector<Box> boxes;
  std::vector<std::size_t> kept;  // indices into the input boxes
};
Jittered scale_jitter(const Tensor& image, const std::vector<Box>& boxes, double scale);

enum class Style { kClassName, kSentence, kOther };
// kClassName: a bare shape word. kSentence: "a <size> <color> <shape>"
// optionally followed by "<relation> a <color> <shape>".
Style classify_style(std::string_view text);

}  // namespace r2t::data
