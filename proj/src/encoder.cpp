#include "r2t/encoder.hpp"

#include "r2t/errors.hpp"
#include "r2t/ops.hpp"

namespace r2t {

void EncoderConfig::validate() const {
  if (patch_size == 0 || embed_dim == 0 || depth == 0 || heads == 0 || window == 0 || mlp_ratio == 0 ||
      pyramid_channels == 0) {
    throw ConfigError("encoder: sizes must be positive");
  }
  if (embed_dim % heads != 0) {
    throw ConfigError("encoder: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                      std::to_string(heads));
  }
  const std::size_t n = global_blocks.size();
  if (n > depth) throw ConfigError("encoder: more global blocks than depth");
  std::size_t k = 0;
  for (auto idx : global_blocks) {
    if (idx != (k + 1) * depth / n - 1) {
      throw ConfigError("encoder: global blocks must be evenly spaced at (k+1)*depth/n - 1");
    }
    ++k;
  }
}

Tensor window_partition(const Tensor& map, std::size_t window) {
  if (map.rank() != 3) throw ContractViolation("window_partition: expected [H, W, C], got " + shape_str(map.shape()));
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2);
  if (window == 0 || h % window || w % window) {
    throw ContractViolation("window_partition: map " + shape_str(map.shape()) + " not divisible by window " +
                            std::to_string(window));
  }
  Tensor t = ops::reshape(map, {h / window, window, w / window, window, c});
  t = ops::permute(t, {0, 2, 1, 3, 4});
  return ops::reshape(t, {(h / window) * (w / window), window, window, c});
}

Tensor window_merge(const Tensor& windows, std::size_t height, std::size_t width) {
  const std::size_t window = windows.dim(1), c = windows.dim(3);
  if (windows.rank() != 4 || height % window || width % window ||
      windows.dim(0) != (height / window) * (width / window)) {
    throw ContractViolation("window_merge: windows " + shape_str(windows.shape()) + " do not tile " +
                            std::to_string(height) + "x" + std::to_string(width));
  }
  Tensor t = ops::reshape(windows, {height / window, width / window, window, window, c});
  t = ops::permute(t, {0, 2, 1, 3, 4});
  return ops::reshape(t, {height, width, c});
}

std::vector<std::size_t> relative_position_index(std::size_t window) {
  const std::size_t t = window * window, span = 2 * window - 1;
  std::vector<std::size_t> idx(t * t);
  for (std::size_t q = 0; q < t; ++q) {
    for (std::size_t k = 0; k < t; ++k) {
      const std::size_t dy = q / window + window - 1 - k / window;
      const std::size_t dx = q % window + window - 1 - k % window;
      idx[q * t + k] = dy * span + dx;
    }
  }
  return idx;
}

Tensor attention_block(const nn::TransformerBlock& block, const Tensor& map, std::size_t window,
                       const Tensor* rel_table) {
  if (map.rank() != 3) throw ContractViolation("attention_block: expected [H, W, D], got " + shape_str(map.shape()));
  const std::size_t h = map.dim(0), w = map.dim(1), d = map.dim(2);
  if (window == 0) {
    Tensor out = block(ops::reshape(map, {1, h * w, d}));
    return ops::reshape(out, {h, w, d});
  }
  const std::size_t heads = block.attn.heads, t = window * window;
  if (!rel_table || rel_table->shape() != Shape{(2 * window - 1) * (2 * window - 1), heads}) {
    throw ContractViolation("attention_block: relative bias table " +
                            (rel_table ? shape_str(rel_table->shape()) : std::string("<missing>")) +
                            " does not match window " + std::to_string(window) + " with " + std::to_string(heads) +
                            " heads");
  }
  const auto idx = relative_position_index(window);
  Tensor bias = ops::embedding(*rel_table, idx);  // [t*t, heads]
  bias = ops::reshape(ops::transpose(bias, 0, 1), {heads, t, t});
  Tensor win = window_partition(map, window);
  const std::size_t n = win.dim(0);
  Tensor out = block(ops::reshape(win, {n, t, d}), &bias);
  return window_merge(ops::reshape(out, {n, window, window, d}), h, w);
}

VisualEncoder::VisualEncoder(const EncoderConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.embed_dim;
  patch_embed_ = nn::Linear::make(3 * cfg_.patch_size * cfg_.patch_size, d, rng);
  const std::size_t span = 2 * cfg_.window - 1;
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    blocks_.push_back(nn::TransformerBlock::make(d, cfg_.heads, d * cfg_.mlp_ratio, rng));
    rel_tables_.push_back(cfg_.global_blocks.count(i) ? Tensor()
                                                      : nn::normal_init({span * span, cfg_.heads}, 0.02, rng));
  }
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    level_proj_[l] = nn::Linear::make(d, cfg_.pyramid_channels, rng);
    level_norm_[l] = nn::LayerNorm::make(cfg_.pyramid_channels);
  }
}

Tensor VisualEncoder::patchify(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ContractViolation("patchify: expected [H, W, 3] image, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1), p = cfg_.patch_size;
  if (h % p || w % p) {
    throw ContractViolation("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                            " sides must be multiples of " + std::to_string(p));
  }
  // [H, W, 3] -> [gh, gw, p, p, 3] rows of 3*p*p, centered pixel values.
  Tensor t = ops::reshape(image, {h / p, p, w / p, p, 3});
  t = ops::reshape(ops::permute(t, {0, 2, 1, 3, 4}), {(h / p) * (w / p), p * p * 3});
  Tensor centered = ops::scale(ops::add(t, Tensor::full({p * p * 3}, -0.5)), 4.0);
  return patch_embed_(centered);
}

Tensor VisualEncoder::backbone(const Tensor& image) const {
  const std::size_t gh = image.dim(0) / cfg_.patch_size, gw = image.dim(1) / cfg_.patch_size;
  Tensor map = ops::reshape(patchify(image), {gh, gw, cfg_.embed_dim});
  if (gh % cfg_.window || gw % cfg_.window) {
    throw ContractViolation("encoder: token grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                            " not divisible by window " + std::to_string(cfg_.window));
  }
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    const bool global = cfg_.global_blocks.count(i) > 0;
    map = attention_block(blocks_[i], map, global ? 0 : cfg_.window, global ? nullptr : &rel_tables_[i]);
  }
  return map;
}

FeaturePyramid VisualEncoder::encode(const Tensor& image) const {
  Tensor base = backbone(image);
  const std::size_t gh = base.dim(0), gw = base.dim(1);
  if (gh % 8 || gw % 8) {
    throw ContractViolation("encoder: token grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                            " must be divisible by 8 for the pyramid");
  }
  std::array<Tensor, kNumLevels> raw;
  raw[0] = ops::resize_bilinear(base, 2 * gh, 2 * gw);
  raw[1] = base;
  raw[2] = ops::avg_pool2(base);
  raw[3] = ops::avg_pool2(raw[2]);
  raw[4] = ops::avg_pool2(raw[3]);
  FeaturePyramid pyr;
  double stride = static_cast<double>(cfg_.patch_size) / 2.0;
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    pyr.levels[l] = level_norm_[l](level_proj_[l](raw[l]));
    pyr.strides[l] = stride;
    stride *= 2.0;
  }
  return pyr;
}

void VisualEncoder::visit(const std::string& prefix, const nn::ParamVisitor& f) {
  patch_embed_.visit(prefix + ".patch_embed", f);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].visit(prefix + ".blocks." + std::to_string(i), f);
    if (rel_tables_[i].defined()) f(prefix + ".blocks." + std::to_string(i) + ".rel_bias", rel_tables_[i]);
  }
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    level_proj_[l].visit(prefix + ".pyramid." + kLevelNames[l] + ".proj", f);
    level_norm_[l].visit(prefix + ".pyramid." + kLevelNames[l] + ".norm", f);
  }
}

}  // namespace r2t
