#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

#include "r2t/nn.hpp"
#include "r2t/tensor.hpp"

namespace r2t {

struct EncoderConfig {
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t window = 4;
  std::set<std::size_t> global_blocks = {1, 3};
  std::size_t mlp_ratio = 4;
  std::size_t pyramid_channels = 32;

  // Throws ConfigError. Global blocks must sit at (k+1)*depth/n - 1.
  void validate() const;
};

enum class Level : std::size_t { kHi = 0, kBase, kLow1, kLow2, kLow3 };
inline constexpr std::size_t kNumLevels = 5;
inline constexpr std::array<const char*, kNumLevels> kLevelNames = {"P_hi", "P_base", "P_low1", "P_low2", "P_low3"};

// Five maps [H_s, W_s, C], consecutive levels halving the side.
struct FeaturePyramid {
  std::array<Tensor, kNumLevels> levels;
  std::array<double, kNumLevels> strides{};  // image pixels per feature cell

  const Tensor& at(Level l) const { return levels[static_cast<std::size_t>(l)]; }
};

// [H, W, C] -> [H/w * W/w, w, w, C] in row-major window order.
Tensor window_partition(const Tensor& map, std::size_t window);
Tensor window_merge(const Tensor& windows, std::size_t height, std::size_t width);

// Index into the (2w-1)^2 relative-offset table for every (query, key)
// pair of a w x w window, row-major over [w*w, w*w].
std::vector<std::size_t> relative_position_index(std::size_t window);

// One pre-norm transformer block over a [H, W, D] token map. window == 0
// attends globally; otherwise attention is restricted to non-overlapping
// windows and rel_table ([(2w-1)^2, heads]) supplies the logit bias.
Tensor attention_block(const nn::TransformerBlock& block, const Tensor& map, std::size_t window,
                       const Tensor* rel_table);

class VisualEncoder {
 public:
  VisualEncoder(const EncoderConfig& cfg, nn::Rng& rng);

  const EncoderConfig& config() const { return cfg_; }

  // image: [H, W, 3] in [0, 1] -> [H/p * W/p, embed_dim] tokens, row-major.
  Tensor patchify(const Tensor& image) const;
  // Last block output as a [H/p, W/p, D] map.
  Tensor backbone(const Tensor& image) const;
  FeaturePyramid encode(const Tensor& image) const;

  void visit(const std::string& prefix, const nn::ParamVisitor& f);

  const nn::TransformerBlock& block(std::size_t i) const { return blocks_[i]; }
  const Tensor& rel_table(std::size_t i) const { return rel_tables_[i]; }

 private:
  EncoderConfig cfg_;
  nn::Linear patch_embed_;
  std::vector<nn::TransformerBlock> blocks_;
  std::vector<Tensor> rel_tables_;  // undefined for global blocks
  std::array<nn::Linear, kNumLevels> level_proj_;
  std::array<nn::LayerNorm, kNumLevels> level_norm_;
};

}  // namespace r2t
