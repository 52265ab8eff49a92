#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "r2t/box.hpp"
#include "r2t/nn.hpp"
#include "r2t/tokenizer.hpp"

namespace r2t {

struct DecoderConfig {
  std::size_t layers = 2;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_tokens = 20;  // longest prefix, begin token included
  std::size_t crop_side = 4;
  double label_smoothing = 0.1;

  // Throws ConfigError.
  void validate() const;
};

struct DescriptionCandidate {
  std::vector<text::TokenId> token_ids;  // excludes the begin token and [EOS]
  std::vector<double> token_scores;      // one per step, the [EOS] step included
  double desc_score = 0;
  bool truncated = false;  // hit max_tokens before [EOS]
};

struct DetectedObject {
  Box box;
  double objectness = 0;
  std::vector<DescriptionCandidate> candidates;
  std::vector<double> final_scores;
  std::size_t task_id = 1;
};

// Row-major (m+n) x (m+n): object rows see object columns only, text row
// m+i sees columns 0..m+i.
std::vector<std::uint8_t> build_seq2seq_mask(std::size_t m, std::size_t n);

double mean_score(std::span<const double> scores);
// Smallest achievable smoothed cross-entropy: the entropy of the smoothed target.
double label_smoothing_floor(std::size_t vocab_size, double epsilon);
// sqrt(objectness) * sqrt(desc_score)
double score_object(double objectness, const DescriptionCandidate& candidate);

class TextDecoder {
 public:
  TextDecoder(const DecoderConfig& cfg, const text::Vocabulary& vocab, std::size_t feature_channels, nn::Rng& rng);

  const DecoderConfig& config() const { return cfg_; }
  const text::Vocabulary& vocab() const { return vocab_; }

  // Region crops [R, s*s, C] -> object tokens [R, s*s, dim].
  Tensor project_objects(const Tensor& crops) const;

  // objs: [B, m, dim]; inputs: B equal-length id rows. -> logits [B, L, V].
  Tensor logits(const Tensor& objs, const std::vector<std::vector<text::TokenId>>& inputs) const;

  // objs: [m, dim]. Next-token probabilities [V] after `prefix`.
  Tensor decode_step(const Tensor& objs, std::span<const text::TokenId> prefix) const;

  // Teacher-forced smoothed CE averaged over the N+1 steps (N tokens + [EOS]).
  Tensor lm_loss(const Tensor& objs, std::span<const text::TokenId> targets, std::size_t task_id) const;
  // Mean of the per-region losses. objs: [B, m, dim].
  Tensor lm_loss_batch(const Tensor& objs, const std::vector<std::vector<text::TokenId>>& targets,
                       const std::vector<std::size_t>& task_ids) const;

  DescriptionCandidate generate_greedy(const Tensor& objs, std::size_t task_id) const;
  // Top-k first tokens, each continued greedily. Throws ConfigError for k == 0.
  std::vector<DescriptionCandidate> generate_branch_first(const Tensor& objs, std::size_t task_id,
                                                          std::size_t k) const;
  // Same for every object of objs [R, m, dim]; all branches decode together.
  std::vector<std::vector<DescriptionCandidate>> generate_branch_first_batch(const Tensor& objs,
                                                                             std::size_t task_id,
                                                                             std::size_t k) const;

  void visit(const std::string& prefix, const nn::ParamVisitor& f);

 private:
  // Extends each prefix greedily until [EOS] or the length cap.
  void continue_greedy(const Tensor& objs, std::vector<std::vector<text::TokenId>>& prefixes,
                       std::vector<DescriptionCandidate>& out, std::vector<bool>& done) const;

  DecoderConfig cfg_;
  text::Vocabulary vocab_;
  nn::Linear obj_proj_;
  nn::LayerNorm obj_norm_;
  Tensor token_embed_;  // [V, dim]
  Tensor pos_embed_;    // [max_tokens, dim]
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear out_;
};

}  // namespace r2t
