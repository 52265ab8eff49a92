#include "r2t/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "r2t/errors.hpp"
#include "r2t/ops.hpp"

namespace r2t {

void DecoderConfig::validate() const {
  if (layers == 0) throw ConfigError("decoder: layers must be >= 1");
  if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("decoder: dim must be a positive multiple of heads");
  if (mlp_ratio == 0) throw ConfigError("decoder: mlp_ratio must be >= 1");
  if (max_tokens < 2) throw ConfigError("decoder: max_tokens must be >= 2");
  if (crop_side < 1) throw ConfigError("decoder: crop_side must be >= 1");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("decoder: label_smoothing in [0, 1)");
}

std::vector<std::uint8_t> build_seq2seq_mask(std::size_t m, std::size_t n) {
  if (m == 0) throw ContractViolation("build_seq2seq_mask: need at least one object token");
  const std::size_t t = m + n;
  std::vector<std::uint8_t> mask(t * t, 0);
  for (std::size_t i = 0; i < t; ++i) {
    const std::size_t last = i < m ? m : i + 1;
    for (std::size_t j = 0; j < last; ++j) mask[i * t + j] = 1;
  }
  return mask;
}

double mean_score(std::span<const double> scores) {
  if (scores.empty()) return 0.0;
  double s = 0;
  for (double x : scores) s += x;
  return s / static_cast<double>(scores.size());
}

double label_smoothing_floor(std::size_t vocab_size, double epsilon) {
  const double v = static_cast<double>(vocab_size);
  const double on = 1.0 - epsilon + epsilon / v, off = epsilon / v;
  double h = -on * std::log(on);
  if (off > 0) h -= (v - 1) * off * std::log(off);
  return h;
}

double score_object(double objectness, const DescriptionCandidate& candidate) {
  if (!(objectness >= 0 && objectness <= 1) || !(candidate.desc_score >= 0 && candidate.desc_score <= 1)) {
    throw ContractViolation("score_object: scores must lie in [0, 1]");
  }
  return std::sqrt(objectness) * std::sqrt(candidate.desc_score);
}

TextDecoder::TextDecoder(const DecoderConfig& cfg, const text::Vocabulary& vocab, std::size_t feature_channels,
                         nn::Rng& rng)
    : cfg_(cfg), vocab_(vocab) {
  cfg_.validate();
  obj_proj_ = nn::Linear::make(feature_channels, cfg_.dim, rng);
  obj_norm_ = nn::LayerNorm::make(cfg_.dim);
  token_embed_ = nn::normal_init({vocab_.size(), cfg_.dim}, 0.02, rng);
  pos_embed_ = nn::normal_init({cfg_.max_tokens, cfg_.dim}, 0.02, rng);
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    blocks_.push_back(nn::TransformerBlock::make(cfg_.dim, cfg_.heads, cfg_.dim * cfg_.mlp_ratio, rng));
  }
  final_norm_ = nn::LayerNorm::make(cfg_.dim);
  out_ = nn::Linear::make(cfg_.dim, vocab_.size(), rng);
}

Tensor TextDecoder::project_objects(const Tensor& crops) const { return obj_norm_(obj_proj_(crops)); }

Tensor TextDecoder::logits(const Tensor& objs, const std::vector<std::vector<text::TokenId>>& inputs) const {
  if (objs.rank() != 3 || objs.dim(2) != cfg_.dim) {
    throw ContractViolation("decoder: object features must be [B, m, " + std::to_string(cfg_.dim) + "], got " +
                            shape_str(objs.shape()));
  }
  const std::size_t b = objs.dim(0), m = objs.dim(1);
  if (inputs.size() != b) throw ContractViolation("decoder: one id row per object set");
  const std::size_t len = inputs[0].size();
  if (len == 0) throw ContractViolation("decoder: empty prefix");
  if (len > cfg_.max_tokens) {
    throw ContractViolation("decoder: prefix of " + std::to_string(len) + " exceeds max_tokens " +
                            std::to_string(cfg_.max_tokens));
  }
  std::vector<text::TokenId> flat;
  for (const auto& row : inputs) {
    if (row.size() != len) throw ContractViolation("decoder: id rows must share a length");
    for (auto id : row) {
      if (id >= vocab_.size()) throw IndexError("decoder: token id " + std::to_string(id) + " out of range");
    }
    flat.insert(flat.end(), row.begin(), row.end());
  }
  Tensor text = ops::reshape(ops::embedding(token_embed_, flat), {b, len, cfg_.dim});
  text = ops::add(text, ops::slice(pos_embed_, 0, 0, len));
  Tensor x = ops::concat({objs, text}, 1);
  const auto mask = build_seq2seq_mask(m, len);
  for (const auto& blk : blocks_) x = blk(x, nullptr, &mask);
  x = final_norm_(ops::slice(x, 1, m, m + len));
  return out_(x);
}

Tensor TextDecoder::decode_step(const Tensor& objs, std::span<const text::TokenId> prefix) const {
  if (objs.rank() != 2) throw ContractViolation("decode_step: object features must be [m, dim]");
  if (prefix.empty() || prefix[0] < 3 || !vocab_.is_special(prefix[0])) {
    throw ContractViolation("decode_step: prefix must start with a task token");
  }
  const std::size_t len = prefix.size();
  Tensor lg = logits(ops::reshape(objs, {1, objs.dim(0), objs.dim(1)}),
                     {std::vector<text::TokenId>(prefix.begin(), prefix.end())});
  return ops::softmax(ops::reshape(ops::slice(lg, 1, len - 1, len), {vocab_.size()}));
}

Tensor TextDecoder::lm_loss(const Tensor& objs, std::span<const text::TokenId> targets, std::size_t task_id) const {
  if (objs.rank() != 2) throw ContractViolation("lm_loss: object features must be [m, dim]");
  return lm_loss_batch(ops::reshape(objs, {1, objs.dim(0), objs.dim(1)}),
                       {std::vector<text::TokenId>(targets.begin(), targets.end())}, {task_id});
}

Tensor TextDecoder::lm_loss_batch(const Tensor& objs, const std::vector<std::vector<text::TokenId>>& targets,
                                  const std::vector<std::size_t>& task_ids) const {
  const std::size_t b = targets.size();
  if (b == 0 || task_ids.size() != b) throw ContractViolation("lm_loss: need one task id per target");
  std::size_t len = 0;
  for (const auto& t : targets) {
    if (t.empty()) throw ContractViolation("lm_loss: empty target");
    for (auto id : t) {
      if (vocab_.is_special(id)) throw ContractViolation("lm_loss: target contains a special token");
    }
    len = std::max(len, t.size() + 1);
  }
  std::vector<std::vector<text::TokenId>> inputs(b);
  for (std::size_t r = 0; r < b; ++r) {
    inputs[r].push_back(vocab_.task(task_ids[r]));
    inputs[r].insert(inputs[r].end(), targets[r].begin(), targets[r].end());
    inputs[r].resize(len, vocab_.pad());
  }
  Tensor flat = ops::reshape(logits(objs, inputs), {b * len, vocab_.size()});
  Tensor total;
  for (std::size_t r = 0; r < b; ++r) {
    std::vector<std::size_t> rows(targets[r].size() + 1);
    std::iota(rows.begin(), rows.end(), r * len);
    std::vector<std::size_t> labels(targets[r].begin(), targets[r].end());
    labels.push_back(vocab_.eos());
    Tensor l = ops::cross_entropy_label_smoothed(ops::gather_rows(flat, rows), labels, cfg_.label_smoothing);
    total = total.defined() ? ops::add(total, l) : l;
  }
  return b == 1 ? total : ops::scale(total, 1.0 / static_cast<double>(b));
}

namespace {

std::size_t argmax(std::span<const double> p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best;
}

}  // namespace

void TextDecoder::continue_greedy(const Tensor& objs, std::vector<std::vector<text::TokenId>>& prefixes,
                                  std::vector<DescriptionCandidate>& out, std::vector<bool>& done) const {
  const std::size_t b = prefixes.size();
  const std::size_t v = vocab_.size();
  for (;;) {
    std::vector<std::size_t> live;
    for (std::size_t r = 0; r < b; ++r) {
      if (done[r]) continue;
      if (prefixes[r].size() > cfg_.max_tokens) {
        out[r].truncated = true;
        done[r] = true;
        continue;
      }
      live.push_back(r);
    }
    if (live.empty()) break;
    // Rows in `live` share a prefix length in practice; group by length to be safe.
    std::sort(live.begin(), live.end(), [&](std::size_t a, std::size_t c) {
      return prefixes[a].size() != prefixes[c].size() ? prefixes[a].size() < prefixes[c].size() : a < c;
    });
    const std::size_t len = prefixes[live[0]].size();
    std::vector<std::size_t> group;
    for (auto r : live) {
      if (prefixes[r].size() == len) group.push_back(r);
    }
    std::vector<std::vector<text::TokenId>> rows;
    for (auto r : group) rows.push_back(prefixes[r]);
    Tensor sub = group.size() == b ? objs : ops::gather_rows(objs, group);
    Tensor lg = logits(sub, rows);
    Tensor last = ops::softmax(ops::reshape(ops::slice(lg, 1, len - 1, len), {group.size(), v}));
    for (std::size_t g = 0; g < group.size(); ++g) {
      const std::size_t r = group[g];
      auto p = last.data().subspan(g * v, v);
      const std::size_t tok = argmax(p);
      out[r].token_scores.push_back(p[tok]);
      if (tok == vocab_.eos()) {
        done[r] = true;
      } else {
        out[r].token_ids.push_back(tok);
        prefixes[r].push_back(tok);
      }
    }
  }
  for (auto& c : out) c.desc_score = mean_score(c.token_scores);
}

DescriptionCandidate TextDecoder::generate_greedy(const Tensor& objs, std::size_t task_id) const {
  return generate_branch_first(objs, task_id, 1)[0];
}

std::vector<DescriptionCandidate> TextDecoder::generate_branch_first(const Tensor& objs, std::size_t task_id,
                                                                     std::size_t k) const {
  if (objs.rank() != 2) throw ContractViolation("generate: object features must be [m, dim]");
  return generate_branch_first_batch(ops::reshape(objs, {1, objs.dim(0), objs.dim(1)}), task_id, k)[0];
}

std::vector<std::vector<DescriptionCandidate>> TextDecoder::generate_branch_first_batch(const Tensor& objs,
                                                                                        std::size_t task_id,
                                                                                        std::size_t k) const {
  if (k == 0) throw ConfigError("generate: beam size k must be >= 1");
  if (objs.rank() != 3) throw ContractViolation("generate: object features must be [R, m, dim]");
  const text::TokenId begin = vocab_.task(task_id);
  NoGradScope no_grad;
  const std::size_t r_count = objs.dim(0), v = vocab_.size();
  const std::size_t kk = std::min(k, v);
  Tensor first = ops::softmax(ops::reshape(logits(objs, std::vector<std::vector<text::TokenId>>(r_count, {begin})),
                                           {r_count, v}));
  std::vector<std::vector<text::TokenId>> prefixes;
  std::vector<DescriptionCandidate> flat;
  std::vector<std::size_t> owner;
  std::vector<bool> done;
  for (std::size_t r = 0; r < r_count; ++r) {
    auto p = first.data().subspan(r * v, v);
    std::vector<std::size_t> order(v);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    for (std::size_t j = 0; j < kk; ++j) {
      DescriptionCandidate c;
      c.token_scores.push_back(p[order[j]]);
      std::vector<text::TokenId> pre{begin};
      const bool eos = order[j] == vocab_.eos();
      if (!eos) {
        c.token_ids.push_back(order[j]);
        pre.push_back(order[j]);
      }
      done.push_back(eos);
      prefixes.push_back(std::move(pre));
      flat.push_back(std::move(c));
      owner.push_back(r);
    }
  }
  Tensor expanded = kk == 1 ? objs : ops::gather_rows(objs, owner);
  continue_greedy(expanded, prefixes, flat, done);
  std::vector<std::vector<DescriptionCandidate>> out(r_count);
  for (std::size_t i = 0; i < flat.size(); ++i) out[owner[i]].push_back(std::move(flat[i]));
  return out;
}

void TextDecoder::visit(const std::string& prefix, const nn::ParamVisitor& f) {
  obj_proj_.visit(prefix + ".obj_proj", f);
  obj_norm_.visit(prefix + ".obj_norm", f);
  f(prefix + ".token_embed", token_embed_);
  f(prefix + ".pos_embed", pos_embed_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(prefix + ".block" + std::to_string(i), f);
  final_norm_.visit(prefix + ".final_norm", f);
  out_.visit(prefix + ".out", f);
}

}  // namespace r2t
