#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

// WordPiece-style subword vocabulary and greedy longest-match tokenizer.
namespace r2t::text {

using TokenId = std::size_t;

inline const std::vector<std::string> kDefaultTaskTokens = {"[ObjectDet]", "[DenseCap]"};

// Dense id <-> token map. Ids 0..2 are [PAD], [UNK], [EOS]; ids 3..3+T-1
// are the task begin tokens; the rest are subword pieces. Immutable.
class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> task_tokens, std::vector<std::string> pieces,
             std::string continuation_prefix = "##");

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;

  TokenId pad() const { return 0; }
  TokenId unk() const { return 1; }
  TokenId eos() const { return 2; }
  std::size_t num_tasks() const { return num_tasks_; }
  // task is 1-based, in [1, num_tasks()].
  TokenId task(std::size_t task_id) const;
  bool is_special(TokenId id) const { return id < 3 + num_tasks_; }
  const std::string& continuation_prefix() const { return prefix_; }
  bool is_continuation(TokenId id) const;

  const std::vector<std::string>& tokens() const { return tokens_; }

  // One token per line; line number is the id.
  std::string to_text() const;
  static Vocabulary from_text(std::string_view text, std::string continuation_prefix = "##");
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
  // FNV-1a of to_text().
  std::uint64_t hash() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t num_tasks_ = 0;
  std::string prefix_;
};

// Lowercase, punctuation other than hyphens removed, whitespace collapsed.
std::string normalize(std::string_view text);

// Frequency-driven merge vocabulary: starts from the character alphabet
// (head and continuation forms) and repeatedly adds the most frequent
// adjacent piece pair until max_size tokens or no pairs remain.
Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t max_size,
                       const std::vector<std::string>& task_tokens = kDefaultTaskTokens,
                       const std::string& continuation_prefix = "##");

// Greedy longest-match-first per word; a word that cannot be fully
// covered becomes a single [UNK].
std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab);
std::vector<std::string> encode_pieces(std::string_view text, const Vocabulary& vocab);

// Drops specials, merges continuation pieces into their head word.
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

}  // namespace r2t::text
