#include "r2t/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "r2t/errors.hpp"
#include "r2t/hash.hpp"

namespace r2t::text {

namespace {

const std::vector<std::string> kFixedSpecials = {"[PAD]", "[UNK]", "[EOS]"};

bool is_bracketed(std::string_view s) { return s.size() > 2 && s.front() == '[' && s.back() == ']'; }

std::vector<std::string> split_words(std::string_view normalized) {
  std::vector<std::string> words;
  std::istringstream is{std::string(normalized)};
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

// Byte offsets of UTF-8 code point starts, plus the end offset.
std::vector<std::size_t> char_bounds(std::string_view word) {
  std::vector<std::size_t> b;
  for (std::size_t i = 0; i < word.size(); ++i) {
    if ((static_cast<unsigned char>(word[i]) & 0xC0) != 0x80) b.push_back(i);
  }
  b.push_back(word.size());
  return b;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> task_tokens, std::vector<std::string> pieces,
                       std::string continuation_prefix)
    : num_tasks_(task_tokens.size()), prefix_(std::move(continuation_prefix)) {
  if (task_tokens.empty()) throw ConfigError("vocabulary: at least one task token is required");
  if (prefix_.empty()) throw ConfigError("vocabulary: continuation prefix must be non-empty");
  tokens_ = kFixedSpecials;
  for (auto& t : task_tokens) {
    if (!is_bracketed(t)) throw ConfigError("vocabulary: task token '" + t + "' must look like [name]");
    tokens_.push_back(std::move(t));
  }
  for (auto& p : pieces) {
    if (p.empty() || p == prefix_) throw ConfigError("vocabulary: empty piece");
    if (is_bracketed(p)) throw ConfigError("vocabulary: piece '" + p + "' collides with special-token syntax");
    tokens_.push_back(std::move(p));
  }
  for (TokenId i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) throw ConfigError("vocabulary: duplicate token '" + tokens_[i] + "'");
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw IndexError("vocabulary: id " + std::to_string(id) + " out of range [0, " + std::to_string(size()) + ")");
  }
  return tokens_[id];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::task(std::size_t task_id) const {
  if (task_id < 1 || task_id > num_tasks_) {
    throw ConfigError("unknown task id " + std::to_string(task_id) + "; valid ids are 1.." + std::to_string(num_tasks_));
  }
  return 2 + task_id;
}

bool Vocabulary::is_continuation(TokenId id) const {
  return !is_special(id) && token(id).starts_with(prefix_);
}

std::string Vocabulary::to_text() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::from_text(std::string_view text, std::string continuation_prefix) {
  std::vector<std::string> lines;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < 4 || !std::equal(kFixedSpecials.begin(), kFixedSpecials.end(), lines.begin())) {
    throw IntegrityError("vocabulary file must start with [PAD], [UNK], [EOS] and at least one task token");
  }
  std::size_t i = 3;
  std::vector<std::string> tasks, pieces;
  while (i < lines.size() && is_bracketed(lines[i])) tasks.push_back(lines[i++]);
  for (; i < lines.size(); ++i) pieces.push_back(lines[i]);
  try {
    return Vocabulary(std::move(tasks), std::move(pieces), std::move(continuation_prefix));
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("vocabulary file: ") + e.what());
  }
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write vocabulary file " + path);
  os << to_text();
  if (!os) throw IoError("failed writing vocabulary file " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read vocabulary file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_text(ss.str());
}

std::uint64_t Vocabulary::hash() const { return fnv1a64(to_text()); }

std::string normalize(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    const bool keep = c >= 0x80 || std::isalnum(c) || c == '-';
    if (!keep) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
  }
  return out;
}

Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t max_size,
                       const std::vector<std::string>& task_tokens, const std::string& prefix) {
  if (corpus.empty()) throw ConfigError("build_vocab: corpus is empty");
  std::map<std::string, std::size_t> word_freq;
  for (const auto& line : corpus) {
    for (auto& w : split_words(normalize(line))) ++word_freq[w];
  }
  if (word_freq.empty()) throw ConfigError("build_vocab: corpus has no words after normalization");

  // Current segmentation of each distinct word.
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  std::set<std::string> alphabet;
  for (const auto& [w, freq] : word_freq) {
    auto b = char_bounds(w);
    std::vector<std::string> pieces;
    for (std::size_t i = 0; i + 1 < b.size(); ++i) {
      std::string p = w.substr(b[i], b[i + 1] - b[i]);
      if (i > 0) p = prefix + p;
      alphabet.insert(p);
      pieces.push_back(std::move(p));
    }
    words.emplace_back(std::move(pieces), freq);
  }
  const std::size_t specials = kFixedSpecials.size() + task_tokens.size();
  if (max_size < specials + alphabet.size()) {
    throw ConfigError("build_vocab: max_size " + std::to_string(max_size) + " cannot hold " +
                      std::to_string(specials) + " specials and " + std::to_string(alphabet.size()) +
                      " alphabet pieces");
  }
  std::vector<std::string> pieces(alphabet.begin(), alphabet.end());
  std::set<std::string> present(alphabet.begin(), alphabet.end());

  auto merged_of = [&prefix](const std::string& a, const std::string& b) { return a + b.substr(prefix.size()); };
  while (specials + pieces.size() < max_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& [seg, freq] : words) {
      for (std::size_t i = 0; i + 1 < seg.size(); ++i) pairs[{seg[i], seg[i + 1]}] += freq;
    }
    if (pairs.empty()) break;
    // Highest frequency; ties go to the lexicographically first pair (map order).
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto [left, right] = best->first;
    const std::string merged = merged_of(left, right);
    for (auto& [seg, freq] : words) {
      std::vector<std::string> next;
      for (std::size_t i = 0; i < seg.size(); ++i) {
        if (i + 1 < seg.size() && seg[i] == left && seg[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(seg[i]);
        }
      }
      seg = std::move(next);
    }
    if (present.insert(merged).second) pieces.push_back(merged);
  }
  return Vocabulary(task_tokens, std::move(pieces), prefix);
}

std::vector<std::string> encode_pieces(std::string_view text, const Vocabulary& vocab) {
  const std::string norm = normalize(text);
  if (norm.empty()) throw ContractViolation("encode: text is empty after normalization");
  std::vector<std::string> out;
  for (const auto& word : split_words(norm)) {
    const auto b = char_bounds(word);
    std::vector<std::string> sub;
    bool bad = false;
    std::size_t start = 0;  // index into b
    while (start + 1 < b.size()) {
      std::size_t end = b.size() - 1;
      std::string found;
      while (end > start) {
        std::string cand = word.substr(b[start], b[end] - b[start]);
        if (start > 0) cand = vocab.continuation_prefix() + cand;
        auto id = vocab.find(cand);
        if (id && !vocab.is_special(*id)) {
          found = std::move(cand);
          break;
        }
        --end;
      }
      if (found.empty()) {
        bad = true;
        break;
      }
      sub.push_back(std::move(found));
      start = end;
    }
    if (bad) {
      out.push_back(vocab.token(vocab.unk()));
    } else {
      out.insert(out.end(), sub.begin(), sub.end());
    }
  }
  return out;
}

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const auto& p : encode_pieces(text, vocab)) ids.push_back(*vocab.find(p));
  return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& tok = vocab.token(id);
    if (vocab.is_special(id)) continue;
    if (vocab.is_continuation(id)) {
      out += tok.substr(vocab.continuation_prefix().size());
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return normalize(out);
}

}  // namespace r2t::text
