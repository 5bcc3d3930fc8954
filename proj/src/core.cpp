#include "fuselm/core.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>

#include "fuselm/error.hpp"

namespace fuselm {
namespace {

constexpr std::string_view kBosToken = "<bos>";
constexpr std::string_view kUnkToken = "<unk>";
constexpr TokenId kFirstByteId = 2;

std::string byte_token(unsigned b) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "<0x%02X>", b);
  return buf;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

template <typename Fn>
void for_each_word(std::string_view text, Fn&& fn) {
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) fn(text.substr(start, i - start));
  }
}

}  // namespace

VocabMode parse_vocab_mode(std::string_view name) {
  if (name == "byte") return VocabMode::Byte;
  if (name == "word") return VocabMode::Word;
  throw Error(ErrorCode::InvalidArgument, "unknown vocab mode '" + std::string(name) + "'");
}

std::string_view to_string(VocabMode mode) { return mode == VocabMode::Byte ? "byte" : "word"; }

Vocabulary Vocabulary::bytes() {
  Vocabulary v;
  v.mode_ = VocabMode::Byte;
  v.id_to_token_.reserve(kByteVocabSize);
  v.id_to_token_.emplace_back(kBosToken);
  v.id_to_token_.emplace_back(kUnkToken);
  for (unsigned b = 0; b < 256; ++b) v.id_to_token_.push_back(byte_token(b));
  v.index();
  return v;
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  v.mode_ = VocabMode::Word;
  v.id_to_token_.reserve(words.size() + 2);
  v.id_to_token_.emplace_back(kBosToken);
  v.id_to_token_.emplace_back(kUnkToken);
  for (const auto& w : words) {
    if (w.empty() || std::any_of(w.begin(), w.end(), is_space))
      throw Error(ErrorCode::InvalidArgument, "word token must be non-empty and whitespace-free");
    v.id_to_token_.push_back(w);
  }
  v.index();
  if (v.token_to_id_.size() != v.id_to_token_.size())
    throw Error(ErrorCode::InvalidArgument, "duplicate tokens in vocabulary");
  return v;
}

void Vocabulary::index() {
  token_to_id_.clear();
  token_to_id_.reserve(id_to_token_.size());
  for (TokenId i = 0; i < id_to_token_.size(); ++i) token_to_id_.emplace(id_to_token_[i], i);
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnkId : it->second;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  for (const auto& t : id_to_token_) out << t << '\n';
  if (!out) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open vocabulary " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (lines.size() < 2 || lines[0] != kBosToken || lines[1] != kUnkToken)
    throw Error(ErrorCode::FormatError, path.string() + ": first two lines must be <bos> and <unk>");

  bool byte_mode = lines.size() == kByteVocabSize;
  for (unsigned b = 0; byte_mode && b < 256; ++b) byte_mode = lines[kFirstByteId + b] == byte_token(b);
  if (byte_mode) return bytes();
  return from_words({lines.begin() + 2, lines.end()});
}

Vocabulary build_vocab(std::istream& corpus, VocabMode mode, std::size_t max_size) {
  std::string text{std::istreambuf_iterator<char>(corpus), std::istreambuf_iterator<char>()};
  return build_vocab(std::string_view(text), mode, max_size);
}

Vocabulary build_vocab(std::string_view corpus, VocabMode mode, std::size_t max_size) {
  if (max_size < 3) throw Error(ErrorCode::InvalidArgument, "max_size must be at least 3");
  if (mode == VocabMode::Byte) {
    if (corpus.empty()) throw Error(ErrorCode::EmptyCorpus, "corpus is empty");
    return Vocabulary::bytes();
  }

  struct Stat {
    std::size_t count = 0;
    std::size_t first_seen = 0;
  };
  std::unordered_map<std::string_view, Stat> stats;
  std::size_t position = 0;
  for_each_word(corpus, [&](std::string_view w) {
    auto [it, inserted] = stats.try_emplace(w, Stat{0, position});
    ++it->second.count;
    ++position;
  });
  if (stats.empty()) throw Error(ErrorCode::EmptyCorpus, "corpus contains no words");

  std::vector<std::pair<std::string_view, Stat>> ranked(stats.begin(), stats.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first_seen < b.second.first_seen;
  });
  if (ranked.size() > max_size) ranked.resize(max_size);

  std::vector<std::string> words;
  words.reserve(ranked.size());
  for (const auto& [w, s] : ranked) {
    if (w == kBosToken || w == kUnkToken) continue;
    words.emplace_back(w);
  }
  return Vocabulary::from_words(words);
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence ids;
  if (vocab.mode() == VocabMode::Byte) {
    ids.reserve(text.size());
    for (char c : text) ids.push_back(kFirstByteId + static_cast<unsigned char>(c));
    return ids;
  }
  for_each_word(text, [&](std::string_view w) { ids.push_back(vocab.id(w)); });
  return ids;
}

std::string detokenize(const TokenSequence& ids, const Vocabulary& vocab) {
  std::string out;
  if (vocab.mode() == VocabMode::Byte) {
    out.reserve(ids.size());
    for (TokenId id : ids)
      if (id >= kFirstByteId && id < Vocabulary::kByteVocabSize) out.push_back(static_cast<char>(id - kFirstByteId));
    return out;
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

std::string display_token(TokenId id, const Vocabulary& vocab) {
  if (vocab.mode() == VocabMode::Word || id < kFirstByteId) return vocab.token(id);
  const unsigned b = id - kFirstByteId;
  if (b == '\n') return "\\n";
  if (b >= 0x20 && b < 0x7F) return std::string(1, static_cast<char>(b));
  char buf[8];
  std::snprintf(buf, sizeof buf, "\\x%02X", b);
  return buf;
}

std::vector<TokenSequence> chunk(const TokenSequence& tokens, std::size_t seq_len) {
  if (seq_len < 2) throw Error(ErrorCode::InvalidArgument, "seq_len must be at least 2");
  std::vector<TokenSequence> out;
  out.reserve(tokens.size() / seq_len);
  for (std::size_t start = 0; start + seq_len <= tokens.size(); start += seq_len)
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                     tokens.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
  return out;
}

SplitPart parse_split_part(std::string_view name) {
  if (name == "train") return SplitPart::Train;
  if (name == "train-fit" || name == "train_fit") return SplitPart::TrainFit;
  if (name == "test") return SplitPart::Test;
  throw Error(ErrorCode::InvalidArgument, "unknown split part '" + std::string(name) + "'");
}

const std::vector<TokenSequence>& part(const DatasetSplit& split, SplitPart which) {
  switch (which) {
    case SplitPart::Train: return split.train;
    case SplitPart::TrainFit: return split.train_fit;
    case SplitPart::Test: return split.test;
  }
  return split.train;
}

std::vector<std::size_t> split_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

DatasetSplit split_fit_test(std::vector<TokenSequence> sequences, std::size_t n_fit, std::size_t n_test,
                            std::uint64_t seed) {
  if (n_fit + n_test > sequences.size())
    throw Error(ErrorCode::NotEnoughData, "need " + std::to_string(n_fit + n_test) + " sequences, have " +
                                              std::to_string(sequences.size()));
  DatasetSplit split;
  split.seed = seed;
  split.seq_len = sequences.empty() ? 0 : sequences.front().size();
  for (const auto& s : sequences)
    if (s.size() != split.seq_len) throw Error(ErrorCode::ShapeError, "sequences must share one length");

  const auto order = split_permutation(sequences.size(), seed);
  split.train_fit.reserve(n_fit);
  split.test.reserve(n_test);
  split.train.reserve(sequences.size() - n_fit - n_test);
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& seq = sequences[order[i]];
    if (i < n_fit)
      split.train_fit.push_back(std::move(seq));
    else if (i < n_fit + n_test)
      split.test.push_back(std::move(seq));
    else
      split.train.push_back(std::move(seq));
  }
  return split;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace fuselm
