#pragma once

// Vocabulary, tokenization and dataset preparation shared by every model.

#include <cstdint>
#include <filesystem>
#include <istream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fuselm {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

enum class VocabMode { Byte, Word };

VocabMode parse_vocab_mode(std::string_view name);
std::string_view to_string(VocabMode mode);

/// Dense id space. Ids 0 and 1 are always `<bos>` and `<unk>`.
class Vocabulary {
 public:
  static constexpr TokenId kBosId = 0;
  static constexpr TokenId kUnkId = 1;
  static constexpr std::size_t kByteVocabSize = 258;

  static Vocabulary bytes();
  static Vocabulary from_words(const std::vector<std::string>& words);

  VocabMode mode() const { return mode_; }
  std::size_t size() const { return id_to_token_.size(); }
  TokenId bos_id() const { return kBosId; }
  TokenId unk_id() const { return kUnkId; }

  const std::string& token(TokenId id) const { return id_to_token_.at(id); }
  /// Returns unk_id for tokens that are not listed.
  TokenId id(std::string_view token) const;

  /// One token per line; line number is the id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.mode_ == b.mode_ && a.id_to_token_ == b.id_to_token_;
  }

 private:
  Vocabulary() = default;
  void index();

  VocabMode mode_ = VocabMode::Byte;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

/// `max_size` bounds the number of word tokens (reserved ids excluded). Byte mode ignores it.
Vocabulary build_vocab(std::istream& corpus, VocabMode mode, std::size_t max_size);
Vocabulary build_vocab(std::string_view corpus, VocabMode mode, std::size_t max_size);

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(const TokenSequence& ids, const Vocabulary& vocab);

/// Printable rendering of a single token (bytes outside printable ASCII become `\xNN`).
std::string display_token(TokenId id, const Vocabulary& vocab);

/// Non-overlapping chunks of exactly `seq_len`; the remainder is dropped.
std::vector<TokenSequence> chunk(const TokenSequence& tokens, std::size_t seq_len);

struct DatasetSplit {
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> train_fit;
  std::vector<TokenSequence> test;
  std::size_t seq_len = 0;
  std::uint64_t seed = 0;
};

enum class SplitPart { Train, TrainFit, Test };
SplitPart parse_split_part(std::string_view name);
const std::vector<TokenSequence>& part(const DatasetSplit& split, SplitPart which);

/// Seeded shuffle, then the first `n_fit` go to train_fit, the next `n_test` to test, the rest to train.
DatasetSplit split_fit_test(std::vector<TokenSequence> sequences, std::size_t n_fit, std::size_t n_test,
                            std::uint64_t seed);

/// Shuffle permutation used by `split_fit_test`, exposed so callers can track sequence identity.
std::vector<std::size_t> split_permutation(std::size_t n, std::uint64_t seed);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace fuselm
