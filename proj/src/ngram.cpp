#include "fuselm/ngram.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fuselm/detail/binary_io.hpp"
#include "fuselm/error.hpp"

namespace fuselm {
namespace {

constexpr std::string_view kMagic = "NGM1";

}  // namespace

bool is_valid_distribution(std::span<const double> probs, double tol) {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) return false;
    sum += p;
  }
  return std::abs(sum - 1.0) <= tol;
}

std::vector<double> default_interp(std::size_t order) {
  std::vector<double> w(order);
  const double denom = static_cast<double>(order * (order + 1)) / 2.0;
  for (std::size_t k = 0; k < order; ++k) w[k] = static_cast<double>(k + 1) / denom;
  return w;
}

void NGramLM::validate(const NGramConfig& config) {
  if (config.order < 1) throw Error(ErrorCode::InvalidArgument, "n-gram order must be >= 1");
  if (!(config.alpha > 0.0)) throw Error(ErrorCode::InvalidArgument, "alpha must be > 0");
  if (config.interp.size() != config.order)
    throw Error(ErrorCode::InvalidArgument, "need one interpolation weight per order");
  double sum = 0.0;
  for (double w : config.interp) {
    if (!(w >= 0.0)) throw Error(ErrorCode::InvalidArgument, "interpolation weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorCode::InvalidArgument, "interpolation weights must sum to 1");
}

NGramLM NGramLM::train(const std::vector<TokenSequence>& corpus, std::size_t vocab_size, TokenId bos_id,
                       NGramConfig config) {
  if (config.interp.empty()) config.interp = default_interp(config.order);
  validate(config);
  if (vocab_size == 0) throw Error(ErrorCode::InvalidArgument, "vocab_size must be positive");

  std::size_t n_tokens = 0;
  for (const auto& seq : corpus) n_tokens += seq.size();
  if (n_tokens == 0) throw Error(ErrorCode::EmptyCorpus, "n-gram training corpus is empty");

  NGramLM lm;
  lm.config_ = std::move(config);
  lm.vocab_size_ = vocab_size;
  lm.bos_id_ = bos_id;
  const std::uint64_t max_symbol = std::max<std::uint64_t>(vocab_size - 1, bos_id);
  lm.key_bits_ = std::max(1, static_cast<int>(std::bit_width(max_symbol)));
  const std::size_t n = lm.config_.order;
  if (n * lm.key_bits_ > 64)
    throw Error(ErrorCode::InvalidArgument, "order " + std::to_string(n) + " too large for a vocabulary of " +
                                                std::to_string(vocab_size) + " symbols");
  for (const auto& seq : corpus)
    for (TokenId t : seq)
      if (t >= vocab_size) throw Error(ErrorCode::VocabMismatch, "token id out of vocabulary range");

  const unsigned bits = lm.key_bits_;
  const std::uint64_t token_mask = (bits == 64) ? ~0ULL : ((1ULL << bits) - 1);
  lm.tables_.resize(n);
  std::vector<std::uint64_t> joint;
  joint.reserve(n_tokens);
  for (std::size_t len = 0; len < n; ++len) {
    joint.clear();
    for (const auto& seq : corpus) {
      for (std::size_t t = 0; t < seq.size(); ++t) {
        std::uint64_t key = 0;
        for (std::size_t j = 0; j < len; ++j) {
          const std::uint64_t sym = (t > j) ? seq[t - 1 - j] : bos_id;
          key |= sym << (bits * j);
        }
        joint.push_back((key << bits) | seq[t]);
      }
    }
    std::sort(joint.begin(), joint.end());

    OrderTable& table = lm.tables_[len];
    for (std::size_t i = 0; i < joint.size();) {
      std::size_t j = i;
      while (j < joint.size() && joint[j] == joint[i]) ++j;
      const std::uint64_t ctx = joint[i] >> bits;
      const auto token = static_cast<TokenId>(joint[i] & token_mask);
      const auto count = static_cast<std::uint32_t>(j - i);
      auto [it, inserted] = table.contexts.try_emplace(ctx);
      if (inserted) it->second.begin = static_cast<std::uint32_t>(table.tokens.size());
      table.tokens.push_back(token);
      table.counts.push_back(count);
      it->second.end = static_cast<std::uint32_t>(table.tokens.size());
      it->second.total += count;
      i = j;
    }
  }
  return lm;
}

std::string NGramLM::describe() const {
  std::ostringstream ss;
  ss << "ngram(order=" << config_.order << ", alpha=" << config_.alpha << ", vocab=" << vocab_size_ << ")";
  return ss.str();
}

std::uint64_t NGramLM::context_key(ContextView context, std::size_t length) const {
  std::uint64_t key = 0;
  for (std::size_t j = 0; j < length; ++j) {
    const std::uint64_t sym = (j < context.size()) ? context[context.size() - 1 - j] : bos_id_;
    key |= sym << (key_bits_ * j);
  }
  return key;
}

const NGramLM::ContextEntry* NGramLM::find(std::size_t length, ContextView context) const {
  for (std::size_t j = 0; j < length && j < context.size(); ++j) {
    const TokenId sym = context[context.size() - 1 - j];
    if (sym >= vocab_size_ && sym != bos_id_) return nullptr;
  }
  const auto& contexts = tables_[length].contexts;
  auto it = contexts.find(context_key(context, length));
  return it == contexts.end() ? nullptr : &it->second;
}

void NGramLM::next_dist_into(ContextView context, std::span<double> out) const {
  if (out.size() != vocab_size_) throw Error(ErrorCode::ShapeError, "output span does not match vocab size");
  const double alpha = config_.alpha;
  const double smoothing_mass = alpha * static_cast<double>(vocab_size_);

  // Every order contributes w_k * alpha / (total_k + alpha*|V|) uniformly, plus its sparse counts.
  double base = 0.0;
  const ContextEntry* entries[64] = {};
  for (std::size_t len = 0; len < config_.order; ++len) {
    entries[len] = find(len, context);
    const double total = entries[len] ? static_cast<double>(entries[len]->total) : 0.0;
    base += config_.interp[len] * alpha / (total + smoothing_mass);
  }
  std::fill(out.begin(), out.end(), base);
  for (std::size_t len = 0; len < config_.order; ++len) {
    const ContextEntry* e = entries[len];
    if (!e || config_.interp[len] == 0.0) continue;
    const OrderTable& table = tables_[len];
    const double scale = config_.interp[len] / (static_cast<double>(e->total) + smoothing_mass);
    for (std::uint32_t i = e->begin; i < e->end; ++i) out[table.tokens[i]] += scale * table.counts[i];
  }
}

std::vector<Distribution> NGramLM::next_dists(std::span<const ContextView> contexts) const {
  std::vector<Distribution> out(contexts.size());
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    out[i].probs.resize(vocab_size_);
    next_dist_into(contexts[i], out[i].probs);
  }
  return out;
}

std::uint64_t NGramLM::count(ContextView context, TokenId token) const {
  if (context.size() >= config_.order) return 0;
  const ContextEntry* e = find(context.size(), context);
  if (!e) return 0;
  const OrderTable& table = tables_[context.size()];
  auto first = table.tokens.begin() + e->begin;
  auto last = table.tokens.begin() + e->end;
  auto it = std::lower_bound(first, last, token);
  return (it != last && *it == token) ? table.counts[static_cast<std::size_t>(it - table.tokens.begin())] : 0;
}

std::uint64_t NGramLM::context_total(ContextView context) const {
  if (context.size() >= config_.order) return 0;
  const ContextEntry* e = find(context.size(), context);
  return e ? e->total : 0;
}

NGramLM NGramLM::with_interp(std::vector<double> interp) const {
  NGramConfig cfg = config_;
  cfg.interp = std::move(interp);
  validate(cfg);
  NGramLM copy = *this;
  copy.config_ = std::move(cfg);
  return copy;
}

void NGramLM::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  detail::BinaryWriter w(out);
  w.magic(kMagic);
  w.u32(static_cast<std::uint32_t>(config_.order));
  w.u32(static_cast<std::uint32_t>(vocab_size_));
  w.u32(bos_id_);
  w.f64(config_.alpha);
  for (double x : config_.interp) w.f64(x);
  for (const OrderTable& table : tables_) {
    std::vector<std::uint64_t> keys;
    keys.reserve(table.contexts.size());
    for (const auto& [k, e] : table.contexts) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    w.u64(keys.size());
    for (std::uint64_t k : keys) {
      const ContextEntry& e = table.contexts.at(k);
      w.u64(k);
      w.u32(e.end - e.begin);
      for (std::uint32_t i = e.begin; i < e.end; ++i) {
        w.u32(table.tokens[i]);
        w.u32(table.counts[i]);
      }
    }
  }
  if (!w.ok()) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

NGramLM NGramLM::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open n-gram model " + path.string());
  detail::BinaryReader r(in, path.string());
  r.expect_magic(kMagic);
  NGramLM lm;
  lm.config_.order = r.u32();
  lm.vocab_size_ = r.u32();
  lm.bos_id_ = r.u32();
  lm.config_.alpha = r.f64();
  if (lm.config_.order < 1 || lm.config_.order > 64 || lm.vocab_size_ == 0)
    throw Error(ErrorCode::FormatError, path.string() + ": bad header");
  lm.config_.interp.resize(lm.config_.order);
  for (double& x : lm.config_.interp) x = r.f64();
  validate(lm.config_);
  const std::uint64_t max_symbol = std::max<std::uint64_t>(lm.vocab_size_ - 1, lm.bos_id_);
  lm.key_bits_ = std::max(1, static_cast<int>(std::bit_width(max_symbol)));
  lm.tables_.resize(lm.config_.order);
  for (OrderTable& table : lm.tables_) {
    const std::uint64_t n_contexts = r.u64();
    table.contexts.reserve(n_contexts);
    for (std::uint64_t c = 0; c < n_contexts; ++c) {
      const std::uint64_t key = r.u64();
      const std::uint32_t n = r.u32();
      ContextEntry e;
      e.begin = static_cast<std::uint32_t>(table.tokens.size());
      for (std::uint32_t i = 0; i < n; ++i) {
        const TokenId tok = r.u32();
        const std::uint32_t cnt = r.u32();
        if (tok >= lm.vocab_size_) throw Error(ErrorCode::FormatError, path.string() + ": token out of range");
        table.tokens.push_back(tok);
        table.counts.push_back(cnt);
        e.total += cnt;
      }
      e.end = static_cast<std::uint32_t>(table.tokens.size());
      table.contexts.emplace(key, e);
    }
  }
  return lm;
}

}  // namespace fuselm
