#include "fuselm/dist_cache.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "fuselm/detail/binary_io.hpp"
#include "fuselm/error.hpp"

namespace fuselm {
namespace {

constexpr std::string_view kMagic = "PDC1";
constexpr double kRowTolerance = 1e-5;

double log_row_mass(std::span<const float> row) {
  double sum = 0.0;
  for (float x : row) sum += std::exp(static_cast<double>(x));
  return sum;
}

}  // namespace

void DistCache::reserve(std::size_t positions) {
  log_small_.reserve(positions * vocab_size_);
  log_large_.reserve(positions * vocab_size_);
  targets_.reserve(positions);
}

void DistCache::append(std::span<const double> p_small, std::span<const double> p_large, TokenId target) {
  if (p_small.size() != vocab_size_ || p_large.size() != vocab_size_)
    throw Error(ErrorCode::VocabMismatch, "distribution length does not match cache vocab size");
  if (target >= vocab_size_) throw Error(ErrorCode::VocabMismatch, "target id out of range");
  if (!is_valid_distribution(p_small, kRowTolerance) || !is_valid_distribution(p_large, kRowTolerance))
    throw Error(ErrorCode::InvalidArgument, "cache rows must be distributions");
  for (double p : p_small) log_small_.push_back(static_cast<float>(std::log(p)));
  for (double p : p_large) log_large_.push_back(static_cast<float>(std::log(p)));
  targets_.push_back(target);
}

void DistCache::append_log(std::span<const float> log_small, std::span<const float> log_large, TokenId target) {
  if (log_small.size() != vocab_size_ || log_large.size() != vocab_size_)
    throw Error(ErrorCode::VocabMismatch, "row length does not match cache vocab size");
  if (target >= vocab_size_) throw Error(ErrorCode::VocabMismatch, "target id out of range");
  log_small_.insert(log_small_.end(), log_small.begin(), log_small.end());
  log_large_.insert(log_large_.end(), log_large.begin(), log_large.end());
  targets_.push_back(target);
}

std::span<const float> DistCache::log_row(ModelSide side, std::size_t t) const {
  const auto& data = side == ModelSide::Small ? log_small_ : log_large_;
  return std::span<const float>(data).subspan(t * vocab_size_, vocab_size_);
}

void DistCache::probs(ModelSide side, std::size_t t, std::span<double> out) const {
  const auto row = log_row(side, t);
  for (std::size_t v = 0; v < vocab_size_; ++v) out[v] = std::exp(static_cast<double>(row[v]));
}

double DistCache::prob_of_target(ModelSide side, std::size_t t) const {
  return std::exp(static_cast<double>(log_row(side, t)[targets_[t]]));
}

void DistCache::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  detail::BinaryWriter w(out);
  w.magic(kMagic);
  w.u32(static_cast<std::uint32_t>(vocab_size_));
  w.u64(targets_.size());
  for (std::size_t t = 0; t < targets_.size(); ++t) {
    w.u32(targets_[t]);
    for (float x : log_row(ModelSide::Small, t)) w.f32(x);
    for (float x : log_row(ModelSide::Large, t)) w.f32(x);
  }
  w.string(provenance_);
  if (!w.ok()) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

DistCache DistCache::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open cache " + path.string());
  detail::BinaryReader r(in, path.string());
  r.expect_magic(kMagic);
  DistCache cache(r.u32());
  const std::uint64_t positions = r.u64();
  if (cache.vocab_size_ == 0) throw Error(ErrorCode::FormatError, path.string() + ": zero vocab size");
  // Guard against absurd headers before reserving.
  const auto file_size = std::filesystem::file_size(path);
  if (positions > file_size / (4 + 8 * cache.vocab_size_) + 1)
    throw Error(ErrorCode::FormatError, path.string() + ": position count exceeds file size");
  cache.reserve(positions);
  std::vector<float> small(cache.vocab_size_), large(cache.vocab_size_);
  for (std::uint64_t t = 0; t < positions; ++t) {
    const TokenId target = r.u32();
    for (float& x : small) x = r.f32();
    for (float& x : large) x = r.f32();
    if (target >= cache.vocab_size_) throw Error(ErrorCode::FormatError, path.string() + ": target out of range");
    if (std::abs(log_row_mass(small) - 1.0) > kRowTolerance || std::abs(log_row_mass(large) - 1.0) > kRowTolerance)
      throw Error(ErrorCode::FormatError, path.string() + ": row " + std::to_string(t) + " is not normalized");
    cache.append_log(small, large, target);
  }
  cache.provenance_ = r.string();
  return cache;
}

bool operator==(const DistCache& a, const DistCache& b) {
  auto same_bits = [](const std::vector<float>& x, const std::vector<float>& y) {
    return x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0;
  };
  return a.vocab_size_ == b.vocab_size_ && a.targets_ == b.targets_ && same_bits(a.log_small_, b.log_small_) &&
         same_bits(a.log_large_, b.log_large_) && a.provenance_ == b.provenance_;
}

DistCache slice(const DistCache& cache, std::size_t first, std::size_t count) {
  if (first + count > cache.positions()) throw Error(ErrorCode::ShapeError, "slice out of range");
  DistCache out(cache.vocab_size());
  out.reserve(count);
  for (std::size_t t = first; t < first + count; ++t)
    out.append_log(cache.log_row(ModelSide::Small, t), cache.log_row(ModelSide::Large, t), cache.target(t));
  out.set_provenance(cache.provenance());
  return out;
}

DistCache dump_cache(const LanguageModel& small, const LanguageModel& large,
                     const std::vector<TokenSequence>& sequences, const std::filesystem::path& path,
                     const DumpOptions& options) {
  if (small.vocab_size() != large.vocab_size())
    throw Error(ErrorCode::VocabMismatch, "small model has " + std::to_string(small.vocab_size()) +
                                              " tokens, large model has " + std::to_string(large.vocab_size()));
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  DistCache cache(small.vocab_size());
  std::size_t total = 0;
  for (const auto& seq : sequences) total += seq.empty() ? 0 : seq.size() - 1;
  cache.reserve(total);

  std::vector<ContextView> contexts;
  std::vector<TokenId> targets;
  auto flush = [&] {
    if (contexts.empty()) return;
    const auto ps = small.next_dists(contexts);
    const auto pl = large.next_dists(contexts);
    if (ps.size() != contexts.size() || pl.size() != contexts.size())
      throw Error(ErrorCode::ProtocolError, "model returned wrong number of distributions");
    for (std::size_t i = 0; i < contexts.size(); ++i) cache.append(ps[i].probs, pl[i].probs, targets[i]);
    contexts.clear();
    targets.clear();
  };
  for (const auto& seq : sequences) {
    for (std::size_t t = 1; t < seq.size(); ++t) {
      contexts.emplace_back(seq.data(), t);
      targets.push_back(seq[t]);
      if (contexts.size() == batch) flush();
    }
  }
  flush();

  cache.set_provenance(options.provenance.empty()
                           ? "small=" + small.describe() + "; large=" + large.describe() +
                                 "; sequences=" + std::to_string(sequences.size())
                           : options.provenance);
  if (!path.empty()) cache.save(path);
  return cache;
}

}  // namespace fuselm
