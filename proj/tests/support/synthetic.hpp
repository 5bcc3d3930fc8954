#pragma once
// Seeded synthetic corpora: a "reviews" domain and a multi-genre general corpus that share
// a common layer of everyday sentences.
#include <cstdint>
#include <string>

namespace fuselm::testing {

struct SyntheticMix {
  double domain_share_in_domain = 0.85;   // review sentences in the domain corpus
  double domain_share_in_general = 0.001; // review sentences leaking into the general corpus
  double shared_share_in_general = 0.30;  // everyday sentences in the general corpus
};

std::string synthetic_domain_corpus(std::size_t bytes, std::uint64_t seed, const SyntheticMix& mix = {});
std::string synthetic_general_corpus(std::size_t bytes, std::uint64_t seed, const SyntheticMix& mix = {});

}  // namespace fuselm::testing
