#pragma once

// Adaptive medical-history tokenizer: resamples sparse event sequences onto
// the unified yearly grid, filling event-free years with the healthy token.

#include <string>
#include <vector>

#include "diffdt/cohort.hpp"

namespace diffdt {

constexpr int kHealthyToken = 0;
constexpr int kMaskToken = 1;

class Vocabulary {
 public:
  // Reserved entries first, then unique codes sorted lexicographically.
  static Vocabulary build(const Cohort& cohort);
  static Vocabulary from_codes(const std::vector<std::string>& codes);

  int size() const { return static_cast<int>(codes_.size()); }
  const std::string& code(int index) const;
  int index(const std::string& code) const;  // throws VocabError when unknown
  bool contains(const std::string& code) const;
  const std::vector<std::string>& codes() const { return codes_; }
  // FNV-1a over the ordered code list; ties checkpoints to the vocabulary.
  std::string content_hash() const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> codes_;
  std::vector<std::pair<std::string, int>> lookup_;  // sorted for binary search
  void rebuild_lookup();
};

struct TemporalGrid {
  int age_min = 0;
  int age_max = 0;
  int span() const { return age_max - age_min + 1; }
};

struct TokenStream {
  std::vector<int> tokens;
  std::vector<int> ages;  // same length; consecutive deltas in {0,1}
};

// Yearly resampling with healthy fill. Within a year, events are ordered by
// vocab index; streams longer than max_len drop the oldest years.
TokenStream tokenize(const EventSequence& seq, const TemporalGrid& grid,
                     const Vocabulary& vocab, int max_len = 128);

// Drops healthy tokens; MASK is diffusion-internal and rejected here.
EventSequence detokenize(const TokenStream& stream, const Vocabulary& vocab,
                         long subject_id = 0);

}  // namespace diffdt
