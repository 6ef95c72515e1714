#include "diffdt/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace diffdt {

namespace {
const std::string kHealthyCode = "healthy";
const std::string kMaskCode = "MASK";
}  // namespace

Vocabulary Vocabulary::build(const Cohort& cohort) {
  if (cohort.subjects.empty()) throw DataError("build_vocabulary: empty cohort");
  std::set<std::string> unique;
  for (const auto& subject : cohort.subjects)
    for (const auto& event : subject.seq.events) unique.insert(event.code);
  std::vector<std::string> codes(unique.begin(), unique.end());
  return from_codes(codes);
}

Vocabulary Vocabulary::from_codes(const std::vector<std::string>& codes) {
  Vocabulary v;
  v.codes_.push_back(kHealthyCode);
  v.codes_.push_back(kMaskCode);
  std::vector<std::string> sorted = codes;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (const auto& c : sorted) {
    if (c == kHealthyCode || c == kMaskCode)
      throw VocabError("reserved code name used as disease code: " + c);
    v.codes_.push_back(c);
  }
  v.rebuild_lookup();
  return v;
}

void Vocabulary::rebuild_lookup() {
  lookup_.clear();
  for (std::size_t i = 0; i < codes_.size(); ++i)
    lookup_.emplace_back(codes_[i], static_cast<int>(i));
  std::sort(lookup_.begin(), lookup_.end());
}

const std::string& Vocabulary::code(int index) const {
  if (index < 0 || index >= size())
    throw VocabError("vocab index out of range: " + std::to_string(index));
  return codes_[index];
}

int Vocabulary::index(const std::string& code) const {
  auto it = std::lower_bound(lookup_.begin(), lookup_.end(),
                             std::make_pair(code, 0));
  if (it == lookup_.end() || it->first != code)
    throw VocabError("unknown code: " + code);
  return it->second;
}

bool Vocabulary::contains(const std::string& code) const {
  auto it = std::lower_bound(lookup_.begin(), lookup_.end(),
                             std::make_pair(code, 0));
  return it != lookup_.end() && it->first == code;
}

std::string Vocabulary::content_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& c : codes_) {
    for (char ch : c) {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ULL;
    }
    h ^= 0xFF;
    h *= 1099511628211ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write vocabulary: " + path);
  for (const auto& c : codes_) os << c << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read vocabulary: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  if (lines.size() < 2 || lines[0] != kHealthyCode || lines[1] != kMaskCode)
    throw DataError("vocabulary file missing reserved tokens: " + path);
  Vocabulary v;
  v.codes_ = lines;
  v.rebuild_lookup();
  return v;
}

TokenStream tokenize(const EventSequence& seq, const TemporalGrid& grid,
                     const Vocabulary& vocab, int max_len) {
  if (grid.age_min > grid.age_max) throw RangeError("tokenize: empty grid");
  // Bucket events by floored year, tokens sorted by vocab index within a year.
  std::vector<std::vector<int>> years(grid.span());
  for (const auto& event : seq.events) {
    const int age = static_cast<int>(std::floor(event.age));
    if (age < grid.age_min || age > grid.age_max)
      throw RangeError("tokenize: event age " + std::to_string(event.age) +
                       " outside grid [" + std::to_string(grid.age_min) + "," +
                       std::to_string(grid.age_max) + "]");
    years[age - grid.age_min].push_back(vocab.index(event.code));
  }
  TokenStream out;
  for (int y = 0; y < grid.span(); ++y) {
    auto& bucket = years[y];
    if (bucket.empty()) {
      out.tokens.push_back(kHealthyToken);
      out.ages.push_back(grid.age_min + y);
    } else {
      std::sort(bucket.begin(), bucket.end());
      for (int token : bucket) {
        out.tokens.push_back(token);
        out.ages.push_back(grid.age_min + y);
      }
    }
  }
  // Over-length streams keep the most recent window, dropping whole years.
  while (static_cast<int>(out.tokens.size()) > max_len) {
    const int first_year = out.ages.front();
    std::size_t drop = 0;
    while (drop < out.ages.size() && out.ages[drop] == first_year) ++drop;
    out.tokens.erase(out.tokens.begin(), out.tokens.begin() + drop);
    out.ages.erase(out.ages.begin(), out.ages.begin() + drop);
  }
  return out;
}

EventSequence detokenize(const TokenStream& stream, const Vocabulary& vocab,
                         long subject_id) {
  if (stream.tokens.size() != stream.ages.size())
    throw DataError("detokenize: token/age length mismatch");
  EventSequence seq;
  seq.subject_id = subject_id;
  for (std::size_t i = 0; i < stream.tokens.size(); ++i) {
    const int token = stream.tokens[i];
    if (token == kMaskToken)
      throw VocabError("detokenize: MASK token is diffusion-internal");
    if (token == kHealthyToken) continue;
    seq.events.push_back({vocab.code(token), static_cast<double>(stream.ages[i])});
  }
  return seq;
}

}  // namespace diffdt
