#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pix4cap/core/errors.hpp"

namespace pix4cap::text {

using TokenSequence = std::vector<int>;

// Lowercase, drop everything except letters, digits and whitespace, split on
// whitespace. Used for both training targets and metric scoring.
inline std::vector<std::string> tokenize(const std::string& sentence) {
  std::string cleaned;
  cleaned.reserve(sentence.size());
  for (unsigned char c : sentence) {
    if (std::isalnum(c)) {
      cleaned.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c)) {
      cleaned.push_back(' ');
    }
  }
  std::istringstream in(cleaned);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

inline std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0, kStart = 1, kEnd = 2, kUnk = 3;

  Vocabulary() : words_{"<pad>", "<start>", "<end>", "<unk>"} { reindex(); }

  // Specials first, then every distinct token in sorted order.
  static Vocabulary build(const std::vector<std::string>& sentences) {
    std::set<std::string> seen;
    for (const auto& s : sentences)
      for (auto& w : tokenize(s)) seen.insert(w);
    Vocabulary v;
    v.words_.insert(v.words_.end(), seen.begin(), seen.end());
    v.reindex();
    return v;
  }

  static Vocabulary from_words(std::vector<std::string> words) {
    if (words.size() < 4 || words[0] != "<pad>" || words[1] != "<start>" || words[2] != "<end>" ||
        words[3] != "<unk>")
      throw DataError("vocabulary must start with <pad> <start> <end> <unk>");
    Vocabulary v;
    v.words_ = std::move(words);
    v.reindex();
    if (v.index_.size() != v.words_.size()) throw DataError("vocabulary contains duplicate words");
    return v;
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  // [START, w_1 .. w_n, END]; words beyond max_len - 1 are dropped so the
  // decoder input (everything but the last token) is at most max_len long.
  TokenSequence encode(const std::string& sentence, int max_len) const {
    TokenSequence seq{kStart};
    for (const auto& w : tokenize(sentence)) {
      if (static_cast<int>(seq.size()) >= max_len) break;
      seq.push_back(id(w));
    }
    seq.push_back(kEnd);
    return seq;
  }

  // Words up to the first END; specials are skipped.
  std::vector<std::string> decode(const TokenSequence& seq) const {
    std::vector<std::string> out;
    for (int t : seq) {
      if (t == kEnd) break;
      if (t == kPad || t == kStart) continue;
      out.push_back(word(t));
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary " + path);
    for (const auto& w : words_) out << w << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary " + path);
    std::vector<std::string> words;
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) words.push_back(line);
    return from_words(std::move(words));
  }

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i));
  }

  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

}  // namespace pix4cap::text
