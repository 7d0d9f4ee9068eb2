#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "storyseq/corpus.hpp"

namespace storyseq {

class Stopwords {
 public:
  Stopwords() = default;
  explicit Stopwords(std::set<std::string> words) : words_(std::move(words)) {}

  // Shipped English function-word list.
  static Stopwords english();
  // One word per line; blank lines and lines starting with '#' ignored.
  static Stopwords load(const std::filesystem::path& path);

  bool contains(const std::string& token) const { return words_.count(token) != 0; }
  const std::set<std::string>& words() const { return words_; }

 private:
  std::set<std::string> words_;
};

// Index terms of a token list: stopwords and pure-punctuation tokens removed.
std::vector<std::string> index_terms(const std::vector<std::string>& tokens,
                                     const Stopwords& stopwords);

struct Posting {
  std::string image_id;
  std::size_t tf = 0;
  bool operator==(const Posting&) const = default;
};

struct TextHit {
  std::string image_id;
  double score = 0.0;
};

// TF-IDF inverted index over image captions, idf(t) = ln(doc_count / df(t)).
class TextIndex {
 public:
  std::size_t doc_count() const { return doc_count_; }
  std::size_t skipped() const { return skipped_; }
  std::size_t doc_freq(const std::string& term) const;
  double idf(const std::string& term) const;
  double doc_norm(const std::string& image_id) const;
  const std::vector<Posting>& postings(const std::string& term) const;
  const std::map<std::string, std::vector<Posting>>& all_postings() const { return postings_; }
  const Stopwords& stopwords() const { return stopwords_; }

  friend TextIndex build_index(const std::vector<ImageRecord>& records, const Stopwords& stopwords);
  friend TextIndex load_index(const std::filesystem::path& path);
  friend void save_index(const TextIndex& index, const std::filesystem::path& path);

 private:
  std::map<std::string, std::vector<Posting>> postings_;
  std::map<std::string, double> doc_norm_;
  std::size_t doc_count_ = 0;
  std::size_t skipped_ = 0;
  Stopwords stopwords_;
};

// Records whose caption is missing or has no index terms are skipped and
// counted. Throws when nothing is indexable.
TextIndex build_index(const std::vector<ImageRecord>& records,
                      const Stopwords& stopwords = Stopwords::english());

// Cosine between query and document TF-IDF vectors. Only documents with a
// positive score are returned; descending score, ties by ascending image_id.
std::vector<TextHit> text_retrieve(const TextIndex& index, const Sentence& query,
                                   std::size_t k = 100);

TextIndex load_index(const std::filesystem::path& path);
void save_index(const TextIndex& index, const std::filesystem::path& path);

}  // namespace storyseq
