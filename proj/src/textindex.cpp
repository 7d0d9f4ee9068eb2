#include "storyseq/textindex.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <unordered_map>

#include "json.hpp"

namespace storyseq {
namespace {

using nlohmann::json;

// Keep in sync with data/stopwords_en.txt.
const char* const kEnglishStopwords[] = {
    "a", "about", "after", "all", "an", "and", "are", "as", "at", "be", "been", "but", "by",
    "did", "do", "for", "from", "had", "has", "have", "he", "her", "his", "i", "in", "into",
    "is", "it", "its", "my", "no", "not", "of", "on", "or", "our", "over", "quite",
    "really", "she", "so", "that", "the", "their", "them", "then", "there", "these", "they",
    "this", "those", "to", "up", "very", "was", "we", "were", "with", "you", "your",
};

bool has_alnum(const std::string& t) {
  for (unsigned char c : t) {
    if (std::isalnum(c) || c >= 0x80) return true;
  }
  return false;
}

std::map<std::string, std::size_t> term_counts(const std::vector<std::string>& terms) {
  std::map<std::string, std::size_t> tf;
  for (const auto& t : terms) ++tf[t];
  return tf;
}

void sort_hits(std::vector<TextHit>& hits) {
  std::sort(hits.begin(), hits.end(), [](const TextHit& a, const TextHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.image_id < b.image_id;
  });
}

}  // namespace

Stopwords Stopwords::english() {
  return Stopwords(std::set<std::string>(std::begin(kEnglishStopwords), std::end(kEnglishStopwords)));
}

Stopwords Stopwords::load(const std::filesystem::path& path) {
  std::set<std::string> words;
  const std::string text = read_file(path);
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    std::size_t b = 0;
    while (b < line.size() && std::isspace(static_cast<unsigned char>(line[b]))) ++b;
    line = line.substr(b);
    if (line.empty() || line[0] == '#') continue;
    for (auto& t : tokenize(line)) words.insert(std::move(t));
  }
  return Stopwords(std::move(words));
}

std::vector<std::string> index_terms(const std::vector<std::string>& tokens,
                                     const Stopwords& stopwords) {
  std::vector<std::string> terms;
  for (const auto& t : tokens) {
    if (has_alnum(t) && !stopwords.contains(t)) terms.push_back(t);
  }
  return terms;
}

std::size_t TextIndex::doc_freq(const std::string& term) const {
  auto it = postings_.find(term);
  return it == postings_.end() ? 0 : it->second.size();
}

double TextIndex::idf(const std::string& term) const {
  const std::size_t df = doc_freq(term);
  if (df == 0) return 0.0;
  return std::log(static_cast<double>(doc_count_) / static_cast<double>(df));
}

double TextIndex::doc_norm(const std::string& image_id) const {
  auto it = doc_norm_.find(image_id);
  return it == doc_norm_.end() ? 0.0 : it->second;
}

const std::vector<Posting>& TextIndex::postings(const std::string& term) const {
  static const std::vector<Posting> kEmpty;
  auto it = postings_.find(term);
  return it == postings_.end() ? kEmpty : it->second;
}

TextIndex build_index(const std::vector<ImageRecord>& records, const Stopwords& stopwords) {
  TextIndex index;
  index.stopwords_ = stopwords;
  std::vector<std::pair<std::string, std::map<std::string, std::size_t>>> docs;
  for (const ImageRecord& r : records) {
    if (!r.caption) {
      ++index.skipped_;
      continue;
    }
    auto terms = index_terms(tokenize(*r.caption), stopwords);
    if (terms.empty()) {
      ++index.skipped_;
      continue;
    }
    docs.emplace_back(r.image_id, term_counts(terms));
  }
  if (docs.empty()) throw Error("build_index: no record has an indexable caption");
  index.doc_count_ = docs.size();
  std::sort(docs.begin(), docs.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [id, tf] : docs) {
    for (const auto& [term, n] : tf) index.postings_[term].push_back({id, n});
  }
  for (const auto& [id, tf] : docs) {
    double s = 0.0;
    for (const auto& [term, n] : tf) {
      const double w = static_cast<double>(n) * index.idf(term);
      s += w * w;
    }
    index.doc_norm_[id] = std::sqrt(s);
  }
  return index;
}

std::vector<TextHit> text_retrieve(const TextIndex& index, const Sentence& query, std::size_t k) {
  if (k == 0) throw Error("text_retrieve: k must be at least 1");
  const auto qtf = term_counts(index_terms(query.tokens, index.stopwords()));
  std::unordered_map<std::string, double> dots;
  double qnorm2 = 0.0;
  for (const auto& [term, n] : qtf) {
    const double idf = index.idf(term);
    const double qw = static_cast<double>(n) * idf;
    if (qw == 0.0) continue;
    qnorm2 += qw * qw;
    for (const Posting& p : index.postings(term)) {
      dots[p.image_id] += qw * static_cast<double>(p.tf) * idf;
    }
  }
  std::vector<TextHit> hits;
  if (qnorm2 == 0.0) return hits;
  const double qnorm = std::sqrt(qnorm2);
  for (const auto& [id, d] : dots) {
    const double dn = index.doc_norm(id);
    if (dn <= 0.0) continue;
    const double score = std::min(1.0, d / (qnorm * dn));
    if (score > 0.0) hits.push_back({id, score});
  }
  sort_hits(hits);
  if (hits.size() > k) hits.resize(k);
  return hits;
}

void save_index(const TextIndex& index, const std::filesystem::path& path) {
  std::string out = json{{"format", "storyseq-index"},
                         {"version", 1},
                         {"doc_count", index.doc_count_},
                         {"skipped", index.skipped_},
                         {"stopwords", index.stopwords_.words()}}
                        .dump() +
                    '\n';
  for (const auto& [id, n] : index.doc_norm_) {
    out += json{{"doc", id}, {"norm", n}}.dump();
    out += '\n';
  }
  for (const auto& [term, plist] : index.postings_) {
    json p = json::array();
    for (const auto& post : plist) p.push_back({post.image_id, post.tf});
    out += json{{"term", term}, {"postings", std::move(p)}}.dump();
    out += '\n';
  }
  write_file(path, out);
}

TextIndex load_index(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  TextIndex index;
  std::size_t start = 0;
  std::size_t line_no = 0;
  bool header = false;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (!header) {
        if (j.value("format", std::string()) != "storyseq-index") throw Error("not an index file");
        index.doc_count_ = j.at("doc_count").get<std::size_t>();
        index.skipped_ = j.at("skipped").get<std::size_t>();
        index.stopwords_ = Stopwords(j.at("stopwords").get<std::set<std::string>>());
        header = true;
      } else if (j.contains("doc")) {
        index.doc_norm_[j.at("doc").get<std::string>()] = j.at("norm").get<double>();
      } else {
        auto& plist = index.postings_[j.at("term").get<std::string>()];
        for (const auto& p : j.at("postings")) {
          plist.push_back({p.at(0).get<std::string>(), p.at(1).get<std::size_t>()});
        }
      }
    } catch (const json::exception& e) {
      throw Error(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!header) throw Error(path.string() + ": empty index file");
  return index;
}

}  // namespace storyseq
