#include "storyseq/retrieval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"
#include "storyseq/encoder.hpp"

namespace storyseq {

FusionWeights parse_weights(std::string_view text) {
  const auto comma = text.find(',');
  if (comma == std::string_view::npos) throw Error("weights: expected 'visual,text'");
  auto parse = [&](std::string_view s) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw Error("weights: cannot parse '" + std::string(s) + "'");
    }
    return v;
  };
  FusionWeights w{parse(text.substr(0, comma)), parse(text.substr(comma + 1))};
  RetrievalOptions probe;
  probe.weights = w;
  probe.validate();
  return w;
}

void RetrievalOptions::validate() const {
  if (prune_k == 0) throw Error("retrieval: prune_k must be at least 1");
  if (!(weights.visual >= 0.0 && weights.text >= 0.0) ||
      std::abs(weights.visual + weights.text - 1.0) > 1e-9) {
    throw Error("retrieval: fusion weights must be non-negative and sum to 1");
  }
}

Vec normalize_scores(std::span<const double> scores) {
  if (scores.empty()) return {};
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double min = *lo, range = *hi - *lo;
  Vec out(scores.size(), 0.5);
  if (range > 0.0) {
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - min) / range;
  }
  return out;
}

RetrievalResult retrieve_story(const Story& story, const TextIndex* index, const ImageStore& store,
                               const ModelParams& params, const EmbeddingTable& emb,
                               const RetrievalOptions& options) {
  options.validate();
  const bool text_stage = options.use_index && index && index->doc_count() > 0;
  const EncodedStory encoded = encode_story(story, emb, params, options.variant, false);

  // Encode each image at most once per story.
  std::map<std::string, EncodedImage> cache;
  auto encoded_image = [&](const ImageRecord& r) -> const EncodedImage& {
    auto it = cache.find(r.image_id);
    if (it == cache.end()) it = cache.emplace(r.image_id, encode_image(r, params)).first;
    return it->second;
  };

  RetrievalResult result{story.id, {}};
  for (std::size_t i = 0; i < story.sentences.size(); ++i) {
    SentenceResult sr;
    sr.sentence_idx = i;
    std::vector<const ImageRecord*> candidates;
    std::map<std::string, double> text_scores;
    if (text_stage) {
      for (const TextHit& hit : text_retrieve(*index, story.sentences[i], options.prune_k)) {
        if (const ImageRecord* r = store.find(hit.image_id)) {
          candidates.push_back(r);
          text_scores[hit.image_id] = hit.score;
        }
      }
    } else {
      for (const ImageRecord& r : store.records()) candidates.push_back(&r);
    }
    if (candidates.empty()) {
      sr.no_candidates = true;
      result.sentences.push_back(std::move(sr));
      continue;
    }

    std::vector<EncodedImage> images;
    images.reserve(candidates.size());
    for (const ImageRecord* r : candidates) images.push_back(encoded_image(*r));
    const EncodedStory one{encoded.variant, {encoded.sentences[i]}};
    const ScoreMatrix m = score_batch(one, images, options.threads);

    Vec visual(candidates.size()), text(candidates.size());
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      visual[j] = m.at(0, j);
      auto it = text_scores.find(candidates[j]->image_id);
      text[j] = it == text_scores.end() ? 0.0 : it->second;
    }
    const Vec nv = normalize_scores(visual);
    const Vec nt = normalize_scores(text);
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      sr.ranked.push_back({candidates[j]->image_id,
                           options.weights.visual * nv[j] + options.weights.text * nt[j], visual[j],
                           text[j], m.grounding(0, j)});
    }
    std::sort(sr.ranked.begin(), sr.ranked.end(), [](const auto& a, const auto& b) {
      if (a.fused != b.fused) return a.fused > b.fused;
      return a.image_id < b.image_id;
    });
    result.sentences.push_back(std::move(sr));
  }
  return result;
}

void truncate(RetrievalResult& result, std::size_t topk) {
  for (auto& s : result.sentences) {
    if (s.ranked.size() > topk) s.ranked.resize(topk);
  }
}

std::string serialize_results(const std::vector<RetrievalResult>& results) {
  std::string out;
  for (const auto& r : results) {
    for (const auto& s : r.sentences) {
      nlohmann::ordered_json j;
      j["story_id"] = r.story_id;
      j["sentence_idx"] = s.sentence_idx;
      j["no_candidates"] = s.no_candidates;
      auto ranked = nlohmann::ordered_json::array();
      for (const auto& c : s.ranked) {
        nlohmann::ordered_json cj;
        cj["image_id"] = c.image_id;
        cj["fused"] = c.fused;
        cj["visual"] = c.visual;
        cj["text"] = c.text;
        auto g = nlohmann::ordered_json::array();
        for (const auto& w : c.grounding) g.push_back({w.region, w.similarity});
        cj["grounding"] = std::move(g);
        ranked.push_back(std::move(cj));
      }
      j["ranked"] = std::move(ranked);
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

std::vector<RetrievalResult> parse_results(std::string_view text) {
  std::vector<RetrievalResult> out;
  std::map<std::string, std::size_t> slot;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SentenceResult s;
      s.sentence_idx = j.at("sentence_idx").get<std::size_t>();
      s.no_candidates = j.value("no_candidates", false);
      for (const auto& cj : j.at("ranked")) {
        ScoredCandidate c;
        c.image_id = cj.at("image_id").get<std::string>();
        c.fused = cj.at("fused").get<double>();
        c.visual = cj.value("visual", 0.0);
        c.text = cj.value("text", 0.0);
        if (cj.contains("grounding")) {
          for (const auto& g : cj.at("grounding")) {
            c.grounding.push_back({g.at(0).get<std::size_t>(), g.at(1).get<double>()});
          }
        }
        s.ranked.push_back(std::move(c));
      }
      const auto id = j.at("story_id").get<std::string>();
      auto [it, inserted] = slot.emplace(id, out.size());
      if (inserted) out.push_back({id, {}});
      out[it->second].sentences.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw Error("results line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  for (auto& r : out) {
    std::stable_sort(r.sentences.begin(), r.sentences.end(),
                     [](const auto& a, const auto& b) { return a.sentence_idx < b.sentence_idx; });
  }
  return out;
}

void save_results(const std::vector<RetrievalResult>& results, const std::filesystem::path& path) {
  write_file(path, serialize_results(results));
}

std::vector<RetrievalResult> load_results(const std::filesystem::path& path) {
  return parse_results(read_file(path));
}

}  // namespace storyseq
