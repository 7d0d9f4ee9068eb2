#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "storyseq/corpus.hpp"
#include "storyseq/matcher.hpp"
#include "storyseq/model.hpp"
#include "storyseq/textindex.hpp"

namespace storyseq {

struct FusionWeights {
  double visual = 0.9;
  double text = 0.1;
};

// "0.9,0.1" -> weights; both non-negative and summing to 1.
FusionWeights parse_weights(std::string_view text);

struct RetrievalOptions {
  std::size_t prune_k = 100;
  FusionWeights weights;
  Variant variant = Variant::cadm;
  // false: skip the text stage and rank the whole store.
  bool use_index = true;
  std::size_t threads = 1;

  void validate() const;
};

struct ScoredCandidate {
  std::string image_id;
  double fused = 0.0;
  double visual = 0.0;
  double text = 0.0;  // 0 when the text stage did not return the image
  GroundingMap grounding;
};

struct SentenceResult {
  std::size_t sentence_idx = 0;
  std::vector<ScoredCandidate> ranked;  // descending fused, ties by image_id
  bool no_candidates = false;
};

struct RetrievalResult {
  std::string story_id;
  std::vector<SentenceResult> sentences;
};

// Min-max to [0, 1]; a constant list maps to 0.5 everywhere.
Vec normalize_scores(std::span<const double> scores);

// Text-stage pruning, dense re-ranking with the story-contextual encoding,
// then fusion of per-query normalized scores. index may be null.
RetrievalResult retrieve_story(const Story& story, const TextIndex* index, const ImageStore& store,
                               const ModelParams& params, const EmbeddingTable& emb,
                               const RetrievalOptions& options);

// Keeps the first topk candidates of every sentence.
void truncate(RetrievalResult& result, std::size_t topk);

// One JSON object per sentence, grouped back into stories on load in
// order of first appearance.
std::string serialize_results(const std::vector<RetrievalResult>& results);
std::vector<RetrievalResult> parse_results(std::string_view text);
void save_results(const std::vector<RetrievalResult>& results, const std::filesystem::path& path);
std::vector<RetrievalResult> load_results(const std::filesystem::path& path);

}  // namespace storyseq
