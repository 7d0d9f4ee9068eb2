#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "storyseq/corpus.hpp"
#include "storyseq/matcher.hpp"
#include "storyseq/retrieval.hpp"
#include "storyseq/textindex.hpp"

namespace storyseq {

enum class ChunkSource { provided, heuristic };

struct PhraseChunk {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  ChunkSource source = ChunkSource::heuristic;
  bool operator==(const PhraseChunk&) const = default;
};

// Provided spans pass through after validation. Otherwise the sentence is
// split at punctuation and at "and", "then", "but"; chunks made only of
// stopwords are dropped, and if nothing is left the whole sentence is one
// chunk.
std::vector<PhraseChunk> chunk_sentence(const Sentence& sentence,
                                        const std::optional<std::vector<ChunkSpan>>& provided = {},
                                        const Stopwords& stopwords = Stopwords::english());

struct DecodeStep {
  std::size_t chunk = 0;
  std::vector<std::string> top_k;
  std::string argmax;
  bool selected = false;
};

struct DecodeResult {
  std::vector<std::string> images;         // selection order = chunk order
  std::vector<std::size_t> trigger_chunk;  // aligned with images
  std::vector<DecodeStep> trace;
  bool no_candidates = false;
};

// Greedy complementary selection: a chunk contributes its best candidate
// only when its top-K set is disjoint from every top-K set accepted so far.
// phrase_scores[t][j] scores chunk t against candidates[j].
DecodeResult one_to_many_decode(std::span<const std::string> candidates,
                                const std::vector<Vec>& phrase_scores, std::size_t k);

struct Segmentation {
  std::vector<BBox> kept_regions;
  std::vector<std::string> kept_masks;
};

// |box ∩ mask| / |box| in pixels; a pixel belongs to the box when its
// centre does. 0 for boxes covering no pixel.
double box_mask_overlap(const BBox& box, const InstanceMask& mask);

// Each distinct grounded region keeps its best-overlapping mask when the
// overlap reaches tau, otherwise its box (clipped to the image). Only masks
// of this image are considered.
Segmentation segment_relevant_regions(const GroundingMap& grounding, const ImageRecord& image,
                                      std::span<const InstanceMask> masks, double tau);

enum class StyleStatus { raw, stylized };

struct Panel {
  std::string image_id;
  std::vector<std::size_t> chunks;  // indices into SentencePlan::chunks
  std::vector<BBox> kept_regions;
  std::vector<std::string> kept_masks;
  StyleStatus style = StyleStatus::raw;
};

struct SentencePlan {
  std::size_t sentence_idx = 0;
  std::vector<PhraseChunk> chunks;
  std::vector<Panel> panels;
  std::vector<std::string> diagnostics;
};

struct StoryboardOptions {
  std::size_t k = 3;
  double tau = 0.3;
  bool multi_image = true;
  // Invoked as `CMD <image_dir/image_id> <image_dir/image_id.stylized>`;
  // exit status 0 marks the panel stylized.
  std::optional<std::string> style_cmd;
  std::filesystem::path image_dir = ".";
  std::size_t style_workers = 2;

  void validate() const;
};

struct StoryboardPlan {
  std::string story_id;
  std::vector<SentencePlan> sentences;
};

// Candidates are the sentence's ranked list in `retrieval`; phrase scores
// come from each candidate's per-word grounding.
StoryboardPlan compose_storyboard(const Story& story, const RetrievalResult& retrieval,
                                  const ImageStore& store, std::span<const InstanceMask> masks,
                                  const StoryboardOptions& options);

// Runs the style command for every panel of every plan, at most
// options.style_workers at a time. Failures leave panels raw.
void apply_style(std::vector<StoryboardPlan>& plans, const StoryboardOptions& options);

// Line records: a leading {"kind":"meta"} line with k, tau and multi_image,
// then one {"kind":"panel"} line per panel and one {"kind":"empty"} line per
// sentence without panels.
std::string serialize_plans(const std::vector<StoryboardPlan>& plans,
                            const StoryboardOptions& options);
std::vector<StoryboardPlan> parse_plans(std::string_view text);
void save_plans(const std::vector<StoryboardPlan>& plans, const StoryboardOptions& options,
                const std::filesystem::path& path);
std::vector<StoryboardPlan> load_plans(const std::filesystem::path& path);

}  // namespace storyseq
