#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "storyseq/autodiff.hpp"
#include "storyseq/encoder.hpp"

namespace storyseq {

// Norms below this threshold make a cosine 0 instead of NaN.
inline constexpr double kNormEpsilon = 1e-12;

double cosine(std::span<const double> u, std::span<const double> v);

// Best region for one word. Region indices are 0-based.
struct Grounding {
  std::size_t region = 0;
  double similarity = 0.0;
  bool operator==(const Grounding&) const = default;
};

using GroundingMap = std::vector<Grounding>;

struct DenseMatch {
  double score = 0.0;
  GroundingMap grounding;
};

// Mean over words of the best word-region cosine; ties go to the lowest
// region index.
DenseMatch dense_similarity(std::span<const Vec> words, std::span<const Vec> regions);

// Same form restricted to the words of one phrase.
double phrase_similarity(std::span<const Vec> phrase_words, std::span<const Vec> regions);

struct ScoreMatrix {
  std::size_t rows = 0;  // sentences
  std::size_t cols = 0;  // images
  std::vector<double> scores;
  std::vector<GroundingMap> groundings;

  double at(std::size_t i, std::size_t j) const { return scores[i * cols + j]; }
  const GroundingMap& grounding(std::size_t i, std::size_t j) const { return groundings[i * cols + j]; }
};

// Every sentence of the story against every image. Norms are computed once
// per vector and reused across pairs.
ScoreMatrix score_batch(const EncodedStory& story, std::span<const EncodedImage> images,
                        std::size_t threads = 1);

namespace graph {

// Differentiable dense similarity. The gradient of each word's term flows
// only into its argmax region.
ad::Var dense_similarity(ad::Graph& g, std::span<const ad::Var> words,
                         std::span<const ad::Var> regions);

}  // namespace graph
}  // namespace storyseq
