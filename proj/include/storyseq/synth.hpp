#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "storyseq/corpus.hpp"
#include "storyseq/eval.hpp"

namespace storyseq {

// Desk-scale corpus with known ground truth. Concept c owns direction e_c of
// the shared space; word w belongs to concept w % concepts. Word and region
// vectors are their concept direction plus Gaussian noise.
struct SyntheticSpec {
  std::size_t vocab = 32;
  std::size_t concepts = 8;
  std::size_t concepts_per_sentence = 3;
  std::size_t filler_words = 1;
  std::size_t sentences_per_story = 3;
  std::size_t regions_per_image = 3;  // >= concepts_per_sentence; extras are background
  double sigma = 0.05;
  std::size_t dim = 16;
  std::size_t train_stories = 200;
  std::size_t val_stories = 50;
  std::size_t test_stories = 20;
  // Extra test stories whose first sentence names two disjoint concept sets
  // joined by "and"; each set gets its own image.
  std::size_t compound_stories = 2;
  // Last sentence of each story carries fillers only; its image shows the
  // concepts of the first sentence.
  bool context_dependent = false;
  int image_width = 64;
  int image_height = 48;
  std::uint64_t seed = 0;

  void validate() const;
};

SyntheticSpec parse_synthetic_spec(std::string_view json_text);
SyntheticSpec load_synthetic_spec(const std::filesystem::path& path);

struct SyntheticSplit {
  std::vector<Story> stories;
  TruthTable truth;
};

struct SyntheticCorpus {
  EmbeddingTable embeddings;
  ImageStore store;
  std::vector<InstanceMask> masks;
  SyntheticSplit train, val, test;
};

// Relevant sets are all images (any split) showing the same concept set;
// the paired image comes first.
SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

// embeddings.txt, features.jsonl, masks.jsonl, {train,val,test}_stories.txt
// and {train,val,test}_truth.txt.
void write_synthetic(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

}  // namespace storyseq
