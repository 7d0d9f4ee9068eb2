#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "storyseq/autodiff.hpp"
#include "storyseq/corpus.hpp"
#include "storyseq/model.hpp"

namespace storyseq {

struct LstmView {
  const Tensor& w;
  const Tensor& b;
};

struct BiLstmStates {
  std::vector<Vec> forward;
  std::vector<Vec> backward;
};

// Forward pass left-to-right and backward pass right-to-left, both from a
// zero state. Output t pairs the two states at position t.
BiLstmStates bilstm_layer(std::span<const Vec> inputs, LstmView fwd, LstmView bwd);

struct SentenceEncoding {
  std::vector<Vec> words;  // h_t
  Vec mean;                // average of h_t
};

SentenceEncoding encode_sentence(const Sentence& sentence, const EmbeddingTable& emb,
                                 const ModelParams& params);

struct Attention {
  Vec context;
  Vec weights;
  Vec logits;
};

// Scores every sentence mean against one word state and returns the
// softmax-weighted context.
Attention cross_attention(std::span<const double> word_state, std::span<const Vec> sentence_means,
                          const ModelParams& params);

struct GatedContext {
  Vec fused;
  double gate = 0.0;
};

GatedContext context_gate(std::span<const double> word_state, std::span<const double> context,
                          const ModelParams& params);

struct EncodedSentence {
  std::vector<Vec> x;  // joint-space word vectors

  // Intermediates; empty in lean mode. Context, attention, gate and fused
  // stay empty for the no_context variant.
  Vec mean;
  std::vector<Vec> h;
  std::vector<Vec> context;
  std::vector<Vec> attention;
  std::vector<double> gate;
  std::vector<Vec> fused;
  std::vector<Vec> z;
};

struct EncodedStory {
  Variant variant = Variant::cadm;
  std::vector<EncodedSentence> sentences;
};

EncodedStory encode_story(const Story& story, const EmbeddingTable& emb, const ModelParams& params,
                          Variant variant, bool keep_intermediates = true);
EncodedStory encode_story(const EmbeddedStory& story, const ModelParams& params, Variant variant,
                          bool keep_intermediates = true);

struct EncodedImage {
  std::string image_id;
  std::vector<Vec> regions;
};

EncodedImage encode_image(const ImageRecord& record, const ModelParams& params);

// Tape-level building blocks shared by inference and training.
namespace graph {

using ParamVars = ParamPack<ad::Var>;

// trainable = false binds the tensors as constants.
ParamVars bind(ad::Graph& g, const ModelParams& params, bool trainable);

struct LstmVars {
  ad::Var w;
  ad::Var b;
};

// Returns (forward states, backward states).
std::pair<std::vector<ad::Var>, std::vector<ad::Var>> bilstm(ad::Graph& g,
                                                             std::span<const ad::Var> inputs,
                                                             LstmVars fwd, LstmVars bwd);

struct SentenceNodes {
  std::vector<ad::Var> h;
  ad::Var mean;
};

SentenceNodes sentence_layer(ad::Graph& g, const ParamVars& p, std::span<const ad::Var> words);

struct AttentionNodes {
  ad::Var context;
  ad::Var weights;
  ad::Var logits;
};

AttentionNodes cross_attention(ad::Graph& g, const ParamVars& p, ad::Var word_state,
                               std::span<const ad::Var> means);

struct GateNodes {
  ad::Var fused;
  ad::Var gate;
};

GateNodes context_gate(ad::Graph& g, const ParamVars& p, ad::Var word_state, ad::Var context);

struct StorySentenceNodes {
  std::vector<ad::Var> x;
  ad::Var mean;
  std::vector<ad::Var> h;
  std::vector<ad::Var> context;
  std::vector<ad::Var> attention;
  std::vector<ad::Var> gate;
  std::vector<ad::Var> fused;
  std::vector<ad::Var> z;
};

std::vector<StorySentenceNodes> story(ad::Graph& g, const ParamVars& p, const EmbeddedStory& words,
                                      Variant variant);

std::vector<ad::Var> image(ad::Graph& g, const ParamVars& p, const ImageRecord& record);

}  // namespace graph
}  // namespace storyseq
