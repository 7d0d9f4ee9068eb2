#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "storyseq/corpus.hpp"
#include "storyseq/tensor.hpp"

namespace storyseq {

// Encoder variants: full hierarchical attention, a fixed average of the
// other sentences as context, and word encodings without story context.
enum class Variant { cadm, fixed_context, no_context };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);

struct ModelDims {
  std::size_t word_dim = 300;
  std::size_t hidden_dim = 512;
  std::size_t attn_dim = 512;
  std::size_t joint_dim = 1024;
  std::size_t region_dim = 2048;

  bool operator==(const ModelDims&) const = default;
};

// Every learnable tensor, in checkpoint order. LSTM weights stack the
// input, forget, candidate and output gates row-wise and act on [x; h].
#define STORYSEQ_PARAMS(X)          \
  X(sent_fwd_w, "sentence.fwd.w")   \
  X(sent_fwd_b, "sentence.fwd.b")   \
  X(sent_bwd_w, "sentence.bwd.w")   \
  X(sent_bwd_b, "sentence.bwd.b")   \
  X(sent_merge_w, "sentence.merge.w") \
  X(sent_merge_b, "sentence.merge.b") \
  X(attn_w, "attention.w")          \
  X(attn_b, "attention.b")          \
  X(attn_v, "attention.v")          \
  X(gate_w, "gate.w")               \
  X(gate_b, "gate.b")               \
  X(gate_v, "gate.v")               \
  X(story_fwd_w, "story.fwd.w")     \
  X(story_fwd_b, "story.fwd.b")     \
  X(story_bwd_w, "story.bwd.w")     \
  X(story_bwd_b, "story.bwd.b")     \
  X(story_merge_w, "story.merge.w") \
  X(story_merge_b, "story.merge.b") \
  X(proj_w, "projection.w")         \
  X(proj_b, "projection.b")         \
  X(region_w, "region.w")           \
  X(region_b, "region.b")

template <class T>
struct ParamPack {
#define STORYSEQ_FIELD(field, name) T field{};
  STORYSEQ_PARAMS(STORYSEQ_FIELD)
#undef STORYSEQ_FIELD

  template <class F>
  void visit(F&& fn) {
#define STORYSEQ_VISIT(field, name) fn(std::string_view(name), field);
    STORYSEQ_PARAMS(STORYSEQ_VISIT)
#undef STORYSEQ_VISIT
  }

  template <class F>
  void visit(F&& fn) const {
#define STORYSEQ_VISIT(field, name) fn(std::string_view(name), field);
    STORYSEQ_PARAMS(STORYSEQ_VISIT)
#undef STORYSEQ_VISIT
  }
};

template <class A, class B, class F>
void visit_pair(A& a, B& b, F&& fn) {
#define STORYSEQ_VISIT2(field, name) fn(std::string_view(name), a.field, b.field);
  STORYSEQ_PARAMS(STORYSEQ_VISIT2)
#undef STORYSEQ_VISIT2
}

using ParamTensors = ParamPack<Tensor>;

struct ModelParams {
  ModelDims dims;
  ParamTensors t;

  std::size_t parameter_count() const;
  bool operator==(const ModelParams& o) const;
};

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

ParamPack<Shape> param_shapes(const ModelDims& dims);
// Zero tensors with the shapes implied by dims.
ParamTensors zeros_like(const ModelDims& dims);

// Weights uniform in [-scale, scale]; LSTM forget-gate biases 1, other biases 0.
ModelParams init_params(const ModelDims& dims, std::uint64_t seed, double scale = 0.08);

// Throws naming the first tensor whose shape disagrees with dims.
void check_shapes(const ModelParams& params);

// Binary checkpoint: versioned header, dims, trained variant, named tensors
// (name, rows, cols, row-major float64), then the frozen embedding table.
struct Checkpoint {
  ModelParams params;
  Variant variant = Variant::cadm;
  EmbeddingTable embeddings;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace storyseq
