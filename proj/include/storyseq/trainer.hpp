#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "storyseq/autodiff.hpp"
#include "storyseq/corpus.hpp"
#include "storyseq/eval.hpp"
#include "storyseq/model.hpp"

namespace storyseq {

enum class NegativeMode { hard, mean };

std::string_view to_string(NegativeMode m);
NegativeMode parse_negative_mode(std::string_view name);

// Sentence-image pairs in isolation vs. stories paired with image sequences.
enum class DataSource { dii, sis };

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;  // examples (stories or isolated pairs) per batch
  std::size_t epochs = 20;
  double margin = 0.2;
  // Unset: hardest negative for DII batches, mean over negatives for SIS.
  std::optional<NegativeMode> negative_mode;
  std::uint64_t seed = 0;
  Variant variant = Variant::cadm;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Linear learning-rate ramp over the first updates; 0 disables it.
  std::size_t warmup_steps = 0;

  // 256 examples per batch for 100 epochs.
  static TrainConfig full_scale();
  void validate() const;
  NegativeMode mode_for(DataSource source) const;
};

// Training-run file: a JSON object with TrainConfig keys plus the model
// widths hidden_dim, attn_dim and joint_dim.
struct TrainSettings {
  TrainConfig config;
  std::size_t hidden_dim = 512;
  std::size_t attn_dim = 512;
  std::size_t joint_dim = 1024;
};
TrainSettings parse_train_settings(std::string_view json_text);
TrainSettings load_train_settings(const std::filesystem::path& path);

double pair_loss(double positive, double negative_s2i, double negative_i2s, double margin);

// scores[i][j]: sentence i against image j, matched pairs on the diagonal.
// usable[i][j] (optional, i != j) says whether image j may act as a negative
// for sentence i; row negatives of pair i are usable[i][*], column negatives
// usable[*][i]. A direction without usable negatives contributes 0.
using NegativeMask = std::vector<std::vector<bool>>;
double batch_loss(const std::vector<Vec>& scores, double margin, NegativeMode mode,
                  const NegativeMask* usable = nullptr);

namespace graph {
ad::Var batch_loss(ad::Graph& g, const std::vector<std::vector<ad::Var>>& scores, double margin,
                   NegativeMode mode, const NegativeMask* usable = nullptr);
}

struct TrainingExample {
  std::string story_id;
  EmbeddedStory words;
  std::vector<const ImageRecord*> images;  // images[i] pairs with sentence i
  // Per sentence, further ids that are also correct; never used as negatives.
  std::vector<std::set<std::string>> relevant;
  DataSource source = DataSource::sis;
};

struct ValidationExample {
  std::string story_id;
  EmbeddedStory words;
  std::vector<std::set<std::string>> relevant;  // per sentence
};

struct Dataset {
  std::vector<TrainingExample> train;
  std::vector<ValidationExample> validation;
  std::vector<const ImageRecord*> validation_pool;
};

// Pairs stories with images through the truth table's first id (the whole
// entry becomes the sentence's relevant set) and builds
// the validation pool from every relevant id of the validation split. The
// store must outlive the dataset.
Dataset make_dataset(const std::vector<Story>& train, const TruthTable& train_truth,
                     const std::vector<Story>& validation, const TruthTable& validation_truth,
                     const ImageStore& store, const EmbeddingTable& emb,
                     DataSource source = DataSource::sis);

using Batch = std::vector<const TrainingExample*>;

struct LossAndGradients {
  double loss = 0.0;
  ParamTensors grads;
};

// Loss of one batch. Every sentence of every example is a unit; the score
// matrix spans all units against all paired images of the batch.
double batch_objective(const Batch& batch, const ModelParams& params, const TrainConfig& config,
                       NegativeMode mode, std::vector<std::int64_t>* decisions = nullptr);

// Reverse-mode gradients of batch_objective for every trainable tensor.
// Word embeddings are inputs, not parameters, and receive nothing.
LossAndGradients gradients(const Batch& batch, const ModelParams& params, const TrainConfig& config,
                           NegativeMode mode);

class Adam {
 public:
  Adam(const ModelParams& params, const TrainConfig& config);
  void step(ModelParams& params, const ParamTensors& grads);

 private:
  ParamTensors m_;
  ParamTensors v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t warmup_;
  std::size_t t_ = 0;
};

struct FitResult {
  ModelParams params;                // best validation epoch
  double initial_loss = 0.0;         // mean batch loss before any update
  std::vector<double> loss_curve;    // mean batch loss per epoch
  std::vector<double> validation_r1; // per epoch; empty without validation data
  std::size_t best_epoch = 0;        // 1-based
};

FitResult fit(const Dataset& data, ModelParams params, const TrainConfig& config,
              std::ostream* log = nullptr);

// Fraction of validation sentences whose top-ranked pool image is relevant.
double validation_recall_at_1(const Dataset& data, const ModelParams& params, Variant variant);
// All validation queries ranked against the pool, for full reports.
std::vector<RankedQuery> validation_queries(const Dataset& data, const ModelParams& params,
                                            Variant variant);

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation crossed a kink
  std::size_t within = 0;   // checked coordinates under tolerance
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double tolerance = 1e-3;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::size_t within = 0;
  bool pass = false;  // max_rel_error < tolerance

  double fraction_within() const {
    return checked ? static_cast<double>(within) / static_cast<double>(checked) : 1.0;
  }
};

std::string format_report(const GradCheckReport& report);

// Random tiny batch for gradient checks: `stories` examples with
// `sentences` sentences each, 1..3 words per sentence, 1..3 regions per image.
struct ProbeBatch {
  std::shared_ptr<std::vector<ImageRecord>> images;
  std::vector<TrainingExample> examples;

  Batch batch() const;
};
ProbeBatch make_probe_batch(const ModelDims& dims, std::size_t stories, std::size_t sentences,
                            std::uint64_t seed);

// Central differences against the supplied analytic gradients. Relative
// error is |a - n| / max(1e-8, |a| + |n|).
GradCheckReport check_gradients(const ModelParams& params, const Batch& batch,
                                const TrainConfig& config, NegativeMode mode,
                                const ParamTensors& analytic, double step = 1e-4);
GradCheckReport grad_check(const ModelParams& params, const Batch& batch, const TrainConfig& config,
                           NegativeMode mode, double step = 1e-4);

}  // namespace storyseq
