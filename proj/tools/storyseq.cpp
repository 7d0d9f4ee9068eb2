#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "storyseq/eval.hpp"
#include "storyseq/model.hpp"
#include "storyseq/retrieval.hpp"
#include "storyseq/storyboard.hpp"
#include "storyseq/synth.hpp"
#include "storyseq/textindex.hpp"
#include "storyseq/trainer.hpp"

namespace fs = std::filesystem;
using namespace storyseq;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t threads = 1;
  bool verbose = false;
};

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(part, &used);
      if (used != part.size() || v <= 0) throw std::invalid_argument(part);
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw Error("--ks: cannot parse '" + part + "'");
    }
  }
  if (ks.empty()) throw Error("--ks: empty list");
  return ks;
}

void warn_all(const Globals& g, const std::vector<std::string>& msgs, const std::string& what) {
  if (msgs.empty()) return;
  std::cerr << "warning: " << msgs.size() << " " << what << '\n';
  if (g.verbose) {
    for (const auto& m : msgs) std::cerr << "  " << m << '\n';
  }
}

int cmd_synth(const Globals& g, const std::string& spec_path, const fs::path& out,
              bool context_dependent) {
  SyntheticSpec spec = spec_path.empty() ? SyntheticSpec{} : load_synthetic_spec(spec_path);
  if (g.seed_given) spec.seed = g.seed;
  if (context_dependent) spec.context_dependent = true;
  spec.validate();
  const SyntheticCorpus corpus = generate_synthetic(spec);
  write_synthetic(corpus, out);
  if (g.verbose) {
    std::cerr << "wrote " << corpus.store.size() << " images, " << corpus.train.stories.size()
              << "/" << corpus.val.stories.size() << "/" << corpus.test.stories.size()
              << " stories to " << out.string() << '\n';
  }
  return 0;
}

int cmd_build_index(const Globals& g, const fs::path& features, const fs::path& out,
                    const std::string& stopwords_path) {
  const ImageStore store = load_image_features(features);
  warn_all(g, store.rejected, "feature records rejected");
  const Stopwords stop = stopwords_path.empty() ? Stopwords::english() : Stopwords::load(stopwords_path);
  const TextIndex index = build_index(store.records(), stop);
  save_index(index, out);
  if (g.verbose) {
    std::cerr << "indexed " << index.doc_count() << " captions, skipped " << index.skipped() << '\n';
  }
  return 0;
}

int cmd_train(const Globals& g, const fs::path& data, const std::string& config_path,
              const fs::path& out, const std::string& variant) {
  TrainSettings settings = config_path.empty() ? TrainSettings{} : load_train_settings(config_path);
  TrainConfig& cfg = settings.config;
  if (g.seed_given) cfg.seed = g.seed;
  if (!variant.empty()) cfg.variant = parse_variant(variant);
  cfg.validate();

  EmbeddingTable emb = load_embeddings(data / "embeddings.txt");
  warn_all(g, emb.warnings(), "embedding warnings");
  const ImageStore store = load_image_features(data / "features.jsonl");
  warn_all(g, store.rejected, "feature records rejected");
  const auto train = load_stories(data / "train_stories.txt");
  const auto train_truth = load_truth(data / "train_truth.txt");
  std::vector<Story> val;
  TruthTable val_truth;
  if (fs::exists(data / "val_stories.txt")) {
    val = load_stories(data / "val_stories.txt");
    val_truth = load_truth(data / "val_truth.txt");
  }
  const Dataset dataset = make_dataset(train, train_truth, val, val_truth, store, emb);

  ModelDims dims{emb.dim(), settings.hidden_dim, settings.attn_dim, settings.joint_dim,
                 store.region_dim()};
  ModelParams params = init_params(dims, cfg.seed);
  const FitResult fit_result = fit(dataset, std::move(params), cfg, g.verbose ? &std::cerr : nullptr);

  std::string loss = "0 " + format_double(fit_result.initial_loss) + "\n";
  for (std::size_t e = 0; e < fit_result.loss_curve.size(); ++e) {
    loss += std::to_string(e + 1) + " " + format_double(fit_result.loss_curve[e]) + "\n";
  }
  write_file(out.string() + ".loss.txt", loss);
  std::string valtxt;
  for (std::size_t e = 0; e < fit_result.validation_r1.size(); ++e) {
    valtxt += std::to_string(e + 1) + " " + format_double(fit_result.validation_r1[e]) + "\n";
  }
  write_file(out.string() + ".val.txt", valtxt);

  Checkpoint ckpt{fit_result.params, cfg.variant, emb};
  save_checkpoint(ckpt, out);

  if (!dataset.validation.empty()) {
    const auto queries = validation_queries(dataset, fit_result.params, cfg.variant);
    const std::size_t ks[] = {1, 5, 10};
    std::cout << format_report(compute_report(queries, ks),
                               "validation (epoch " + std::to_string(fit_result.best_epoch) + ")");
  }
  return 0;
}

int cmd_retrieve(const Globals& g, const fs::path& story_path, const std::string& index_path,
                 const fs::path& features, const fs::path& ckpt_path, std::size_t topk,
                 const std::string& weights, const std::string& variant, std::size_t prune_k,
                 const fs::path& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ImageStore store = load_image_features(features);
  warn_all(g, store.rejected, "feature records rejected");
  if (store.region_dim() != ckpt.params.dims.region_dim) {
    throw Error("feature width " + std::to_string(store.region_dim()) +
                " does not match checkpoint region_dim " +
                std::to_string(ckpt.params.dims.region_dim));
  }
  std::optional<TextIndex> index;
  if (!index_path.empty()) index = load_index(index_path);
  RetrievalOptions opt;
  opt.prune_k = prune_k;
  opt.weights = parse_weights(weights);
  opt.variant = variant.empty() ? ckpt.variant : parse_variant(variant);
  opt.threads = g.threads;
  opt.validate();
  if (topk == 0) throw Error("--topk must be at least 1");

  std::vector<RetrievalResult> results;
  std::size_t empty = 0;
  for (const Story& story : load_stories(story_path)) {
    RetrievalResult r =
        retrieve_story(story, index ? &*index : nullptr, store, ckpt.params, ckpt.embeddings, opt);
    truncate(r, topk);
    for (const auto& s : r.sentences) empty += s.no_candidates;
    results.push_back(std::move(r));
  }
  save_results(results, out);
  if (empty) std::cerr << "warning: " << empty << " sentences had no candidates\n";
  return 0;
}

int cmd_storyboard(const Globals& g, const fs::path& story_path, const fs::path& results_path,
                   const fs::path& features, const std::string& masks_path, StoryboardOptions opt,
                   const fs::path& out) {
  const ImageStore store = load_image_features(features);
  warn_all(g, store.rejected, "feature records rejected");
  std::vector<InstanceMask> masks;
  if (!masks_path.empty()) {
    masks = load_masks(masks_path);
    for (const auto& m : masks) validate(m, store);
  }
  if (opt.image_dir.empty()) opt.image_dir = features.parent_path().empty() ? "." : features.parent_path();
  opt.validate();

  std::map<std::string, RetrievalResult> by_story;
  for (auto& r : load_results(results_path)) by_story[r.story_id] = std::move(r);

  std::vector<StoryboardPlan> plans;
  for (const Story& story : load_stories(story_path)) {
    auto it = by_story.find(story.id);
    if (it == by_story.end()) {
      std::cerr << "warning: no retrieval results for story " << story.id << '\n';
    }
    const RetrievalResult empty{story.id, {}};
    plans.push_back(compose_storyboard(story, it == by_story.end() ? empty : it->second, store, masks, opt));
  }
  apply_style(plans, opt);
  save_plans(plans, opt, out);
  if (g.verbose) {
    std::size_t panels = 0;
    for (const auto& p : plans) {
      for (const auto& s : p.sentences) panels += s.panels.size();
    }
    std::cerr << plans.size() << " stories, " << panels << " panels\n";
  }
  return 0;
}

int cmd_evaluate(const Globals& g, const fs::path& results_path, const fs::path& truth_path,
                 const std::string& ks_text, const std::string& out) {
  const auto ks = parse_ks(ks_text);
  const TruthTable truth = load_truth(truth_path);
  std::vector<RankedQuery> queries;
  std::size_t missing = 0;
  for (const auto& r : load_results(results_path)) {
    for (const auto& s : r.sentences) {
      auto it = truth.find({r.story_id, s.sentence_idx});
      if (it == truth.end()) {
        ++missing;
        if (g.verbose) std::cerr << "no truth for " << r.story_id << " " << s.sentence_idx << '\n';
        continue;
      }
      RankedQuery q;
      for (const auto& c : s.ranked) q.ranked.push_back(c.image_id);
      q.relevant.insert(it->second.begin(), it->second.end());
      queries.push_back(std::move(q));
    }
  }
  if (missing) std::cerr << "warning: " << missing << " result sentences without truth skipped\n";
  if (queries.empty()) throw Error("no results matched the truth file");
  const std::string report = format_report(compute_report(queries, ks));
  std::cout << report;
  if (!out.empty()) write_file(out, report);
  return 0;
}

int cmd_gradcheck(const Globals& g, std::size_t dim, std::size_t stories, std::size_t sentences,
                  const std::string& mode, const std::string& variant, double step) {
  const ModelDims dims{dim, dim, dim, dim, dim};
  const ModelParams params = init_params(dims, g.seed, 0.5);
  const ProbeBatch probe = make_probe_batch(dims, stories, sentences, g.seed + 1);
  TrainConfig cfg;
  cfg.variant = parse_variant(variant);
  const GradCheckReport report = grad_check(params, probe.batch(), cfg, parse_negative_mode(mode), step);
  std::cout << format_report(report);
  return report.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"storyseq: story-to-image retrieval and storyboard planning"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--verbose", g.verbose, "Progress and diagnostics on stderr");

  std::string s_spec, s_out;
  bool s_ctx = false;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth->add_option("--spec", s_spec, "Generator spec (JSON)");
  synth->add_option("--out", s_out, "Output directory")->required();
  synth->add_flag("--context-dependent", s_ctx, "Last sentence of each story has no concept words");

  std::string b_features, b_out, b_stop;
  auto* build = app.add_subcommand("build-index", "Build the caption text index");
  build->add_option("--features", b_features, "Image feature file")->required();
  build->add_option("--out", b_out, "Index file")->required();
  build->add_option("--stopwords", b_stop, "Stopword list");

  std::string t_data, t_config, t_out, t_variant;
  auto* train = app.add_subcommand("train", "Train the encoder");
  train->add_option("--data", t_data, "Corpus directory")->required();
  train->add_option("--config", t_config, "Training settings (JSON)");
  train->add_option("--out", t_out, "Checkpoint path")->required();
  train->add_option("--variant", t_variant, "cadm | fixed_context | no_context");

  std::string r_story, r_index, r_features, r_ckpt, r_weights = "0.9,0.1", r_variant, r_out;
  std::size_t r_topk = 10, r_prune = 100;
  auto* retrieve = app.add_subcommand("retrieve", "Rank images for every sentence of each story");
  retrieve->add_option("--story", r_story, "Story file")->required();
  retrieve->add_option("--index", r_index, "Text index (omit to rank the whole store)");
  retrieve->add_option("--features", r_features, "Image feature file")->required();
  retrieve->add_option("--ckpt", r_ckpt, "Checkpoint")->required();
  retrieve->add_option("--topk", r_topk, "Candidates kept per sentence");
  retrieve->add_option("--weights", r_weights, "Fusion weights visual,text");
  retrieve->add_option("--variant", r_variant, "Encoder variant (default: checkpoint's)");
  retrieve->add_option("--prune-k", r_prune, "Text-stage candidates");
  retrieve->add_option("--out", r_out, "Results file")->required();

  std::string sb_story, sb_results, sb_features, sb_masks, sb_style, sb_image_dir, sb_out;
  StoryboardOptions sb_opt;
  bool sb_single = false;
  auto* board = app.add_subcommand("storyboard", "Plan storyboard panels from retrieval results");
  board->add_option("--story", sb_story, "Story file")->required();
  board->add_option("--results", sb_results, "Retrieval results")->required();
  board->add_option("--features", sb_features, "Image feature file")->required();
  board->add_option("--masks", sb_masks, "Instance mask file");
  board->add_option("--k", sb_opt.k, "Top-K set size for one-to-many decoding");
  board->add_option("--tau", sb_opt.tau, "Mask overlap threshold");
  board->add_option("--style-cmd", sb_style, "Style command: CMD INPUT OUTPUT");
  board->add_option("--style-workers", sb_opt.style_workers, "Concurrent style commands");
  board->add_option("--image-dir", sb_image_dir, "Image directory (default: features directory)");
  board->add_flag("--single-image", sb_single, "One panel per sentence");
  board->add_option("--out", sb_out, "Plan file")->required();

  std::string e_results, e_truth, e_ks = "1,5,10", e_out;
  auto* evaluate = app.add_subcommand("evaluate", "Score retrieval results against truth");
  evaluate->add_option("--results", e_results, "Retrieval results")->required();
  evaluate->add_option("--truth", e_truth, "Truth file")->required();
  evaluate->add_option("--ks", e_ks, "Recall cutoffs");
  evaluate->add_option("--out", e_out, "Report file");

  std::size_t gc_dims = 4, gc_stories = 2, gc_sentences = 2;
  std::string gc_mode = "hard", gc_variant = "cadm";
  double gc_step = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients");
  gradcheck->add_option("--dims", gc_dims, "Width of every layer")->check(CLI::PositiveNumber);
  gradcheck->add_option("--stories", gc_stories, "Stories in the probe batch");
  gradcheck->add_option("--sentences", gc_sentences, "Sentences per story");
  gradcheck->add_option("--mode", gc_mode, "hard | mean");
  gradcheck->add_option("--variant", gc_variant, "Encoder variant");
  gradcheck->add_option("--step", gc_step, "Finite-difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code != 0 && e.get_exit_code() != static_cast<int>(CLI::ExitCodes::Success)) {
      std::cerr << app.help();
    }
    return code;
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    if (*synth) return cmd_synth(g, s_spec, s_out, s_ctx);
    if (*build) return cmd_build_index(g, b_features, b_out, b_stop);
    if (*train) return cmd_train(g, t_data, t_config, t_out, t_variant);
    if (*retrieve) {
      return cmd_retrieve(g, r_story, r_index, r_features, r_ckpt, r_topk, r_weights, r_variant,
                          r_prune, r_out);
    }
    if (*board) {
      if (!sb_style.empty()) sb_opt.style_cmd = sb_style;
      sb_opt.multi_image = !sb_single;
      sb_opt.image_dir = sb_image_dir;
      return cmd_storyboard(g, sb_story, sb_results, sb_features, sb_masks, sb_opt, sb_out);
    }
    if (*evaluate) return cmd_evaluate(g, e_results, e_truth, e_ks, e_out);
    if (*gradcheck) return cmd_gradcheck(g, gc_dims, gc_stories, gc_sentences, gc_mode, gc_variant, gc_step);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::cerr << "error: " << msg << '\n';
    return 1;
  }
  return 1;
}
