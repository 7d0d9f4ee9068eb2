#include "storyseq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "storyseq/encoder.hpp"
#include "storyseq/matcher.hpp"

namespace storyseq {

std::string_view to_string(NegativeMode m) { return m == NegativeMode::hard ? "hard" : "mean"; }

NegativeMode parse_negative_mode(std::string_view name) {
  if (name == "hard") return NegativeMode::hard;
  if (name == "mean") return NegativeMode::mean;
  throw Error("unknown negative mode '" + std::string(name) + "' (expected hard or mean)");
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.batch_size = 256;
  c.epochs = 100;
  return c;
}

void TrainConfig::validate() const {
  if (!(margin > 0.0)) throw Error("train config: margin must be positive");
  if (batch_size < 2) throw Error("train config: batch_size must be at least 2");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw Error("train config: learning_rate must be a finite non-negative number");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0)) {
    throw Error("train config: invalid Adam hyperparameters");
  }
}

NegativeMode TrainConfig::mode_for(DataSource source) const {
  if (negative_mode) return *negative_mode;
  return source == DataSource::dii ? NegativeMode::hard : NegativeMode::mean;
}

TrainSettings parse_train_settings(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw Error("train config: expected a JSON object");
  static const std::set<std::string> kKeys = {
      "learning_rate", "batch_size", "epochs",    "margin",     "negative_mode",
      "seed",          "variant",    "beta1",     "beta2",      "epsilon",    "warmup_steps",
      "hidden_dim",    "attn_dim",   "joint_dim"};
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw Error("train config: unknown key '" + key + "'");
  }
  TrainSettings s;
  TrainConfig& c = s.config;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.margin = j.value("margin", c.margin);
    c.seed = j.value("seed", c.seed);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("negative_mode")) {
      const auto m = j.at("negative_mode").get<std::string>();
      if (m != "auto") c.negative_mode = parse_negative_mode(m);
    }
    s.hidden_dim = j.value("hidden_dim", s.hidden_dim);
    s.attn_dim = j.value("attn_dim", s.hidden_dim);
    s.joint_dim = j.value("joint_dim", s.joint_dim);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("train config: ") + e.what());
  }
  c.validate();
  return s;
}

TrainSettings load_train_settings(const std::filesystem::path& path) {
  return parse_train_settings(read_file(path));
}

double pair_loss(double positive, double negative_s2i, double negative_i2s, double margin) {
  if (!(margin > 0.0)) throw Error("pair_loss: margin must be positive");
  return std::max(0.0, margin - positive + negative_s2i) +
         std::max(0.0, margin - positive + negative_i2s);
}

namespace graph {

ad::Var batch_loss(ad::Graph& g, const std::vector<std::vector<ad::Var>>& s, double margin,
                   NegativeMode mode, const NegativeMask* usable) {
  const std::size_t n = s.size();
  if (n < 2) throw Error("batch_loss: a batch needs at least two matched pairs");
  for (const auto& row : s) {
    if (row.size() != n) throw Error("batch_loss: score matrix must be square");
  }
  if (!(margin > 0.0)) throw Error("batch_loss: margin must be positive");
  if (usable && usable->size() != n) throw Error("batch_loss: negative mask size mismatch");
  auto ok = [&](std::size_t a, std::size_t b) { return !usable || (*usable)[a][b]; };
  const ad::Var zero = g.constant(Tensor(1, 1, 0.0));
  auto hinge = [&](ad::Var pos, ad::Var neg) {
    return g.relu(g.add_scalar(g.sub(neg, pos), margin));
  };
  std::vector<ad::Var> per_pair;
  per_pair.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<ad::Var> row_negs, col_negs;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (ok(i, j)) row_negs.push_back(s[i][j]);
      if (ok(j, i)) col_negs.push_back(s[j][i]);
    }
    const ad::Var pos = s[i][i];
    auto direction = [&](const std::vector<ad::Var>& negs) {
      if (negs.empty()) return zero;
      if (mode == NegativeMode::hard) return hinge(pos, g.max(negs));
      std::vector<ad::Var> terms;
      for (ad::Var v : negs) terms.push_back(hinge(pos, v));
      return g.mean(terms);
    };
    const ad::Var terms[] = {direction(row_negs), direction(col_negs)};
    per_pair.push_back(g.sum(terms));
  }
  return g.mean(per_pair);
}

}  // namespace graph

double batch_loss(const std::vector<Vec>& scores, double margin, NegativeMode mode,
                  const NegativeMask* usable) {
  ad::Graph g(false);
  std::vector<std::vector<ad::Var>> s;
  for (const Vec& row : scores) {
    std::vector<ad::Var> vars;
    for (double v : row) vars.push_back(g.constant(Tensor(1, 1, v)));
    s.push_back(std::move(vars));
  }
  return g.scalar(graph::batch_loss(g, s, margin, mode, usable));
}

Dataset make_dataset(const std::vector<Story>& train, const TruthTable& train_truth,
                     const std::vector<Story>& validation, const TruthTable& validation_truth,
                     const ImageStore& store, const EmbeddingTable& emb, DataSource source) {
  Dataset d;
  for (const Story& s : train) {
    TrainingExample ex{s.id, embed(s, emb), {}, {}, source};
    for (std::size_t i = 0; i < s.sentences.size(); ++i) {
      auto it = train_truth.find({s.id, i});
      if (it == train_truth.end()) {
        throw Error("no paired image for story " + s.id + " sentence " + std::to_string(i));
      }
      ex.images.push_back(&store.at(it->second.front()));
      ex.relevant.emplace_back(it->second.begin(), it->second.end());
    }
    d.train.push_back(std::move(ex));
  }
  std::set<std::string> pool;
  for (const Story& s : validation) {
    ValidationExample ex{s.id, embed(s, emb), {}};
    for (std::size_t i = 0; i < s.sentences.size(); ++i) {
      auto it = validation_truth.find({s.id, i});
      if (it == validation_truth.end()) {
        throw Error("no truth for validation story " + s.id + " sentence " + std::to_string(i));
      }
      ex.relevant.emplace_back(it->second.begin(), it->second.end());
      pool.insert(it->second.begin(), it->second.end());
    }
    d.validation.push_back(std::move(ex));
  }
  for (const auto& id : pool) d.validation_pool.push_back(&store.at(id));
  return d;
}

namespace {

struct BatchGraph {
  ad::Graph g;
  graph::ParamVars p;
  ad::Var loss;

  BatchGraph(const Batch& batch, const ModelParams& params, const TrainConfig& config,
             NegativeMode mode, bool track)
      : g(track) {
    p = graph::bind(g, params, track);
    std::vector<std::vector<ad::Var>> words;
    std::vector<std::vector<ad::Var>> regions;
    std::map<const ImageRecord*, std::size_t> image_slot;
    std::vector<std::size_t> unit_image;
    std::vector<const std::set<std::string>*> unit_relevant;
    for (const TrainingExample* ex : batch) {
      if (ex->images.size() != ex->words.size()) {
        throw Error("training example " + ex->story_id + ": sentence/image count mismatch");
      }
      auto nodes = graph::story(g, p, ex->words, config.variant);
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        words.push_back(std::move(nodes[i].x));
        const ImageRecord* img = ex->images[i];
        auto [it, inserted] = image_slot.emplace(img, regions.size());
        if (inserted) regions.push_back(graph::image(g, p, *img));
        unit_image.push_back(it->second);
        unit_relevant.push_back(i < ex->relevant.size() ? &ex->relevant[i] : nullptr);
      }
    }
    const std::size_t n = words.size();
    std::vector<std::vector<ad::Var>> scores(n, std::vector<ad::Var>(n));
    std::vector<std::map<std::size_t, ad::Var>> cache(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t slot = unit_image[j];
        auto it = cache[i].find(slot);
        if (it == cache[i].end()) {
          it = cache[i].emplace(slot, graph::dense_similarity(g, words[i], regions[slot])).first;
        }
        scores[i][j] = it->second;
      }
    }
    // An image relevant to a sentence, or the sentence's own image reused,
    // is never its negative.
    NegativeMask usable(n, std::vector<bool>(n, true));
    std::vector<const ImageRecord*> slot_image(regions.size());
    for (const auto& [img, slot] : image_slot) slot_image[slot] = img;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const bool same = unit_image[i] == unit_image[j];
        const bool relevant =
            unit_relevant[i] && unit_relevant[i]->count(slot_image[unit_image[j]]->image_id);
        usable[i][j] = i != j && !same && !relevant;
      }
    }
    loss = graph::batch_loss(g, scores, config.margin, mode, &usable);
  }
};

}  // namespace

double batch_objective(const Batch& batch, const ModelParams& params, const TrainConfig& config,
                       NegativeMode mode, std::vector<std::int64_t>* decisions) {
  BatchGraph bg(batch, params, config, mode, false);
  if (decisions) *decisions = bg.g.decisions();
  return bg.g.scalar(bg.loss);
}

LossAndGradients gradients(const Batch& batch, const ModelParams& params, const TrainConfig& config,
                           NegativeMode mode) {
  BatchGraph bg(batch, params, config, mode, true);
  LossAndGradients out{bg.g.scalar(bg.loss), zeros_like(params.dims)};
  bg.g.backward(bg.loss);
  visit_pair(bg.p, out.grads, [&](std::string_view, const ad::Var& v, Tensor& grad) {
    grad = bg.g.grad(v);
  });
  if (!std::isfinite(out.loss)) {
    // A bad parameter value outranks the gradients it poisons.
    std::string culprit, grad_culprit;
    visit_pair(params.t, out.grads, [&](std::string_view name, const Tensor& t, const Tensor& gr) {
      if (culprit.empty() && !all_finite(t.span())) culprit = std::string(name);
      if (grad_culprit.empty() && !all_finite(gr.span())) grad_culprit = std::string(name);
    });
    if (culprit.empty()) culprit = grad_culprit.empty() ? "unknown" : grad_culprit;
    throw Error("non-finite loss; offending tensor: " + culprit);
  }
  return out;
}

Adam::Adam(const ModelParams& params, const TrainConfig& config)
    : m_(zeros_like(params.dims)),
      v_(zeros_like(params.dims)),
      lr_(config.learning_rate),
      beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.epsilon),
      warmup_(config.warmup_steps) {}

void Adam::step(ModelParams& params, const ParamTensors& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double lr =
      warmup_ ? lr_ * std::min(1.0, static_cast<double>(t_) / static_cast<double>(warmup_)) : lr_;
  visit_pair(params.t, grads, [&](std::string_view name, Tensor& w, const Tensor& g) {
    Tensor* m = nullptr;
    Tensor* v = nullptr;
    visit_pair(m_, v_, [&](std::string_view n2, Tensor& mm, Tensor& vv) {
      if (n2 == name) {
        m = &mm;
        v = &vv;
      }
    });
    for (std::size_t i = 0; i < w.size(); ++i) {
      (*m)[i] = beta1_ * (*m)[i] + (1.0 - beta1_) * g[i];
      (*v)[i] = beta2_ * (*v)[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = (*m)[i] / c1;
      const double vhat = (*v)[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  });
}

std::vector<RankedQuery> validation_queries(const Dataset& data, const ModelParams& params,
                                            Variant variant) {
  std::vector<RankedQuery> out;
  if (data.validation.empty()) return out;
  std::vector<EncodedImage> pool;
  std::vector<std::string> ids;
  for (const ImageRecord* r : data.validation_pool) {
    pool.push_back(encode_image(*r, params));
    ids.push_back(r->image_id);
  }
  for (const ValidationExample& ex : data.validation) {
    const EncodedStory story = encode_story(ex.words, params, variant, false);
    const ScoreMatrix m = score_batch(story, pool);
    for (std::size_t i = 0; i < m.rows; ++i) {
      std::span<const double> row(m.scores.data() + i * m.cols, m.cols);
      RankedQuery q;
      for (std::size_t k : rank_by_score(row, ids)) q.ranked.push_back(ids[k]);
      q.relevant = ex.relevant[i];
      out.push_back(std::move(q));
    }
  }
  return out;
}

double validation_recall_at_1(const Dataset& data, const ModelParams& params, Variant variant) {
  const auto queries = validation_queries(data, params, variant);
  if (queries.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& q : queries) hits += rank_of_truth(q.ranked, q.relevant) == 1;
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

namespace {

std::vector<Batch> chunk(const Dataset& data, const std::vector<std::size_t>& order,
                         std::size_t batch_size) {
  std::vector<Batch> batches;
  Batch current;
  for (std::size_t idx : order) {
    current.push_back(&data.train[idx]);
    if (current.size() == batch_size) batches.push_back(std::exchange(current, {}));
  }
  if (!current.empty()) batches.push_back(std::move(current));
  auto units = [](const Batch& b) {
    std::size_t n = 0;
    for (const auto* ex : b) n += ex->words.size();
    return n;
  };
  if (!batches.empty() && units(batches.back()) < 2) {
    if (batches.size() == 1) throw Error("training data has fewer than two sentence-image pairs");
    Batch tail = std::move(batches.back());
    batches.pop_back();
    batches.back().insert(batches.back().end(), tail.begin(), tail.end());
  }
  return batches;
}

// Batches are homogeneous in source; sources alternate round-robin.
std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size, std::mt19937_64* rng) {
  std::vector<std::size_t> sis, dii;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    (data.train[i].source == DataSource::sis ? sis : dii).push_back(i);
  }
  if (rng) {
    std::shuffle(sis.begin(), sis.end(), *rng);
    std::shuffle(dii.begin(), dii.end(), *rng);
  }
  const auto a = sis.empty() ? std::vector<Batch>{} : chunk(data, sis, batch_size);
  const auto b = dii.empty() ? std::vector<Batch>{} : chunk(data, dii, batch_size);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < std::max(a.size(), b.size()); ++i) {
    if (i < a.size()) out.push_back(a[i]);
    if (i < b.size()) out.push_back(b[i]);
  }
  return out;
}

}  // namespace

FitResult fit(const Dataset& data, ModelParams params, const TrainConfig& config, std::ostream* log) {
  config.validate();
  if (data.train.empty()) throw Error("fit: empty training set");
  check_shapes(params);

  FitResult result;
  {
    const auto batches = make_batches(data, config.batch_size, nullptr);
    double total = 0.0;
    for (const Batch& b : batches) {
      total += batch_objective(b, params, config, config.mode_for(b.front()->source));
    }
    result.initial_loss = total / static_cast<double>(batches.size());
  }
  if (log) *log << "initial loss " << format_double(result.initial_loss) << '\n';

  Adam adam(params, config);
  std::mt19937_64 rng(config.seed);
  double best_r1 = -1.0;
  result.params = params;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = make_batches(data, config.batch_size, &rng);
    double total = 0.0;
    for (const Batch& b : batches) {
      const auto lg = gradients(b, params, config, config.mode_for(b.front()->source));
      total += lg.loss;
      adam.step(params, lg.grads);
    }
    const double epoch_loss = total / static_cast<double>(batches.size());
    result.loss_curve.push_back(epoch_loss);
    double r1 = 0.0;
    if (!data.validation.empty()) {
      r1 = validation_recall_at_1(data, params, config.variant);
      result.validation_r1.push_back(r1);
    }
    if (data.validation.empty() || r1 > best_r1) {
      best_r1 = r1;
      result.best_epoch = epoch;
      result.params = params;
    }
    if (log) {
      *log << "epoch " << epoch << " loss " << format_double(epoch_loss);
      if (!data.validation.empty()) *log << " val_R@1 " << format_double(r1);
      *log << '\n';
    }
  }
  return result;
}

Batch ProbeBatch::batch() const {
  Batch b;
  for (const auto& ex : examples) b.push_back(&ex);
  return b;
}

ProbeBatch make_probe_batch(const ModelDims& dims, std::size_t stories, std::size_t sentences,
                            std::uint64_t seed) {
  if (stories == 0 || sentences == 0) throw Error("probe batch needs stories and sentences");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 3);
  auto vec = [&](std::size_t n) {
    Vec v(n);
    for (double& x : v) x = normal(rng);
    return v;
  };
  ProbeBatch pb;
  pb.images = std::make_shared<std::vector<ImageRecord>>();
  pb.images->reserve(stories * sentences);
  for (std::size_t s = 0; s < stories; ++s) {
    TrainingExample ex;
    ex.story_id = "probe" + std::to_string(s);
    for (std::size_t i = 0; i < sentences; ++i) {
      std::vector<Vec> words;
      for (int t = count(rng); t > 0; --t) words.push_back(vec(dims.word_dim));
      ex.words.push_back(std::move(words));
      ImageRecord img;
      img.image_id = ex.story_id + "_" + std::to_string(i);
      img.width = 10;
      img.height = 10;
      for (int k = count(rng); k > 0; --k) img.regions.push_back({{0, 0, 5, 5}, vec(dims.region_dim)});
      pb.images->push_back(std::move(img));
    }
    pb.examples.push_back(std::move(ex));
  }
  std::size_t next = 0;
  for (auto& ex : pb.examples) {
    for (std::size_t i = 0; i < sentences; ++i) ex.images.push_back(&(*pb.images)[next++]);
  }
  return pb;
}

GradCheckReport check_gradients(const ModelParams& params, const Batch& batch,
                                const TrainConfig& config, NegativeMode mode,
                                const ParamTensors& analytic, double step) {
  ModelParams probe = params;
  std::vector<std::int64_t> base, plus, minus;
  batch_objective(batch, probe, config, mode, &base);
  GradCheckReport report;
  visit_pair(probe.t, analytic, [&](std::string_view name, Tensor& t, const Tensor& a) {
    if (!a.same_shape(t)) throw Error("check_gradients: gradient shape mismatch for " + std::string(name));
    TensorCheck tc;
    tc.name = std::string(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + step;
      const double lp = batch_objective(batch, probe, config, mode, &plus);
      t[i] = orig - step;
      const double lm = batch_objective(batch, probe, config, mode, &minus);
      t[i] = orig;
      if (plus != base || minus != base) {
        ++tc.skipped;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * step);
      const double rel = std::abs(a[i] - numeric) / std::max(1e-8, std::abs(a[i]) + std::abs(numeric));
      ++tc.checked;
      if (rel < report.tolerance) ++tc.within;
      tc.max_rel_error = std::max(tc.max_rel_error, rel);
    }
    report.checked += tc.checked;
    report.skipped += tc.skipped;
    report.within += tc.within;
    report.max_rel_error = std::max(report.max_rel_error, tc.max_rel_error);
    report.tensors.push_back(std::move(tc));
  });
  report.pass = report.max_rel_error < report.tolerance;
  return report;
}

GradCheckReport grad_check(const ModelParams& params, const Batch& batch, const TrainConfig& config,
                           NegativeMode mode, double step) {
  const auto lg = gradients(batch, params, config, mode);
  return check_gradients(params, batch, config, mode, lg.grads, step);
}

std::string format_report(const GradCheckReport& r) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-18s %10s %8s %8s %8s\n", "tensor", "max_rel", "checked",
                "skipped", "within");
  out << buf;
  for (const auto& t : r.tensors) {
    std::snprintf(buf, sizeof(buf), "%-18s %10.3e %8zu %8zu %8zu\n", t.name.c_str(),
                  t.max_rel_error, t.checked, t.skipped, t.within);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "total: max_rel %.3e, %zu checked, %zu skipped, %.2f%% within %.0e -> %s\n",
                r.max_rel_error, r.checked, r.skipped, 100.0 * r.fraction_within(), r.tolerance,
                r.pass ? "PASS" : "FAIL");
  out << buf;
  return out.str();
}

}  // namespace storyseq
