#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "storyseq/retrieval.hpp"
#include "test_support.hpp"

using namespace storyseq;

namespace {

// no_context with identity merge/projection: word vectors land unchanged in
// the joint space and regions are their raw features.
ModelParams passthrough(std::size_t d) {
  ModelParams p = init_params({d, d, d, d, d}, 1);
  p.t.sent_merge_w = Tensor(d, 3 * d);
  p.t.proj_w = Tensor(d, d);
  p.t.region_w = Tensor(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    p.t.sent_merge_w(i, 2 * d + i) = 1.0;
    p.t.proj_w(i, i) = 1.0;
    p.t.region_w(i, i) = 1.0;
  }
  return p;
}

ImageRecord image(const std::string& id, const std::string& caption, const std::vector<Vec>& feats) {
  ImageRecord r;
  r.image_id = id;
  r.width = r.height = 8;
  r.caption = caption;
  for (const Vec& f : feats) r.regions.push_back({{0, 0, 1, 1}, f});
  return r;
}

struct ToyWorld {
  EmbeddingTable emb{2};
  ImageStore store;
  TextIndex index;
  ModelParams params = passthrough(2);
  RetrievalOptions opts;

  ToyWorld() {
    emb.set("red", {1, 0});
    emb.set("ball", {0, 1});
    // C matches the words exactly but its caption shares nothing with the query
    store = ImageStore(2, {image("A", "red ball", {{1, 0.3}, {0.2, 1}}),
                           image("B", "blue ball", {{0.5, 1}, {1, 1}}),
                           image("C", "green tree", {{1, 0}, {0, 1}})});
    index = build_index(store.records());
    opts.variant = Variant::no_context;
  }
};

std::vector<std::string> ids(const SentenceResult& s) {
  std::vector<std::string> out;
  for (const auto& c : s.ranked) out.push_back(c.image_id);
  return out;
}

}  // namespace

TEST_CASE("normalize examples") {
  const Vec n = normalize_scores(Vec{0.2, 0.6, 1.0});
  CHECK(n[0] == 0.0);
  CHECK(n[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(n[2] == 1.0);
  CHECK(normalize_scores(Vec{0.4, 0.4}) == Vec{0.5, 0.5});
  CHECK(normalize_scores(Vec{7.0}) == Vec{0.5});
}

TEST_CASE("weights and options") {
  const FusionWeights w = parse_weights("0.7,0.3");
  CHECK(w.visual == 0.7);
  CHECK(w.text == 0.3);
  CHECK_THROWS_AS(parse_weights("0.7"), Error);
  CHECK_THROWS_AS(parse_weights("a,b"), Error);
  RetrievalOptions o;
  CHECK(o.prune_k == 100);
  CHECK(o.weights.visual == 0.9);
  o.weights = {0.5, 0.6};
  CHECK_THROWS_AS(o.validate(), Error);
  o.weights = {1.2, -0.2};
  CHECK_THROWS_AS(o.validate(), Error);
  o.weights = {1, 0};
  o.prune_k = 0;
  CHECK_THROWS_AS(o.validate(), Error);
}

TEST_CASE("text pruning removes the visually best image") {
  ToyWorld w;
  const Story story = make_story("s", {"red ball"});

  RetrievalOptions visual_only = w.opts;
  visual_only.use_index = false;
  visual_only.weights = {1, 0};
  const auto full = retrieve_story(story, nullptr, w.store, w.params, w.emb, visual_only);
  CHECK(ids(full.sentences[0]) == std::vector<std::string>{"C", "A", "B"});
  CHECK(full.sentences[0].ranked[0].visual == doctest::Approx(1.0));

  const auto pruned = retrieve_story(story, &w.index, w.store, w.params, w.emb, w.opts);
  const auto& r = pruned.sentences[0];
  CHECK(ids(r) == std::vector<std::string>{"A", "B"});
  // A: visual max-normalized 1, text 1 -> fused 1; B gets 0 on both
  CHECK(r.ranked[0].fused == doctest::Approx(1.0));
  CHECK(r.ranked[1].fused == doctest::Approx(0.0));
  for (const auto& c : r.ranked) {
    CHECK(c.fused == doctest::Approx(0.9 * normalize_scores(Vec{r.ranked[0].visual, r.ranked[1].visual})[&c - &r.ranked[0]] +
                                     0.1 * normalize_scores(Vec{r.ranked[0].text, r.ranked[1].text})[&c - &r.ranked[0]]));
  }
  CHECK(r.ranked[0].grounding.size() == 2);
  CHECK(r.ranked[0].grounding[1].region == 1);
}

TEST_CASE("pure weights reproduce the single-stage orderings") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0, 1);
  const char* words[] = {"sun", "dog", "car", "tree", "boat", "hat"};
  EmbeddingTable emb(3);
  for (const char* wd : words) emb.set(wd, {nd(rng), nd(rng), nd(rng)});
  std::vector<ImageRecord> recs;
  for (int j = 0; j < 12; ++j) {
    std::string cap;
    for (int k = 0; k < 3; ++k) cap += std::string(words[rng() % 6]) + " ";
    std::vector<Vec> feats;
    for (int k = 0, n = 1 + static_cast<int>(rng() % 3); k < n; ++k) feats.push_back({nd(rng), nd(rng), nd(rng)});
    recs.push_back(image("img" + std::to_string(j), cap, feats));
  }
  const ImageStore store(3, recs);
  const TextIndex index = build_index(store.records());
  const ModelParams params = init_params({3, 4, 4, 3, 3}, 2, 0.5);
  const Story story = make_story("s", {"sun dog", "car tree boat", "hat sun"});

  RetrievalOptions opts;
  opts.prune_k = 5;
  opts.weights = {1, 0};
  const auto vis = retrieve_story(story, &index, store, params, emb, opts);
  opts.weights = {0, 1};
  const auto txt = retrieve_story(story, &index, store, params, emb, opts);
  const EncodedStory enc = encode_story(story, emb, params, Variant::cadm);

  for (std::size_t i = 0; i < 3; ++i) {
    const auto hits = text_retrieve(index, story.sentences[i], 5);
    std::vector<std::string> hit_ids;
    for (const auto& h : hits) hit_ids.push_back(h.image_id);
    CHECK(ids(txt.sentences[i]) == hit_ids);

    // pruning soundness and the visual ordering
    std::vector<std::pair<double, std::string>> expect;
    for (const auto& c : vis.sentences[i].ranked) {
      CHECK(std::find(hit_ids.begin(), hit_ids.end(), c.image_id) != hit_ids.end());
      const double f = dense_similarity(enc.sentences[i].x, encode_image(store.at(c.image_id), params).regions).score;
      CHECK(c.visual == doctest::Approx(f).epsilon(1e-9));
      expect.emplace_back(-f, c.image_id);
    }
    std::sort(expect.begin(), expect.end());
    for (std::size_t k = 0; k < expect.size(); ++k) CHECK(vis.sentences[i].ranked[k].image_id == expect[k].second);
  }
}

TEST_CASE("raising one candidate's visual score never lowers its rank") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd(0, 1);
  EmbeddingTable emb(2);
  emb.set("a", {1, 0.2});
  emb.set("b", {-0.3, 1});
  const ModelParams params = passthrough(2);
  RetrievalOptions opts;
  opts.variant = Variant::no_context;
  const Story story = make_story("s", {"a b"});
  for (int trial = 0; trial < 50; ++trial) {
    const char* captions[] = {"a b x", "b b a", "b x y", "x"};
    std::vector<ImageRecord> recs;
    for (int j = 0; j < 6; ++j)
      recs.push_back(image("i" + std::to_string(j), captions[j < 4 ? j : rng() % 4],
                           {{nd(rng), nd(rng)}, {nd(rng), nd(rng)}}));
    const ImageStore store(2, recs);
    const TextIndex index = build_index(store.records(), Stopwords());
    const auto before = retrieve_story(story, &index, store, params, emb, opts);
    REQUIRE_FALSE(before.sentences[0].ranked.empty());
    const std::string target = before.sentences[0].ranked.back().image_id;

    for (auto& r : recs)
      if (r.image_id == target) r.regions[0].feature = {1, 0.2};  // exact match for word "a"
    const ImageStore better(2, recs);
    const auto after = retrieve_story(story, &index, better, params, emb, opts);
    auto rank = [&](const RetrievalResult& res) {
      const auto v = ids(res.sentences[0]);
      return std::find(v.begin(), v.end(), target) - v.begin();
    };
    CHECK(rank(after) <= rank(before));
  }
}

TEST_CASE("sentences without candidates are flagged") {
  ToyWorld w;
  const Story story = make_story("s", {"red ball", "purple"});
  const auto r = retrieve_story(story, &w.index, w.store, w.params, w.emb, w.opts);
  REQUIRE(r.sentences.size() == 2);
  CHECK_FALSE(r.sentences[0].no_candidates);
  CHECK(r.sentences[1].no_candidates);
  CHECK(r.sentences[1].ranked.empty());
}

TEST_CASE("results serialize, parse and truncate") {
  TempDir dir;
  ToyWorld w;
  RetrievalOptions opts = w.opts;
  opts.use_index = false;
  std::vector<RetrievalResult> results = {
      retrieve_story(make_story("s1", {"red ball", "ball"}), nullptr, w.store, w.params, w.emb, opts),
      retrieve_story(make_story("s2", {"red"}), nullptr, w.store, w.params, w.emb, opts)};
  results[1].sentences[0].no_candidates = false;
  save_results(results, dir / "r.jsonl");
  const auto back = load_results(dir / "r.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(serialize_results(back) == serialize_results(results));
  CHECK(back[0].story_id == "s1");
  CHECK(back[0].sentences[1].ranked[0].grounding == results[0].sentences[1].ranked[0].grounding);
  CHECK(back[0].sentences[0].ranked[2].fused == results[0].sentences[0].ranked[2].fused);

  truncate(results[0], 1);
  CHECK(results[0].sentences[0].ranked.size() == 1);
  CHECK(results[0].sentences[1].ranked.size() == 1);
  CHECK_THROWS_AS(parse_results("{\"story_id\":1}\n"), Error);
  CHECK_THROWS_AS(parse_results("not json\n"), Error);
}

TEST_CASE("threads do not change results") {
  ToyWorld w;
  RetrievalOptions one = w.opts, many = w.opts;
  one.use_index = many.use_index = false;
  many.threads = 3;
  const Story story = make_story("s", {"red ball", "ball red", "red"});
  CHECK(serialize_results({retrieve_story(story, nullptr, w.store, w.params, w.emb, one)}) ==
        serialize_results({retrieve_story(story, nullptr, w.store, w.params, w.emb, many)}));
}
