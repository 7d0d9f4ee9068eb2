#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "storyseq/common.hpp"
#include "storyseq/matcher.hpp"
#include "storyseq/synth.hpp"
#include "test_support.hpp"

using namespace storyseq;

namespace {

using ConceptSet = std::set<std::size_t>;

bool is_concept_word(const std::string& tok) {
  return tok.size() == 3 && tok[0] == 'w' && std::isdigit(static_cast<unsigned char>(tok[1]));
}

std::size_t word_index(const std::string& tok) { return std::stoul(tok.substr(1)); }

ConceptSet concepts_of(const std::vector<std::string>& tokens, std::size_t c) {
  ConceptSet out;
  for (const auto& t : tokens) {
    if (is_concept_word(t)) out.insert(word_index(t) % c);
  }
  return out;
}

ConceptSet caption_concepts(const ImageRecord& img, std::size_t c) {
  return concepts_of(tokenize(*img.caption), c);
}

Vec basis(std::size_t dim, std::size_t axis) {
  Vec v(dim, 0.0);
  v[axis] = 1.0;
  return v;
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.train_stories = 12;
  s.val_stories = 5;
  s.test_stories = 3;
  s.seed = 11;
  return s;
}

}  // namespace

TEST_CASE("noise-free word vectors are exact concept directions") {
  SyntheticSpec s = small_spec();
  s.sigma = 0.0;
  const SyntheticCorpus c = generate_synthetic(s);
  for (std::size_t w = 0; w < s.vocab; ++w) {
    char name[8];
    std::snprintf(name, sizeof(name), "w%02zu", w);
    REQUIRE(c.embeddings.contains(name));
    CHECK(c.embeddings.lookup(name) == basis(s.dim, w % s.concepts));
  }
  for (const char* f : {"the", "a", "it", "was", "so", "very"}) {
    const Vec& v = c.embeddings.lookup(f);
    for (std::size_t k = 0; k < s.concepts; ++k) CHECK(v[k] == 0.0);
    double norm = 0;
    for (double x : v) norm += x * x;
    CHECK(norm == doctest::Approx(1.0));
  }
}

TEST_CASE("noise-free regions carry the concepts named by the caption") {
  SyntheticSpec s = small_spec();
  s.sigma = 0.0;
  const SyntheticCorpus c = generate_synthetic(s);
  for (const auto& img : c.store.records()) {
    REQUIRE(img.regions.size() == s.regions_per_image);
    ConceptSet seen;
    for (const auto& r : img.regions) {
      for (std::size_t k = 0; k < s.concepts; ++k) {
        if (r.feature == basis(s.dim, k)) seen.insert(k);
      }
    }
    CHECK(seen == caption_concepts(img, s.concepts));
    CHECK(seen.size() == s.concepts_per_sentence);
  }
}

TEST_CASE("noise-free single-concept data separates under identity encoding") {
  SyntheticSpec s = small_spec();
  s.sigma = 0.0;
  s.concepts_per_sentence = 1;
  s.regions_per_image = 1;
  s.filler_words = 0;
  s.compound_stories = 0;
  const SyntheticCorpus c = generate_synthetic(s);
  std::size_t matched = 0, mismatched = 0;
  for (const Story& story : c.train.stories) {
    for (std::size_t i = 0; i < story.sentences.size(); ++i) {
      const auto words = embed(story.sentences[i], c.embeddings);
      const ConceptSet want = concepts_of(story.sentences[i].tokens, s.concepts);
      for (const auto& img : c.store.records()) {
        std::vector<Vec> regions;
        for (const auto& r : img.regions) regions.push_back(r.feature);
        const double score = dense_similarity(words, regions).score;
        if (caption_concepts(img, s.concepts) == want) {
          CHECK(score == doctest::Approx(1.0).epsilon(1e-12));
          ++matched;
        } else {
          CHECK(score <= 1e-6);
          ++mismatched;
        }
      }
    }
  }
  CHECK(matched > 0);
  CHECK(mismatched > 0);
}

TEST_CASE("same seed gives byte-identical files") {
  const SyntheticSpec s = small_spec();
  TempDir a, b, d;
  write_synthetic(generate_synthetic(s), a.path());
  write_synthetic(generate_synthetic(s), b.path());
  SyntheticSpec other = s;
  other.seed = s.seed + 1;
  write_synthetic(generate_synthetic(other), d.path());
  for (const char* f : {"embeddings.txt", "features.jsonl", "masks.jsonl", "train_stories.txt",
                        "val_stories.txt", "test_stories.txt", "train_truth.txt", "val_truth.txt",
                        "test_truth.txt"}) {
    CAPTURE(f);
    CHECK(read_file(a / f) == read_file(b / f));
  }
  CHECK(read_file(a / "features.jsonl") != read_file(d / "features.jsonl"));
}

TEST_CASE("written corpus loads back") {
  const SyntheticSpec s = small_spec();
  const SyntheticCorpus c = generate_synthetic(s);
  TempDir dir;
  write_synthetic(c, dir.path());
  const ImageStore store = load_image_features(dir / "features.jsonl");
  CHECK(store.rejected.empty());
  CHECK(store.size() == c.store.size());
  CHECK(store.region_dim() == s.dim);
  const auto masks = load_masks(dir / "masks.jsonl");
  CHECK(masks.size() == c.masks.size());
  for (const auto& m : masks) CHECK_NOTHROW(validate(m, store));
  CHECK(load_stories(dir / "train_stories.txt").size() == s.train_stories);
  CHECK(load_truth(dir / "val_truth.txt") == c.val.truth);
}

TEST_CASE("spec validation") {
  auto bad = [](auto mutate) {
    SyntheticSpec s;
    mutate(s);
    return s;
  };
  CHECK_THROWS_AS(bad([](SyntheticSpec& s) { s.concepts = 17; }).validate(), Error);
  CHECK_THROWS_AS(bad([](SyntheticSpec& s) { s.concepts = 1; }).validate(), Error);
  CHECK_THROWS_AS(bad([](SyntheticSpec& s) { s.sigma = -0.1; }).validate(), Error);
  CHECK_THROWS_AS(bad([](SyntheticSpec& s) { s.sigma = std::nan(""); }).validate(), Error);
  CHECK_THROWS_AS(bad([](SyntheticSpec& s) { s.concepts_per_sentence = 0; }).validate(), Error);
  CHECK_THROWS_AS(bad([](SyntheticSpec& s) { s.concepts_per_sentence = 5; }).validate(), Error);
  CHECK_THROWS_AS(bad([](SyntheticSpec& s) { s.regions_per_image = 2; }).validate(), Error);
  CHECK_THROWS_AS(bad([](SyntheticSpec& s) { s.vocab = 4; }).validate(), Error);
  CHECK_NOTHROW(bad([](SyntheticSpec& s) { s.concepts = 16; }).validate());
  SyntheticSpec over;
  over.concepts = 20;
  CHECK_THROWS_AS(generate_synthetic(over), Error);
}

TEST_CASE("spec json") {
  const SyntheticSpec s = parse_synthetic_spec(
      R"({"concepts": 6, "sigma": 0.1, "train_stories": 7, "context_dependent": true, "seed": 5})");
  CHECK(s.concepts == 6);
  CHECK(s.sigma == 0.1);
  CHECK(s.train_stories == 7);
  CHECK(s.context_dependent);
  CHECK(s.seed == 5);
  CHECK(s.dim == SyntheticSpec{}.dim);
  CHECK_THROWS_AS(parse_synthetic_spec("{"), Error);
  CHECK_THROWS_AS(parse_synthetic_spec("[1]"), Error);
  CHECK_THROWS_AS(parse_synthetic_spec(R"({"concepts": "many"})"), Error);
  CHECK_THROWS_AS(parse_synthetic_spec(R"({"dim": 4})"), Error);
}

TEST_CASE("relevant sets are exactly the images sharing the concept set") {
  const SyntheticSpec s = small_spec();
  const SyntheticCorpus c = generate_synthetic(s);
  for (const SyntheticSplit* split : {&c.train, &c.val, &c.test}) {
    for (const auto& [key, ids] : split->truth) {
      if (key.story_id.rfind("compound", 0) == 0 && key.sentence == 0) continue;
      REQUIRE(!ids.empty());
      CHECK(ids.front() == key.story_id + "_" + std::to_string(key.sentence));
      const ConceptSet want = caption_concepts(c.store.at(ids.front()), s.concepts);
      std::set<std::string> expected;
      for (const auto& img : c.store.records()) {
        if (caption_concepts(img, s.concepts) == want) expected.insert(img.image_id);
      }
      CHECK(std::set<std::string>(ids.begin(), ids.end()) == expected);
      CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == ids.size());
    }
  }
}

TEST_CASE("sentences name the concepts of their paired image") {
  const SyntheticSpec s = small_spec();
  const SyntheticCorpus c = generate_synthetic(s);
  CHECK(c.train.stories.size() == s.train_stories);
  CHECK(c.val.stories.size() == s.val_stories);
  CHECK(c.test.stories.size() == s.test_stories + s.compound_stories);
  for (const Story& story : c.val.stories) {
    REQUIRE(story.sentences.size() == s.sentences_per_story);
    for (std::size_t i = 0; i < story.sentences.size(); ++i) {
      const auto& tokens = story.sentences[i].tokens;
      CHECK(tokens.size() == s.concepts_per_sentence + s.filler_words);
      const auto& paired = c.val.truth.at({story.id, i}).front();
      CHECK(concepts_of(tokens, s.concepts) == caption_concepts(c.store.at(paired), s.concepts));
    }
  }
}

TEST_CASE("compound stories pair each half with its own image") {
  const SyntheticSpec s = small_spec();
  const SyntheticCorpus c = generate_synthetic(s);
  std::size_t seen = 0;
  for (const Story& story : c.test.stories) {
    if (story.id.rfind("compound", 0) != 0) continue;
    ++seen;
    const auto& tokens = story.sentences[0].tokens;
    const auto and_at = std::find(tokens.begin(), tokens.end(), "and");
    REQUIRE(and_at != tokens.end());
    const ConceptSet left = concepts_of({tokens.begin(), and_at}, s.concepts);
    const ConceptSet right = concepts_of({and_at + 1, tokens.end()}, s.concepts);
    const auto& ids = c.test.truth.at({story.id, 0});
    REQUIRE(ids.size() >= 2);
    CHECK(ids[1] == ids[0] + "b");
    CHECK(caption_concepts(c.store.at(ids[0]), s.concepts) == left);
    CHECK(caption_concepts(c.store.at(ids[1]), s.concepts) == right);
    for (const auto& id : ids) {
      const ConceptSet k = caption_concepts(c.store.at(id), s.concepts);
      CHECK((k == left || k == right));
    }
    for (std::size_t k : left) CHECK(right.count(k) == 0);
  }
  CHECK(seen == s.compound_stories);
}

TEST_CASE("context-dependent stories end with a concept-free sentence") {
  SyntheticSpec s = small_spec();
  s.context_dependent = true;
  const SyntheticCorpus c = generate_synthetic(s);
  for (const Story& story : c.train.stories) {
    const std::size_t last = story.sentences.size() - 1;
    CHECK(concepts_of(story.sentences[last].tokens, s.concepts).empty());
    const auto& first_img = c.train.truth.at({story.id, 0}).front();
    const auto& last_img = c.train.truth.at({story.id, last}).front();
    CHECK(caption_concepts(c.store.at(last_img), s.concepts) ==
          caption_concepts(c.store.at(first_img), s.concepts));
  }
}

TEST_CASE("even regions get masks inside their box") {
  const SyntheticSpec s = small_spec();
  const SyntheticCorpus c = generate_synthetic(s);
  const auto& img = c.store.records().front();
  CHECK(img.mask_refs.size() == (s.regions_per_image + 1) / 2);
  for (const auto& m : c.masks) {
    if (m.image_id != img.image_id) continue;
    std::size_t on = 0;
    for (auto p : m.pixels) on += p;
    CHECK(on > 0);
  }
}
