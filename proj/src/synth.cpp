#include "storyseq/synth.hpp"

#include <algorithm>
#include <map>
#include <random>

#include "json.hpp"

namespace storyseq {

namespace {

const char* const kFillers[] = {"the", "a", "it", "was", "so", "very"};
constexpr std::size_t kFillerCount = std::size(kFillers);

using ConceptSet = std::vector<std::size_t>;  // sorted

std::string word_name(std::size_t w) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "w%02zu", w);
  return buf;
}

class Generator {
 public:
  explicit Generator(const SyntheticSpec& spec) : spec_(spec), rng_(spec.seed) {}

  SyntheticCorpus run() {
    SyntheticCorpus c;
    c.embeddings = EmbeddingTable(spec_.dim);
    for (std::size_t w = 0; w < spec_.vocab; ++w) {
      c.embeddings.set(word_name(w), direction(w % spec_.concepts));
    }
    for (std::size_t f = 0; f < kFillerCount; ++f) {
      // Fillers live off the concept subspace when there is room.
      const std::size_t free_dims = spec_.dim - spec_.concepts;
      c.embeddings.set(kFillers[f], free_dims ? direction(spec_.concepts + f % free_dims)
                                              : noise_vector(1.0));
    }
    for (std::size_t c_ = 0; c_ < spec_.concepts; ++c_) {
      for (std::size_t w = c_; w < spec_.vocab; w += spec_.concepts) synonyms_[c_].push_back(w);
    }

    make_split("train", spec_.train_stories, 0, c.train);
    make_split("val", spec_.val_stories, 0, c.val);
    make_split("test", spec_.test_stories, spec_.compound_stories, c.test);

    std::map<ConceptSet, std::vector<std::string>> classes;
    for (const auto& [id, set] : image_sets_) classes[set].push_back(id);
    for (SyntheticSplit* split : {&c.train, &c.val, &c.test}) {
      for (auto& [key, ids] : split->truth) {
        std::vector<std::string> full = ids;
        for (const auto& paired : ids) {
          for (const auto& other : classes[image_sets_.at(paired)]) {
            if (std::find(full.begin(), full.end(), other) == full.end()) full.push_back(other);
          }
        }
        ids = std::move(full);
      }
    }
    c.store = ImageStore(spec_.dim, std::move(images_));
    c.masks = std::move(masks_);
    return c;
  }

 private:
  Vec noise_vector(double scale) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vec v(spec_.dim);
    for (double& x : v) x = scale * n(rng_);
    return v;
  }

  Vec direction(std::size_t axis) {
    Vec v = noise_vector(spec_.sigma);
    v[axis] += 1.0;
    return v;
  }

  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

  ConceptSet draw_set(std::size_t size, const ConceptSet& exclude = {}) {
    ConceptSet pool;
    for (std::size_t c = 0; c < spec_.concepts; ++c) {
      if (std::find(exclude.begin(), exclude.end(), c) == exclude.end()) pool.push_back(c);
    }
    std::shuffle(pool.begin(), pool.end(), rng_);
    pool.resize(size);
    std::sort(pool.begin(), pool.end());
    return pool;
  }

  std::vector<std::string> concept_words(const ConceptSet& set) {
    std::vector<std::string> words;
    for (std::size_t c : set) words.push_back(word_name(synonyms_[c][pick(synonyms_[c].size())]));
    return words;
  }

  std::string fillers(std::size_t n) {
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
      if (i) out += ' ';
      out += kFillers[pick(kFillerCount)];
    }
    return out;
  }

  std::string sentence_text(const ConceptSet& set) {
    std::vector<std::string> words = concept_words(set);
    for (std::size_t f = 0; f < spec_.filler_words; ++f) {
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(pick(words.size() + 1)),
                   kFillers[pick(kFillerCount)]);
    }
    std::string out;
    for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
    return out;
  }

  std::string caption(const ConceptSet& set) {
    std::vector<std::string> words;
    for (std::size_t c : set) {
      auto syn = synonyms_[c];
      std::shuffle(syn.begin(), syn.end(), rng_);
      for (std::size_t k = 0; k < std::min<std::size_t>(2, syn.size()); ++k) {
        words.push_back(word_name(syn[k]));
      }
    }
    std::shuffle(words.begin(), words.end(), rng_);
    std::string out = fillers(1);
    for (const auto& w : words) out += " " + w;
    return out;
  }

  void add_image(const std::string& id, const ConceptSet& set) {
    const std::size_t r = spec_.regions_per_image;
    ConceptSet slots = set;
    slots.resize(r, spec_.concepts);  // sentinel: background
    std::shuffle(slots.begin(), slots.end(), rng_);
    ImageRecord img;
    img.image_id = id;
    img.width = spec_.image_width;
    img.height = spec_.image_height;
    img.caption = caption(set);
    const double bw = std::floor(static_cast<double>(img.width) / static_cast<double>(r));
    const double top = std::floor(img.height / 4.0), bh = std::floor(img.height / 2.0);
    for (std::size_t k = 0; k < r; ++k) {
      RegionFeature reg;
      reg.bbox = {bw * static_cast<double>(k), top, bw, bh};
      reg.feature = slots[k] < spec_.concepts ? direction(slots[k]) : noise_vector(0.5);
      if (k % 2 == 0) {
        InstanceMask m;
        m.mask_id = id + "_m" + std::to_string(k);
        m.image_id = id;
        m.label = slots[k] < spec_.concepts ? "concept" + std::to_string(slots[k]) : "background";
        m.width = img.width;
        m.height = img.height;
        m.pixels.assign(static_cast<std::size_t>(m.width) * m.height, 0);
        const double cx = reg.bbox.x + reg.bbox.w / 2, cy = reg.bbox.y + reg.bbox.h / 2;
        const double rx = reg.bbox.w / 2, ry = reg.bbox.h / 2;
        for (int y = 0; y < m.height; ++y) {
          for (int x = 0; x < m.width; ++x) {
            const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) m.pixels[static_cast<std::size_t>(y) * m.width + x] = 1;
          }
        }
        img.mask_refs.push_back(m.mask_id);
        masks_.push_back(std::move(m));
      }
      img.regions.push_back(std::move(reg));
    }
    image_sets_[id] = set;
    images_.push_back(std::move(img));
  }

  void make_split(const std::string& name, std::size_t count, std::size_t compound,
                  SyntheticSplit& out) {
    char buf[32];
    for (std::size_t s = 0; s < count + compound; ++s) {
      const bool is_compound = s >= count;
      std::snprintf(buf, sizeof(buf), "%s%04zu", is_compound ? "compound" : name.c_str(),
                    is_compound ? s - count : s);
      const std::string story_id = buf;
      std::vector<std::string> sentences;
      std::vector<ConceptSet> sets;
      for (std::size_t i = 0; i < spec_.sentences_per_story; ++i) {
        const std::string image_id = story_id + "_" + std::to_string(i);
        if (is_compound && i == 0) {
          const ConceptSet a = draw_set(spec_.concepts_per_sentence);
          const ConceptSet b = draw_set(spec_.concepts_per_sentence, a);
          std::string text;
          for (const auto& w : concept_words(a)) text += w + " ";
          text += "and";
          for (const auto& w : concept_words(b)) text += " " + w;
          sentences.push_back(text);
          add_image(image_id, a);
          add_image(image_id + "b", b);
          out.truth[{story_id, i}] = {image_id, image_id + "b"};
          sets.push_back(a);
          continue;
        }
        ConceptSet set;
        const bool last = i + 1 == spec_.sentences_per_story && i > 0;
        if (spec_.context_dependent && last) {
          set = sets.front();
          sentences.push_back(fillers(spec_.concepts_per_sentence + spec_.filler_words));
        } else {
          set = draw_set(spec_.concepts_per_sentence);
          sentences.push_back(sentence_text(set));
        }
        add_image(image_id, set);
        out.truth[{story_id, i}] = {image_id};
        sets.push_back(set);
      }
      out.stories.push_back(make_story(story_id, sentences));
    }
  }

  const SyntheticSpec& spec_;
  std::mt19937_64 rng_;
  std::map<std::size_t, std::vector<std::size_t>> synonyms_;
  std::vector<ImageRecord> images_;
  std::vector<InstanceMask> masks_;
  std::map<std::string, ConceptSet> image_sets_;
};

}  // namespace

void SyntheticSpec::validate() const {
  if (concepts < 2) throw Error("synthetic spec: need at least 2 concepts");
  if (concepts > dim) throw Error("synthetic spec: concept count exceeds dimension");
  if (vocab < concepts) throw Error("synthetic spec: vocab smaller than concept count");
  if (!(sigma >= 0.0)) throw Error("synthetic spec: sigma must be non-negative");
  if (concepts_per_sentence == 0 || 2 * concepts_per_sentence > concepts) {
    throw Error("synthetic spec: concepts_per_sentence must be in [1, concepts/2]");
  }
  if (regions_per_image < concepts_per_sentence) {
    throw Error("synthetic spec: regions_per_image below concepts_per_sentence");
  }
  if (sentences_per_story == 0) throw Error("synthetic spec: empty stories");
  if (image_width < static_cast<int>(regions_per_image) || image_height < 4) {
    throw Error("synthetic spec: image too small");
  }
}

SyntheticSpec parse_synthetic_spec(std::string_view json_text) {
  SyntheticSpec s;
  try {
    const auto j = nlohmann::json::parse(json_text);
    if (!j.is_object()) throw Error("synthetic spec: expected a JSON object");
    s.vocab = j.value("vocab", s.vocab);
    s.concepts = j.value("concepts", s.concepts);
    s.concepts_per_sentence = j.value("concepts_per_sentence", s.concepts_per_sentence);
    s.filler_words = j.value("filler_words", s.filler_words);
    s.sentences_per_story = j.value("sentences_per_story", s.sentences_per_story);
    s.regions_per_image = j.value("regions_per_image", s.regions_per_image);
    s.sigma = j.value("sigma", s.sigma);
    s.dim = j.value("dim", s.dim);
    s.train_stories = j.value("train_stories", s.train_stories);
    s.val_stories = j.value("val_stories", s.val_stories);
    s.test_stories = j.value("test_stories", s.test_stories);
    s.compound_stories = j.value("compound_stories", s.compound_stories);
    s.context_dependent = j.value("context_dependent", s.context_dependent);
    s.image_width = j.value("image_width", s.image_width);
    s.image_height = j.value("image_height", s.image_height);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
  return parse_synthetic_spec(read_file(path));
}

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  return Generator(spec).run();
}

void write_synthetic(const SyntheticCorpus& c, const std::filesystem::path& dir) {
  save_embeddings(c.embeddings, dir / "embeddings.txt");
  save_image_features(c.store, dir / "features.jsonl");
  save_masks(c.masks, dir / "masks.jsonl");
  const std::pair<const char*, const SyntheticSplit*> splits[] = {
      {"train", &c.train}, {"val", &c.val}, {"test", &c.test}};
  for (const auto& [name, split] : splits) {
    save_stories(split->stories, dir / (std::string(name) + "_stories.txt"));
    save_truth(split->truth, dir / (std::string(name) + "_truth.txt"));
  }
}

}  // namespace storyseq
