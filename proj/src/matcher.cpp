#include "storyseq/matcher.hpp"

#include <string>

namespace storyseq {
namespace {

double cosine_with_norms(std::span<const double> u, double nu, std::span<const double> v, double nv) {
  if (nu < kNormEpsilon || nv < kNormEpsilon) return 0.0;
  return dot(u, v) / (nu * nv);
}

void check_dims(std::span<const Vec> words, std::span<const Vec> regions) {
  if (words.empty()) throw Error("dense_similarity: no word vectors");
  if (regions.empty()) throw Error("dense_similarity: no region vectors");
  const std::size_t d = words[0].size();
  for (const Vec& w : words) {
    if (w.size() != d) throw Error("dense_similarity: word vectors differ in width");
  }
  for (const Vec& r : regions) {
    if (r.size() != d) {
      throw Error("dense_similarity: region width " + std::to_string(r.size()) +
                  " does not match word width " + std::to_string(d));
    }
  }
}

DenseMatch dense_with_norms(std::span<const Vec> words, std::span<const double> word_norms,
                            std::span<const Vec> regions, std::span<const double> region_norms) {
  DenseMatch m;
  m.grounding.reserve(words.size());
  double total = 0.0;
  for (std::size_t t = 0; t < words.size(); ++t) {
    Grounding best{0, cosine_with_norms(words[t], word_norms[t], regions[0], region_norms[0])};
    for (std::size_t k = 1; k < regions.size(); ++k) {
      const double s = cosine_with_norms(words[t], word_norms[t], regions[k], region_norms[k]);
      if (s > best.similarity) best = {k, s};
    }
    total += best.similarity;
    m.grounding.push_back(best);
  }
  m.score = total / static_cast<double>(words.size());
  return m;
}

std::vector<double> norms_of(std::span<const Vec> vs) {
  std::vector<double> out;
  out.reserve(vs.size());
  for (const Vec& v : vs) out.push_back(norm(v));
  return out;
}

}  // namespace

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw Error("cosine: dimension mismatch " + std::to_string(u.size()) + " vs " +
                std::to_string(v.size()));
  }
  return cosine_with_norms(u, norm(u), v, norm(v));
}

DenseMatch dense_similarity(std::span<const Vec> words, std::span<const Vec> regions) {
  check_dims(words, regions);
  return dense_with_norms(words, norms_of(words), regions, norms_of(regions));
}

double phrase_similarity(std::span<const Vec> phrase_words, std::span<const Vec> regions) {
  return dense_similarity(phrase_words, regions).score;
}

ScoreMatrix score_batch(const EncodedStory& story, std::span<const EncodedImage> images,
                        std::size_t threads) {
  if (images.empty()) throw Error("score_batch: no images");
  ScoreMatrix m;
  m.rows = story.sentences.size();
  m.cols = images.size();
  m.scores.assign(m.rows * m.cols, 0.0);
  m.groundings.assign(m.rows * m.cols, {});

  std::vector<std::vector<double>> word_norms;
  for (const auto& s : story.sentences) {
    if (!s.x.empty()) check_dims(s.x, images[0].regions);
    word_norms.push_back(norms_of(s.x));
  }
  std::vector<std::vector<double>> region_norms(images.size());
  for (std::size_t j = 0; j < images.size(); ++j) {
    if (!story.sentences.empty()) check_dims(story.sentences[0].x, images[j].regions);
    region_norms[j] = norms_of(images[j].regions);
  }
  parallel_for(m.cols, threads, [&](std::size_t j) {
    for (std::size_t i = 0; i < m.rows; ++i) {
      DenseMatch dm = dense_with_norms(story.sentences[i].x, word_norms[i], images[j].regions,
                                       region_norms[j]);
      m.scores[i * m.cols + j] = dm.score;
      m.groundings[i * m.cols + j] = std::move(dm.grounding);
    }
  });
  return m;
}

namespace graph {

ad::Var dense_similarity(ad::Graph& g, std::span<const ad::Var> words,
                         std::span<const ad::Var> regions) {
  std::vector<Vec> wv, rv;
  for (ad::Var w : words) wv.push_back(g.value(w).to_vec());
  for (ad::Var r : regions) rv.push_back(g.value(r).to_vec());
  check_dims(wv, rv);
  const auto wn = norms_of(wv);
  const auto rn = norms_of(rv);
  DenseMatch m = dense_with_norms(wv, wn, rv, rn);
  for (const Grounding& gr : m.grounding) g.record_decision(static_cast<std::int64_t>(gr.region));

  std::vector<ad::Var> inputs(words.begin(), words.end());
  inputs.insert(inputs.end(), regions.begin(), regions.end());
  std::vector<ad::Var> ws(words.begin(), words.end());
  std::vector<ad::Var> rs(regions.begin(), regions.end());
  return g.custom(inputs, Tensor(1, 1, m.score),
                  [ws, rs, grounding = std::move(m.grounding)](ad::Graph& g, const Tensor& og) {
                    const double scale = og[0] / static_cast<double>(ws.size());
                    for (std::size_t t = 0; t < ws.size(); ++t) {
                      const Tensor& u = g.value(ws[t]);
                      const Tensor& v = g.value(rs[grounding[t].region]);
                      const double nu = norm(u.span());
                      const double nv = norm(v.span());
                      if (nu < kNormEpsilon || nv < kNormEpsilon) continue;
                      const double c = grounding[t].similarity;
                      // d cos / du = v / (|u||v|) - cos * u / |u|^2, symmetric in v.
                      if (g.requires_grad(ws[t])) {
                        Tensor& gu = g.grad_ref(ws[t]);
                        for (std::size_t i = 0; i < u.size(); ++i) {
                          gu[i] += scale * (v[i] / (nu * nv) - c * u[i] / (nu * nu));
                        }
                      }
                      const ad::Var rv = rs[grounding[t].region];
                      if (g.requires_grad(rv)) {
                        Tensor& gv = g.grad_ref(rv);
                        for (std::size_t i = 0; i < v.size(); ++i) {
                          gv[i] += scale * (u[i] / (nu * nv) - c * v[i] / (nv * nv));
                        }
                      }
                    }
                  });
}

}  // namespace graph
}  // namespace storyseq
