#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "storyseq/encoder.hpp"

using namespace storyseq;

namespace {

// Plain-loop reference implementation of the whole stack.
namespace ref {

Vec affine(const Tensor& w, const Tensor& b, const Vec& x) {
  Vec out(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    double s = b.data.empty() ? 0.0 : b[r];
    for (std::size_t c = 0; c < w.cols; ++c) s += w(r, c) * x[c];
    out[r] = s;
  }
  return out;
}

Vec cat(std::initializer_list<Vec> parts) {
  Vec out;
  for (const Vec& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<Vec> lstm(const std::vector<Vec>& xs, const Tensor& w, const Tensor& b, bool reverse) {
  const std::size_t h = w.rows / 4;
  Vec hs(h, 0.0), cs(h, 0.0);
  std::vector<Vec> out(xs.size());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t t = reverse ? xs.size() - 1 - k : k;
    const Vec z = affine(w, b, cat({xs[t], hs}));
    for (std::size_t j = 0; j < h; ++j) {
      const double i = sig(z[j]), f = sig(z[h + j]), g = std::tanh(z[2 * h + j]), o = sig(z[3 * h + j]);
      cs[j] = f * cs[j] + i * g;
      hs[j] = o * std::tanh(cs[j]);
    }
    out[t] = hs;
  }
  return out;
}

std::vector<Vec> layer(const std::vector<Vec>& xs, const Tensor& fw, const Tensor& fb, const Tensor& bw,
                       const Tensor& bb, const Tensor& mw, const Tensor& mb) {
  const auto f = lstm(xs, fw, fb, false), b = lstm(xs, bw, bb, true);
  std::vector<Vec> out;
  for (std::size_t t = 0; t < xs.size(); ++t) out.push_back(affine(mw, mb, cat({f[t], b[t], xs[t]})));
  return out;
}

Vec mean(const std::vector<Vec>& vs) {
  Vec m(vs[0].size(), 0.0);
  for (const Vec& v : vs)
    for (std::size_t i = 0; i < v.size(); ++i) m[i] += v[i];
  for (double& x : m) x /= static_cast<double>(vs.size());
  return m;
}

double mlp_score(const Tensor& w, const Tensor& b, const Tensor& v, const Vec& a, const Vec& c) {
  Vec hidden = affine(w, b, cat({a, c}));
  double s = 0;
  for (std::size_t i = 0; i < hidden.size(); ++i) s += v[i] * std::max(0.0, hidden[i]);
  return s;
}

std::vector<std::vector<Vec>> encode(const EmbeddedStory& words, const ModelParams& p, Variant variant) {
  const ParamTensors& t = p.t;
  std::vector<std::vector<Vec>> hs;
  std::vector<Vec> means;
  for (const auto& s : words) {
    hs.push_back(layer(s, t.sent_fwd_w, t.sent_fwd_b, t.sent_bwd_w, t.sent_bwd_b, t.sent_merge_w, t.sent_merge_b));
    means.push_back(mean(hs.back()));
  }
  std::vector<std::vector<Vec>> xs;
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::vector<Vec> z_in;
    if (variant == Variant::no_context) {
      z_in = hs[i];
    } else {
      std::vector<Vec> fused;
      for (const Vec& h : hs[i]) {
        Vec c(h.size(), 0.0);
        if (variant == Variant::cadm) {
          Vec e;
          for (const Vec& m : means) e.push_back(mlp_score(t.attn_w, t.attn_b, t.attn_v, h, m));
          double mx = e[0], z = 0;
          for (double x : e) mx = std::max(mx, x);
          for (double& x : e) z += (x = std::exp(x - mx));
          for (std::size_t k = 0; k < means.size(); ++k)
            for (std::size_t d = 0; d < c.size(); ++d) c[d] += e[k] / z * means[k][d];
        } else if (means.size() == 1) {
          c = means[0];
        } else {
          std::vector<Vec> others;
          for (std::size_t k = 0; k < means.size(); ++k)
            if (k != i) others.push_back(means[k]);
          c = mean(others);
        }
        const double g = sig(mlp_score(t.gate_w, t.gate_b, t.gate_v, h, c));
        Vec zh(h.size());
        for (std::size_t d = 0; d < h.size(); ++d) zh[d] = g * h[d] + (1 - g) * c[d];
        fused.push_back(zh);
      }
      z_in = layer(fused, t.story_fwd_w, t.story_fwd_b, t.story_bwd_w, t.story_bwd_b, t.story_merge_w,
                   t.story_merge_b);
    }
    std::vector<Vec> x;
    for (const Vec& z : z_in) x.push_back(affine(t.proj_w, t.proj_b, z));
    xs.push_back(x);
  }
  return xs;
}

}  // namespace ref

Vec random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Vec v(n);
  for (double& x : v) x = d(rng);
  return v;
}

EmbeddedStory random_story(std::mt19937_64& rng, std::size_t dim, std::size_t sentences) {
  EmbeddedStory s(sentences);
  for (auto& sent : s) {
    const std::size_t n = 1 + rng() % 4;
    for (std::size_t i = 0; i < n; ++i) sent.push_back(random_vec(dim, rng));
  }
  return s;
}

double max_diff(const Vec& a, const Vec& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

ModelParams small_params(std::uint64_t seed, double scale = 0.5) {
  return init_params({4, 4, 5, 6, 3}, seed, scale);
}

}  // namespace

TEST_CASE("bilstm matches the step-by-step recurrence") {
  std::mt19937_64 rng(1);
  const ModelParams p = small_params(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec> xs;
    for (std::size_t i = 0, n = 1 + rng() % 5; i < n; ++i) xs.push_back(random_vec(4, rng));
    const auto got = bilstm_layer(xs, {p.t.sent_fwd_w, p.t.sent_fwd_b}, {p.t.sent_bwd_w, p.t.sent_bwd_b});
    const auto f = ref::lstm(xs, p.t.sent_fwd_w, p.t.sent_fwd_b, false);
    const auto b = ref::lstm(xs, p.t.sent_bwd_w, p.t.sent_bwd_b, true);
    REQUIRE(got.forward.size() == xs.size());
    for (std::size_t t = 0; t < xs.size(); ++t) {
      CHECK(max_diff(got.forward[t], f[t]) < 1e-6);
      CHECK(max_diff(got.backward[t], b[t]) < 1e-6);
    }
  }
}

TEST_CASE("bilstm base cases") {
  const Tensor zw(8, 3), zb(8, 1);
  const std::vector<Vec> xs = {{1.0}, {-2.0}, {0.5}};
  const auto zero = bilstm_layer(xs, {zw, zb}, {zw, zb});
  for (const Vec& h : zero.forward) CHECK(h == Vec{0, 0});
  for (const Vec& h : zero.backward) CHECK(h == Vec{0, 0});

  // length 1: one cell step from zero state, by hand for a 1-unit cell
  Tensor w(4, 2), b(4, 1);
  w(0, 0) = 0.5;   // input gate
  w(2, 0) = 1.0;   // candidate
  w(3, 0) = -0.3;  // output gate
  b[1] = 1.0;
  const auto one = bilstm_layer(std::vector<Vec>{{2.0}}, {w, b}, {w, b});
  const double c = ref::sig(1.0) * std::tanh(2.0);
  const double h = ref::sig(-0.6) * std::tanh(c);
  CHECK(one.forward[0][0] == doctest::Approx(h).epsilon(1e-12));
  CHECK(one.backward[0][0] == doctest::Approx(h).epsilon(1e-12));

  CHECK_THROWS_AS(bilstm_layer(std::vector<Vec>{}, {w, b}, {w, b}), Error);
  CHECK_THROWS_AS(bilstm_layer(std::vector<Vec>{{1.0, 2.0}}, {w, b}, {w, b}), Error);
}

TEST_CASE("sentence encoding and its mean") {
  const ModelParams p = small_params(5);
  EmbeddingTable emb(4);
  emb.set("a", {0.3, -0.2, 0.9, 0.1});
  emb.set("b", {-1, 0.5, 0, 2});

  const auto one = encode_sentence(Sentence{{"a"}}, emb, p);
  CHECK(one.mean == one.words[0]);

  const auto aa = encode_sentence(Sentence{{"a", "a"}}, emb, p);
  CHECK(aa.words[0] != aa.words[1]);
  for (std::size_t d = 0; d < 4; ++d) CHECK(aa.mean[d] == (aa.words[0][d] + aa.words[1][d]) / 2);

  const std::vector<Vec> xs = {emb.lookup("b"), emb.lookup("a"), emb.lookup("zzz")};
  const auto got = encode_sentence(Sentence{{"b", "a", "zzz"}}, emb, p);
  const auto want = ref::layer(xs, p.t.sent_fwd_w, p.t.sent_fwd_b, p.t.sent_bwd_w, p.t.sent_bwd_b,
                               p.t.sent_merge_w, p.t.sent_merge_b);
  for (std::size_t t = 0; t < 3; ++t) CHECK(max_diff(got.words[t], want[t]) < 1e-6);
  CHECK_THROWS_AS(encode_sentence(Sentence{}, emb, p), Error);
}

TEST_CASE("attention softmax examples") {
  ModelParams p = init_params({2, 2, 1, 2, 2}, 1);
  const Vec h = {0.4, -0.7};

  const auto single = cross_attention(h, std::vector<Vec>{{1.0, 2.0}}, p);
  CHECK(single.weights == Vec{1.0});
  CHECK(single.context == Vec{1.0, 2.0});

  const auto same = cross_attention(h, std::vector<Vec>{{1, 1}, {1, 1}, {1, 1}, {1, 1}}, p);
  for (double a : same.weights) CHECK(a == doctest::Approx(0.25));

  // One hidden unit reading the second coordinate of the sentence mean:
  // e_k = relu(m_k[1]) so means with m[1] = 0, ln2, ln4 give e = (0, ln2, ln4).
  p.t.attn_w = Tensor(1, 4);
  p.t.attn_w(0, 3) = 1.0;
  p.t.attn_b = Tensor(1, 1);
  p.t.attn_v = Tensor(1, 1, 1.0);
  const std::vector<Vec> means = {{3.0, 0.0}, {-1.0, std::log(2.0)}, {0.0, std::log(4.0)}};
  const auto a = cross_attention(h, means, p);
  CHECK(a.logits[1] == doctest::Approx(std::log(2.0)));
  CHECK(a.weights[0] == doctest::Approx(1.0 / 7));
  CHECK(a.weights[1] == doctest::Approx(2.0 / 7));
  CHECK(a.weights[2] == doctest::Approx(4.0 / 7));
  CHECK(a.context[0] == doctest::Approx(3.0 / 7 - 2.0 / 7));
  CHECK_THROWS_AS(cross_attention(h, std::vector<Vec>{}, p), Error);
}

TEST_CASE("gate examples") {
  ModelParams p = init_params({2, 2, 1, 2, 2}, 1);
  const auto eq = context_gate(Vec{0.3, -0.8}, Vec{0.3, -0.8}, p);
  CHECK(eq.fused == Vec{0.3, -0.8});

  // pre-activation = v * relu(b) with all weights zero
  p.t.gate_w = Tensor(1, 4);
  p.t.gate_v = Tensor(1, 1, 1.0);
  p.t.gate_b = Tensor(1, 1, 20.0);
  const auto sat = context_gate(Vec{1, 2}, Vec{-5, 7}, p);
  CHECK(sat.gate > 0.999999);
  CHECK(std::abs(sat.fused[0] - 1) < 1e-5);
  CHECK(std::abs(sat.fused[1] - 2) < 1e-5);

  // g = 0.25 needs pre-activation -ln 3, reached through a negative v
  p.t.gate_b = Tensor(1, 1, std::log(3.0));
  p.t.gate_v = Tensor(1, 1, -1.0);
  const auto q = context_gate(Vec{1, 0}, Vec{0, 1}, p);
  CHECK(q.gate == doctest::Approx(0.25));
  CHECK(q.fused[0] == doctest::Approx(0.25));
  CHECK(q.fused[1] == doctest::Approx(0.75));
  CHECK_THROWS_AS(context_gate(Vec{1}, Vec{1, 2}, p), Error);
}

TEST_CASE("full story encoding matches the reference for every variant") {
  std::mt19937_64 rng(7);
  for (Variant v : {Variant::cadm, Variant::fixed_context, Variant::no_context}) {
    for (int trial = 0; trial < 8; ++trial) {
      const ModelParams p = small_params(100 + trial);
      const auto story = random_story(rng, 4, 1 + rng() % 4);
      const EncodedStory got = encode_story(story, p, v);
      const auto want = ref::encode(story, p, v);
      REQUIRE(got.sentences.size() == story.size());
      for (std::size_t i = 0; i < story.size(); ++i) {
        const auto& s = got.sentences[i];
        REQUIRE(s.x.size() == story[i].size());
        for (std::size_t t = 0; t < s.x.size(); ++t) {
          CHECK(s.x[t].size() == 6);
          CHECK(max_diff(s.x[t], want[i][t]) < 1e-6);
        }
        if (v == Variant::no_context) {
          CHECK(s.gate.empty());
          CHECK(s.context.empty());
          continue;
        }
        CHECK(s.gate.size() == s.x.size());
        CHECK(s.z.size() == s.x.size());
        for (double g : s.gate) CHECK((g > 0 && g < 1));
        for (const Vec& a : s.attention) {
          double sum = 0;
          for (double x : a) {
            CHECK(x >= 0);
            sum += x;
          }
          CHECK(std::abs(sum - 1) < 1e-6);
        }
      }
    }
  }
}

TEST_CASE("single sentence: attention context is the sentence's own mean") {
  std::mt19937_64 rng(2);
  const ModelParams p = small_params(4);
  const auto story = random_story(rng, 4, 1);
  for (Variant v : {Variant::cadm, Variant::fixed_context}) {
    const auto enc = encode_story(story, p, v);
    for (const Vec& c : enc.sentences[0].context) CHECK(c == enc.sentences[0].mean);
  }
}

TEST_CASE("identical sentences: attention context equals the fixed average") {
  std::mt19937_64 rng(3);
  const ModelParams p = small_params(6);
  auto one = random_story(rng, 4, 1);
  const EmbeddedStory story = {one[0], one[0], one[0]};
  const auto cadm = encode_story(story, p, Variant::cadm);
  const auto fixed = encode_story(story, p, Variant::fixed_context);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t t = 0; t < story[i].size(); ++t)
      CHECK(max_diff(cadm.sentences[i].context[t], fixed.sentences[i].context[t]) < 1e-6);
}

TEST_CASE("no_context is local to each sentence") {
  std::mt19937_64 rng(4);
  const ModelParams p = small_params(8);
  auto story = random_story(rng, 4, 3);
  const auto base = encode_story(story, p, Variant::no_context);
  auto edited = story;
  std::swap(edited[0], edited[2]);
  edited[0].push_back(random_vec(4, rng));
  const auto after = encode_story(edited, p, Variant::no_context);
  CHECK(after.sentences[1].x == base.sentences[1].x);
  CHECK(after.sentences[2].x == base.sentences[0].x);

  const auto cadm = encode_story(story, p, Variant::cadm);
  const auto cadm_after = encode_story(edited, p, Variant::cadm);
  CHECK(cadm.sentences[1].x != cadm_after.sentences[1].x);
}

TEST_CASE("lean mode, determinism and input checks") {
  std::mt19937_64 rng(5);
  const ModelParams p = small_params(9);
  const auto story = random_story(rng, 4, 2);
  const auto full = encode_story(story, p, Variant::cadm);
  const auto lean = encode_story(story, p, Variant::cadm, false);
  CHECK(lean.sentences[0].x == full.sentences[0].x);
  CHECK(lean.sentences[0].h.empty());
  CHECK(encode_story(story, p, Variant::cadm).sentences[1].x == full.sentences[1].x);

  CHECK_THROWS_AS(encode_story(EmbeddedStory{}, p, Variant::cadm), Error);
  CHECK_THROWS_AS(encode_story(EmbeddedStory{{}}, p, Variant::cadm), Error);
  EmbeddingTable wrong(3);
  CHECK_THROWS_AS(encode_story(make_story("s", {"a b"}), wrong, p, Variant::cadm), Error);
}

TEST_CASE("image projection") {
  ModelParams p = init_params({2, 2, 2, 3, 3}, 1);
  ImageRecord r;
  r.image_id = "img";
  r.width = r.height = 10;
  r.regions = {{{0, 0, 1, 1}, {1.5, -2, 0.25}}, {{1, 1, 1, 1}, {0, 0, 0}}};

  p.t.region_w = Tensor(3, 3);
  for (std::size_t i = 0; i < 3; ++i) p.t.region_w(i, i) = 1.0;
  p.t.region_b = Tensor(3, 1);
  CHECK(encode_image(r, p).regions[0] == r.regions[0].feature);

  p.t.region_b.data = {0.1, 0.2, 0.3};
  CHECK(encode_image(r, p).regions[1] == Vec{0.1, 0.2, 0.3});

  const ModelParams q = init_params({2, 2, 2, 3, 3}, 11, 0.5);
  const auto enc = encode_image(r, q);
  REQUIRE(enc.regions.size() == 2);
  for (std::size_t k = 0; k < 2; ++k)
    CHECK(max_diff(enc.regions[k], ref::affine(q.t.region_w, q.t.region_b, r.regions[k].feature)) < 1e-12);

  r.regions[1].feature = {1.0};
  CHECK_THROWS_AS(encode_image(r, q), Error);
}
