#include "storyseq/encoder.hpp"

namespace storyseq {
namespace graph {
namespace {

std::size_t hidden_of(const ad::Graph& g, LstmVars lstm) {
  const Tensor& w = g.value(lstm.w);
  if (w.rows % 4 != 0 || g.value(lstm.b).rows != w.rows) {
    throw Error("lstm: weight rows must be 4 x hidden and match the bias");
  }
  return w.rows / 4;
}

// Standard LSTM cell: gates = W [x; h] + b split as (input, forget, candidate, output).
std::pair<ad::Var, ad::Var> lstm_step(ad::Graph& g, LstmVars lstm, std::size_t hidden, ad::Var x,
                                      ad::Var h, ad::Var c) {
  if (g.value(lstm.w).cols != g.value(x).rows + hidden) {
    throw Error("lstm: input width " + std::to_string(g.value(x).rows) +
                " does not match weights");
  }
  const ad::Var xh[] = {x, h};
  const ad::Var z = g.linear(lstm.w, lstm.b, g.concat(xh));
  const ad::Var in = g.sigmoid(g.slice(z, 0, hidden));
  const ad::Var forget = g.sigmoid(g.slice(z, hidden, hidden));
  const ad::Var cand = g.tanh(g.slice(z, 2 * hidden, hidden));
  const ad::Var out = g.sigmoid(g.slice(z, 3 * hidden, hidden));
  const ad::Var c_next = g.add(g.mul(forget, c), g.mul(in, cand));
  const ad::Var h_next = g.mul(out, g.tanh(c_next));
  return {h_next, c_next};
}

// W [fwd; bwd; input] + b over every position.
std::vector<ad::Var> merge(ad::Graph& g, ad::Var w, ad::Var b, std::span<const ad::Var> inputs,
                           const std::vector<ad::Var>& fwd, const std::vector<ad::Var>& bwd) {
  std::vector<ad::Var> out;
  out.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const ad::Var parts[] = {fwd[t], bwd[t], inputs[t]};
    out.push_back(g.linear(w, b, g.concat(parts)));
  }
  return out;
}

}  // namespace

ParamVars bind(ad::Graph& g, const ModelParams& params, bool trainable) {
  check_shapes(params);
  ParamVars vars;
  visit_pair(vars, params.t, [&](std::string_view, ad::Var& v, const Tensor& t) {
    v = trainable ? g.param_ref(t) : g.constant_ref(t);
  });
  return vars;
}

std::pair<std::vector<ad::Var>, std::vector<ad::Var>> bilstm(ad::Graph& g,
                                                             std::span<const ad::Var> inputs,
                                                             LstmVars fwd, LstmVars bwd) {
  if (inputs.empty()) throw Error("bilstm: empty input sequence");
  const std::size_t hf = hidden_of(g, fwd);
  const std::size_t hb = hidden_of(g, bwd);
  const std::size_t n = inputs.size();
  std::vector<ad::Var> fs(n), bs(n);
  ad::Var h = g.constant(Tensor(hf, 1));
  ad::Var c = g.constant(Tensor(hf, 1));
  for (std::size_t t = 0; t < n; ++t) {
    std::tie(h, c) = lstm_step(g, fwd, hf, inputs[t], h, c);
    fs[t] = h;
  }
  h = g.constant(Tensor(hb, 1));
  c = g.constant(Tensor(hb, 1));
  for (std::size_t t = n; t-- > 0;) {
    std::tie(h, c) = lstm_step(g, bwd, hb, inputs[t], h, c);
    bs[t] = h;
  }
  return {std::move(fs), std::move(bs)};
}

SentenceNodes sentence_layer(ad::Graph& g, const ParamVars& p, std::span<const ad::Var> words) {
  auto [fwd, bwd] = bilstm(g, words, {p.sent_fwd_w, p.sent_fwd_b}, {p.sent_bwd_w, p.sent_bwd_b});
  SentenceNodes out;
  out.h = merge(g, p.sent_merge_w, p.sent_merge_b, words, fwd, bwd);
  out.mean = g.mean(out.h);
  return out;
}

AttentionNodes cross_attention(ad::Graph& g, const ParamVars& p, ad::Var word_state,
                               std::span<const ad::Var> means) {
  if (means.empty()) throw Error("cross_attention: no sentence means");
  std::vector<ad::Var> logits;
  logits.reserve(means.size());
  for (ad::Var m : means) {
    const ad::Var pair[] = {word_state, m};
    const ad::Var hidden = g.relu(g.linear(p.attn_w, p.attn_b, g.concat(pair)));
    logits.push_back(g.dot(p.attn_v, hidden));
  }
  AttentionNodes out;
  out.logits = g.stack(logits);
  out.weights = g.softmax(out.logits);
  out.context = g.weighted_sum(out.weights, means);
  return out;
}

GateNodes context_gate(ad::Graph& g, const ParamVars& p, ad::Var word_state, ad::Var context) {
  const ad::Var pair[] = {word_state, context};
  const ad::Var hidden = g.relu(g.linear(p.gate_w, p.gate_b, g.concat(pair)));
  GateNodes out;
  out.gate = g.sigmoid(g.dot(p.gate_v, hidden));
  out.fused = g.lerp(out.gate, word_state, context);
  return out;
}

std::vector<StorySentenceNodes> story(ad::Graph& g, const ParamVars& p, const EmbeddedStory& words,
                                      Variant variant) {
  if (words.empty()) throw Error("encode_story: story has no sentences");
  const std::size_t n_sent = words.size();
  std::vector<StorySentenceNodes> out(n_sent);
  std::vector<ad::Var> means(n_sent);
  for (std::size_t i = 0; i < n_sent; ++i) {
    if (words[i].empty()) throw Error("encode_story: sentence " + std::to_string(i) + " is empty");
    std::vector<ad::Var> inputs;
    inputs.reserve(words[i].size());
    for (const Vec& w : words[i]) inputs.push_back(g.constant(w));
    SentenceNodes s = sentence_layer(g, p, inputs);
    out[i].h = std::move(s.h);
    out[i].mean = s.mean;
    means[i] = s.mean;
  }

  for (std::size_t i = 0; i < n_sent; ++i) {
    StorySentenceNodes& sn = out[i];
    if (variant == Variant::no_context) {
      for (ad::Var h : sn.h) sn.x.push_back(g.linear(p.proj_w, p.proj_b, h));
      continue;
    }
    ad::Var fixed;
    if (variant == Variant::fixed_context) {
      if (n_sent == 1) {
        fixed = means[0];
      } else {
        std::vector<ad::Var> others;
        for (std::size_t k = 0; k < n_sent; ++k) {
          if (k != i) others.push_back(means[k]);
        }
        fixed = g.mean(others);
      }
    }
    for (ad::Var h : sn.h) {
      ad::Var context = fixed;
      if (variant == Variant::cadm) {
        AttentionNodes att = cross_attention(g, p, h, means);
        context = att.context;
        sn.attention.push_back(att.weights);
      }
      GateNodes gate = context_gate(g, p, h, context);
      sn.context.push_back(context);
      sn.gate.push_back(gate.gate);
      sn.fused.push_back(gate.fused);
    }
    auto [fwd, bwd] =
        bilstm(g, sn.fused, {p.story_fwd_w, p.story_fwd_b}, {p.story_bwd_w, p.story_bwd_b});
    sn.z = merge(g, p.story_merge_w, p.story_merge_b, sn.fused, fwd, bwd);
    for (ad::Var z : sn.z) sn.x.push_back(g.linear(p.proj_w, p.proj_b, z));
  }
  return out;
}

std::vector<ad::Var> image(ad::Graph& g, const ParamVars& p, const ImageRecord& record) {
  if (record.regions.empty()) throw Error("encode_image: image " + record.image_id + " has no regions");
  const std::size_t width = g.value(p.region_w).cols;
  std::vector<ad::Var> out;
  out.reserve(record.regions.size());
  for (const RegionFeature& r : record.regions) {
    if (r.feature.size() != width) {
      throw Error("encode_image: image " + record.image_id + " has feature width " +
                  std::to_string(r.feature.size()) + ", model expects " + std::to_string(width));
    }
    out.push_back(g.linear(p.region_w, p.region_b, g.constant(r.feature)));
  }
  return out;
}

}  // namespace graph

namespace {

std::vector<Vec> values(const ad::Graph& g, const std::vector<ad::Var>& vs) {
  std::vector<Vec> out;
  out.reserve(vs.size());
  for (ad::Var v : vs) out.push_back(g.value(v).to_vec());
  return out;
}

}  // namespace

BiLstmStates bilstm_layer(std::span<const Vec> inputs, LstmView fwd, LstmView bwd) {
  ad::Graph g(false);
  std::vector<ad::Var> xs;
  for (const Vec& x : inputs) xs.push_back(g.constant(x));
  auto [f, b] = graph::bilstm(g, xs, {g.constant_ref(fwd.w), g.constant_ref(fwd.b)},
                              {g.constant_ref(bwd.w), g.constant_ref(bwd.b)});
  return {values(g, f), values(g, b)};
}

SentenceEncoding encode_sentence(const Sentence& sentence, const EmbeddingTable& emb,
                                 const ModelParams& params) {
  if (sentence.tokens.empty()) throw Error("encode_sentence: empty sentence");
  ad::Graph g(false);
  const auto p = graph::bind(g, params, false);
  std::vector<ad::Var> xs;
  for (const auto& tok : sentence.tokens) xs.push_back(g.constant(emb.lookup(tok)));
  const auto s = graph::sentence_layer(g, p, xs);
  return {values(g, s.h), g.value(s.mean).to_vec()};
}

Attention cross_attention(std::span<const double> word_state, std::span<const Vec> sentence_means,
                          const ModelParams& params) {
  ad::Graph g(false);
  const auto p = graph::bind(g, params, false);
  std::vector<ad::Var> means;
  for (const Vec& m : sentence_means) means.push_back(g.constant(m));
  const auto a = graph::cross_attention(g, p, g.constant(word_state), means);
  return {g.value(a.context).to_vec(), g.value(a.weights).to_vec(), g.value(a.logits).to_vec()};
}

GatedContext context_gate(std::span<const double> word_state, std::span<const double> context,
                          const ModelParams& params) {
  if (word_state.size() != context.size()) throw Error("context_gate: dimension mismatch");
  ad::Graph g(false);
  const auto p = graph::bind(g, params, false);
  const auto r = graph::context_gate(g, p, g.constant(word_state), g.constant(context));
  return {g.value(r.fused).to_vec(), g.scalar(r.gate)};
}

EncodedStory encode_story(const EmbeddedStory& story, const ModelParams& params, Variant variant,
                          bool keep_intermediates) {
  ad::Graph g(false);
  const auto p = graph::bind(g, params, false);
  const auto nodes = graph::story(g, p, story, variant);
  EncodedStory out;
  out.variant = variant;
  for (const auto& sn : nodes) {
    EncodedSentence es;
    es.x = values(g, sn.x);
    if (keep_intermediates) {
      es.mean = g.value(sn.mean).to_vec();
      es.h = values(g, sn.h);
      es.context = values(g, sn.context);
      es.attention = values(g, sn.attention);
      for (ad::Var v : sn.gate) es.gate.push_back(g.scalar(v));
      es.fused = values(g, sn.fused);
      es.z = values(g, sn.z);
    }
    out.sentences.push_back(std::move(es));
  }
  return out;
}

EncodedStory encode_story(const Story& story, const EmbeddingTable& emb, const ModelParams& params,
                          Variant variant, bool keep_intermediates) {
  if (emb.dim() != params.dims.word_dim) {
    throw Error("embedding width " + std::to_string(emb.dim()) + " does not match model word_dim " +
                std::to_string(params.dims.word_dim));
  }
  return encode_story(embed(story, emb), params, variant, keep_intermediates);
}

EncodedImage encode_image(const ImageRecord& record, const ModelParams& params) {
  ad::Graph g(false);
  const auto p = graph::bind(g, params, false);
  return {record.image_id, values(g, graph::image(g, p, record))};
}

}  // namespace storyseq
