#include "storyseq/storyboard.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"

namespace storyseq {

namespace {

bool is_punctuation(const std::string& token) {
  return !token.empty() && std::all_of(token.begin(), token.end(), [](unsigned char c) {
    return std::ispunct(c) != 0;
  });
}

bool is_conjunction(const std::string& token) {
  return token == "and" || token == "then" || token == "but";
}

}  // namespace

std::vector<PhraseChunk> chunk_sentence(const Sentence& sentence,
                                        const std::optional<std::vector<ChunkSpan>>& provided,
                                        const Stopwords& stopwords) {
  const std::size_t n = sentence.size();
  if (provided) {
    std::vector<PhraseChunk> out;
    std::size_t prev_end = 0;
    for (const ChunkSpan& s : *provided) {
      if (s.start >= s.end || s.end > n || s.start < prev_end) {
        throw Error("invalid chunk span " + std::to_string(s.start) + "-" + std::to_string(s.end) +
                    " for a sentence of " + std::to_string(n) + " words");
      }
      out.push_back({s.start, s.end, ChunkSource::provided});
      prev_end = s.end;
    }
    if (out.empty()) throw Error("empty chunk span list");
    return out;
  }

  std::vector<PhraseChunk> out;
  auto flush = [&](std::size_t start, std::size_t end) {
    if (start >= end) return;
    const bool content = std::any_of(sentence.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                     sentence.tokens.begin() + static_cast<std::ptrdiff_t>(end),
                                     [&](const std::string& t) {
                                       return !stopwords.contains(t) && !is_punctuation(t);
                                     });
    if (content) out.push_back({start, end, ChunkSource::heuristic});
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& t = sentence.tokens[i];
    if (is_punctuation(t) || is_conjunction(t)) {
      flush(start, i);
      start = i + 1;
    }
  }
  flush(start, n);
  if (out.empty() && n > 0) out.push_back({0, n, ChunkSource::heuristic});
  return out;
}

DecodeResult one_to_many_decode(std::span<const std::string> candidates,
                                const std::vector<Vec>& phrase_scores, std::size_t k) {
  if (k == 0) throw Error("one_to_many_decode: K must be at least 1");
  DecodeResult result;
  if (candidates.empty()) {
    result.no_candidates = true;
    return result;
  }
  std::set<std::string> seen;
  for (std::size_t t = 0; t < phrase_scores.size(); ++t) {
    const Vec& scores = phrase_scores[t];
    if (scores.size() != candidates.size()) {
      throw Error("one_to_many_decode: chunk " + std::to_string(t) + " has " +
                  std::to_string(scores.size()) + " scores for " +
                  std::to_string(candidates.size()) + " candidates");
    }
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return candidates[a] < candidates[b];
    });
    DecodeStep step;
    step.chunk = t;
    for (std::size_t r = 0; r < std::min(k, order.size()); ++r) {
      step.top_k.push_back(candidates[order[r]]);
    }
    step.argmax = step.top_k.front();
    step.selected = std::none_of(step.top_k.begin(), step.top_k.end(),
                                 [&](const std::string& id) { return seen.count(id) != 0; });
    if (step.selected) {
      seen.insert(step.top_k.begin(), step.top_k.end());
      result.images.push_back(step.argmax);
      result.trigger_chunk.push_back(t);
    }
    result.trace.push_back(std::move(step));
  }
  return result;
}

double box_mask_overlap(const BBox& box, const InstanceMask& mask) {
  // Pixel p is inside when box.x <= p + 0.5 < box.x + box.w.
  auto range = [](double lo, double len, int limit) {
    const int first = std::max(0, static_cast<int>(std::ceil(lo - 0.5)));
    const int last = std::min(limit, static_cast<int>(std::ceil(lo + len - 0.5)));
    return std::pair{first, last};
  };
  const auto [x0, x1] = range(box.x, box.w, mask.width);
  const auto [y0, y1] = range(box.y, box.h, mask.height);
  if (x1 <= x0 || y1 <= y0) return 0.0;
  std::size_t hit = 0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) hit += mask.at(x, y);
  }
  const double area = static_cast<double>(x1 - x0) * static_cast<double>(y1 - y0);
  return static_cast<double>(hit) / area;
}

Segmentation segment_relevant_regions(const GroundingMap& grounding, const ImageRecord& image,
                                      std::span<const InstanceMask> masks, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw Error("segment_relevant_regions: tau must be in (0, 1)");
  std::set<std::size_t> regions;
  for (const Grounding& g : grounding) {
    if (g.region >= image.regions.size()) {
      throw Error("grounding refers to region " + std::to_string(g.region) + " of image " +
                  image.image_id + " which has " + std::to_string(image.regions.size()));
    }
    regions.insert(g.region);
  }
  Segmentation out;
  std::set<std::string> kept_masks;
  for (std::size_t r : regions) {
    const BBox& box = image.regions[r].bbox;
    const InstanceMask* best = nullptr;
    double best_overlap = 0.0;
    for (const InstanceMask& m : masks) {
      if (m.image_id != image.image_id) continue;
      const double o = box_mask_overlap(box, m);
      if (!best || o > best_overlap) {
        best = &m;
        best_overlap = o;
      }
    }
    if (best && best_overlap >= tau) {
      if (kept_masks.insert(best->mask_id).second) out.kept_masks.push_back(best->mask_id);
      continue;
    }
    BBox clipped = box;
    clipped.x = std::clamp(box.x, 0.0, static_cast<double>(image.width));
    clipped.y = std::clamp(box.y, 0.0, static_cast<double>(image.height));
    clipped.w = std::min(box.x + box.w, static_cast<double>(image.width)) - clipped.x;
    clipped.h = std::min(box.y + box.h, static_cast<double>(image.height)) - clipped.y;
    if (std::find(out.kept_regions.begin(), out.kept_regions.end(), clipped) ==
        out.kept_regions.end()) {
      out.kept_regions.push_back(clipped);
    }
  }
  return out;
}

void StoryboardOptions::validate() const {
  if (k == 0) throw Error("storyboard: K must be at least 1");
  if (!(tau > 0.0 && tau < 1.0)) throw Error("storyboard: tau must be in (0, 1)");
  if (style_workers == 0) throw Error("storyboard: style_workers must be at least 1");
}

namespace {

double chunk_score(const GroundingMap& grounding, const PhraseChunk& c) {
  double sum = 0.0;
  for (std::size_t w = c.start; w < c.end; ++w) sum += grounding[w].similarity;
  return sum / static_cast<double>(c.end - c.start);
}

GroundingMap restrict_grounding(const GroundingMap& g, const std::vector<PhraseChunk>& chunks,
                                const std::vector<std::size_t>& which) {
  if (which.empty()) return g;
  GroundingMap out;
  for (std::size_t c : which) {
    for (std::size_t w = chunks[c].start; w < chunks[c].end && w < g.size(); ++w) out.push_back(g[w]);
  }
  return out;
}

bool intersects(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return std::any_of(a.begin(), a.end(),
                     [&](const std::string& x) { return std::find(b.begin(), b.end(), x) != b.end(); });
}

}  // namespace

StoryboardPlan compose_storyboard(const Story& story, const RetrievalResult& retrieval,
                                  const ImageStore& store, std::span<const InstanceMask> masks,
                                  const StoryboardOptions& options) {
  options.validate();
  StoryboardPlan plan{story.id, {}};
  std::map<std::size_t, const SentenceResult*> by_index;
  for (const SentenceResult& s : retrieval.sentences) by_index[s.sentence_idx] = &s;

  for (std::size_t i = 0; i < story.sentences.size(); ++i) {
    const Sentence& sentence = story.sentences[i];
    SentencePlan sp;
    sp.sentence_idx = i;
    const auto& hint = i < story.chunk_hints.size() ? story.chunk_hints[i] : std::nullopt;
    sp.chunks = chunk_sentence(sentence, hint);

    auto it = by_index.find(i);
    if (it == by_index.end() || it->second->ranked.empty()) {
      sp.diagnostics.push_back("no retrieval candidates");
      plan.sentences.push_back(std::move(sp));
      continue;
    }
    const auto& ranked = it->second->ranked;
    std::vector<const ScoredCandidate*> usable;
    for (const ScoredCandidate& c : ranked) {
      if (store.find(c.image_id)) {
        usable.push_back(&c);
      } else {
        sp.diagnostics.push_back("candidate " + c.image_id + " not in feature store");
      }
    }
    if (usable.empty()) {
      plan.sentences.push_back(std::move(sp));
      continue;
    }

    if (options.multi_image) {
      std::vector<std::string> ids;
      for (const auto* c : usable) ids.push_back(c->image_id);
      std::vector<Vec> scores(sp.chunks.size(), Vec(usable.size()));
      bool fallback = false;
      for (std::size_t j = 0; j < usable.size(); ++j) {
        const bool grounded = usable[j]->grounding.size() == sentence.size();
        fallback |= !grounded;
        for (std::size_t t = 0; t < sp.chunks.size(); ++t) {
          scores[t][j] = grounded ? chunk_score(usable[j]->grounding, sp.chunks[t]) : usable[j]->fused;
        }
      }
      if (fallback) sp.diagnostics.push_back("missing word grounding; fused score used for phrases");
      const DecodeResult d = one_to_many_decode(ids, scores, options.k);
      std::vector<const std::vector<std::string>*> panel_sets;
      for (std::size_t p = 0; p < d.images.size(); ++p) {
        Panel panel;
        panel.image_id = d.images[p];
        panel.chunks.push_back(d.trigger_chunk[p]);
        sp.panels.push_back(std::move(panel));
        panel_sets.push_back(&d.trace[d.trigger_chunk[p]].top_k);
      }
      // A skipped chunk belongs to the first panel whose top-K set it hit.
      for (const DecodeStep& step : d.trace) {
        if (step.selected) continue;
        for (std::size_t p = 0; p < sp.panels.size(); ++p) {
          if (intersects(*panel_sets[p], step.top_k)) {
            sp.panels[p].chunks.push_back(step.chunk);
            break;
          }
        }
      }
      for (Panel& panel : sp.panels) std::sort(panel.chunks.begin(), panel.chunks.end());
    } else {
      Panel panel;
      panel.image_id = usable.front()->image_id;
      for (std::size_t t = 0; t < sp.chunks.size(); ++t) panel.chunks.push_back(t);
      sp.panels.push_back(std::move(panel));
    }

    for (Panel& panel : sp.panels) {
      const ScoredCandidate* cand = nullptr;
      for (const auto* c : usable) {
        if (c->image_id == panel.image_id) cand = c;
      }
      const ImageRecord& image = store.at(panel.image_id);
      GroundingMap g = cand->grounding.size() == sentence.size()
                           ? restrict_grounding(cand->grounding, sp.chunks, panel.chunks)
                           : cand->grounding;
      std::erase_if(g, [&](const Grounding& x) { return x.region >= image.regions.size(); });
      Segmentation seg = segment_relevant_regions(g, image, masks, options.tau);
      panel.kept_regions = std::move(seg.kept_regions);
      panel.kept_masks = std::move(seg.kept_masks);
    }
    plan.sentences.push_back(std::move(sp));
  }
  return plan;
}

namespace {

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  return out + "'";
}

}  // namespace

void apply_style(std::vector<StoryboardPlan>& plans, const StoryboardOptions& options) {
  if (!options.style_cmd) return;
  std::vector<Panel*> panels;
  for (auto& plan : plans) {
    for (auto& s : plan.sentences) {
      for (auto& p : s.panels) panels.push_back(&p);
    }
  }
  parallel_for(panels.size(), options.style_workers, [&](std::size_t i) {
    Panel& p = *panels[i];
    const auto in = options.image_dir / p.image_id;
    const auto out = options.image_dir / (p.image_id + ".stylized");
    const std::string cmd = *options.style_cmd + " " + shell_quote(in.string()) + " " +
                            shell_quote(out.string()) + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    const bool ok = status != -1 && WIFEXITED(status) && WEXITSTATUS(status) == 0;
    p.style = ok ? StyleStatus::stylized : StyleStatus::raw;
  });
}

std::string serialize_plans(const std::vector<StoryboardPlan>& plans,
                            const StoryboardOptions& options) {
  using nlohmann::ordered_json;
  std::string out;
  ordered_json meta;
  meta["kind"] = "meta";
  meta["k"] = options.k;
  meta["tau"] = options.tau;
  meta["multi_image"] = options.multi_image;
  out += meta.dump() + '\n';
  for (const auto& plan : plans) {
    for (const auto& s : plan.sentences) {
      ordered_json chunks = ordered_json::array();
      for (const auto& c : s.chunks) {
        chunks.push_back({c.start, c.end, c.source == ChunkSource::provided ? "provided" : "heuristic"});
      }
      auto base = [&](const char* kind) {
        ordered_json j;
        j["kind"] = kind;
        j["story_id"] = plan.story_id;
        j["sentence_idx"] = s.sentence_idx;
        return j;
      };
      if (s.panels.empty()) {
        ordered_json j = base("empty");
        j["sentence_chunks"] = chunks;
        j["diagnostics"] = s.diagnostics;
        out += j.dump() + '\n';
        continue;
      }
      for (std::size_t p = 0; p < s.panels.size(); ++p) {
        const Panel& panel = s.panels[p];
        ordered_json j = base("panel");
        j["panel_idx"] = p;
        j["image_id"] = panel.image_id;
        j["chunks"] = panel.chunks;
        j["sentence_chunks"] = chunks;
        ordered_json boxes = ordered_json::array();
        for (const BBox& b : panel.kept_regions) boxes.push_back({b.x, b.y, b.w, b.h});
        j["kept_regions"] = std::move(boxes);
        j["kept_masks"] = panel.kept_masks;
        j["style_status"] = panel.style == StyleStatus::stylized ? "stylized" : "raw";
        j["diagnostics"] = s.diagnostics;
        out += j.dump() + '\n';
      }
    }
  }
  return out;
}

std::vector<StoryboardPlan> parse_plans(std::string_view text) {
  std::vector<StoryboardPlan> out;
  std::map<std::string, std::size_t> slot;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "meta") continue;
      if (kind != "panel" && kind != "empty") throw Error("unknown record kind '" + kind + "'");
      const auto id = j.at("story_id").get<std::string>();
      auto [it, inserted] = slot.emplace(id, out.size());
      if (inserted) out.push_back({id, {}});
      auto& sentences = out[it->second].sentences;
      const auto idx = j.at("sentence_idx").get<std::size_t>();
      if (sentences.empty() || sentences.back().sentence_idx != idx) {
        SentencePlan sp;
        sp.sentence_idx = idx;
        for (const auto& c : j.at("sentence_chunks")) {
          sp.chunks.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>(),
                               c.at(2).get<std::string>() == "provided" ? ChunkSource::provided
                                                                        : ChunkSource::heuristic});
        }
        sp.diagnostics = j.at("diagnostics").get<std::vector<std::string>>();
        sentences.push_back(std::move(sp));
      }
      if (kind == "empty") continue;
      Panel panel;
      panel.image_id = j.at("image_id").get<std::string>();
      panel.chunks = j.at("chunks").get<std::vector<std::size_t>>();
      for (const auto& b : j.at("kept_regions")) {
        panel.kept_regions.push_back(
            {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()});
      }
      panel.kept_masks = j.at("kept_masks").get<std::vector<std::string>>();
      const auto style = j.at("style_status").get<std::string>();
      if (style != "raw" && style != "stylized") throw Error("bad style_status '" + style + "'");
      panel.style = style == "stylized" ? StyleStatus::stylized : StyleStatus::raw;
      sentences.back().panels.push_back(std::move(panel));
    } catch (const nlohmann::json::exception& e) {
      throw Error("plan line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error("plan line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_plans(const std::vector<StoryboardPlan>& plans, const StoryboardOptions& options,
                const std::filesystem::path& path) {
  write_file(path, serialize_plans(plans, options));
}

std::vector<StoryboardPlan> load_plans(const std::filesystem::path& path) {
  return parse_plans(read_file(path));
}

}  // namespace storyseq
