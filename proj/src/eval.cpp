#include "storyseq/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "storyseq/common.hpp"
#include "storyseq/corpus.hpp"

namespace storyseq {

std::size_t rank_of_truth(std::span<const std::string> ranked, const std::set<std::string>& relevant) {
  if (relevant.empty()) throw Error("rank_of_truth: empty relevant set");
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (relevant.count(ranked[i])) return i + 1;
  }
  return ranked.size() + 1;
}

double average_precision(std::span<const std::string> ranked, const std::set<std::string>& relevant) {
  if (relevant.empty()) throw Error("average_precision: empty relevant set");
  double sum = 0.0;
  std::size_t hits = 0;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (!relevant.count(ranked[i]) || !seen.insert(ranked[i]).second) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(relevant.size());
}

double EvalReport::recall_at(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == k) return recall[i];
  }
  throw Error("EvalReport: R@" + std::to_string(k) + " was not computed");
}

namespace {

// found[q] is false for sentinel ranks; those never count as recalled,
// whatever K is.
EvalReport summarize(std::vector<std::size_t> ranks, const std::vector<bool>& found,
                     std::span<const double> aps, std::span<const std::size_t> ks) {
  if (ranks.empty()) throw Error("compute_report: no queries");
  EvalReport r;
  r.ks.assign(ks.begin(), ks.end());
  const double n = static_cast<double>(ranks.size());
  for (std::size_t k : ks) {
    std::size_t hits = 0;
    for (std::size_t q = 0; q < ranks.size(); ++q) hits += found[q] && ranks[q] <= k;
    r.recall.push_back(static_cast<double>(hits) / n);
  }
  std::vector<std::size_t> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  r.med_rank = m % 2 ? static_cast<double>(sorted[m / 2])
                     : (static_cast<double>(sorted[m / 2 - 1]) + static_cast<double>(sorted[m / 2])) / 2.0;
  double total = 0.0;
  for (std::size_t x : ranks) total += static_cast<double>(x);
  r.mean_rank = total / n;
  r.map_score = std::accumulate(aps.begin(), aps.end(), 0.0) / n;
  r.ranks = std::move(ranks);
  return r;
}

}  // namespace

EvalReport compute_report(std::span<const std::size_t> ranks, std::span<const std::size_t> ks) {
  std::vector<double> aps;
  for (std::size_t r : ranks) {
    if (r == 0) throw Error("compute_report: ranks are 1-based");
    aps.push_back(1.0 / static_cast<double>(r));
  }
  return summarize({ranks.begin(), ranks.end()}, std::vector<bool>(ranks.size(), true), aps, ks);
}

EvalReport compute_report(std::span<const RankedQuery> queries, std::span<const std::size_t> ks) {
  std::size_t longest = 0;
  for (const auto& q : queries) longest = std::max(longest, q.ranked.size());
  std::vector<std::size_t> ranks;
  std::vector<double> aps;
  std::vector<bool> found;
  for (const auto& q : queries) {
    if (q.ranked.empty()) {
      ranks.push_back(longest + 1);
      aps.push_back(0.0);
      found.push_back(false);
      continue;
    }
    ranks.push_back(rank_of_truth(q.ranked, q.relevant));
    aps.push_back(average_precision(q.ranked, q.relevant));
    found.push_back(ranks.back() <= q.ranked.size());
  }
  return summarize(std::move(ranks), found, aps, ks);
}

std::string format_report(const EvalReport& report, const std::string& label) {
  std::vector<std::string> head;
  std::vector<std::string> row;
  char buf[64];
  if (!label.empty()) {
    head.push_back("");
    row.push_back(label);
  }
  for (std::size_t i = 0; i < report.ks.size(); ++i) {
    head.push_back("R@" + std::to_string(report.ks[i]));
    std::snprintf(buf, sizeof(buf), "%.2f", report.recall[i] * 100.0);
    row.push_back(buf);
  }
  head.push_back("MedR");
  std::snprintf(buf, sizeof(buf), "%.1f", report.med_rank);
  row.push_back(buf);
  head.push_back("MeanR");
  std::snprintf(buf, sizeof(buf), "%.2f", report.mean_rank);
  row.push_back(buf);
  head.push_back("MAP");
  std::snprintf(buf, sizeof(buf), "%.2f", report.map_score * 100.0);
  row.push_back(buf);

  std::ostringstream out;
  for (const auto* line : {&head, &row}) {
    for (std::size_t i = 0; i < line->size(); ++i) {
      const std::size_t width = std::max(head[i].size(), row[i].size()) + 2;
      const std::string& cell = (*line)[i];
      out << std::string(width - cell.size(), ' ') << cell;
    }
    out << '\n';
  }
  return out.str();
}

std::vector<std::size_t> rank_by_score(std::span<const double> scores,
                                       std::span<const std::string> ids) {
  if (scores.size() != ids.size()) throw Error("rank_by_score: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  return order;
}

TruthTable parse_truth(std::string_view text) {
  TruthTable truth;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string story, idx, ids;
    if (!(ls >> story)) continue;
    if (!(ls >> idx >> ids)) {
      throw Error("truth line " + std::to_string(line_no) + ": expected story_id sentence_idx ids");
    }
    std::size_t sentence = 0;
    try {
      std::size_t used = 0;
      sentence = std::stoul(idx, &used);
      if (used != idx.size()) throw std::invalid_argument(idx);
    } catch (const std::exception&) {
      throw Error("truth line " + std::to_string(line_no) + ": bad sentence index '" + idx + "'");
    }
    std::vector<std::string> rel;
    std::stringstream ss(ids);
    std::string id;
    while (std::getline(ss, id, ',')) {
      if (!id.empty()) rel.push_back(id);
    }
    if (rel.empty()) throw Error("truth line " + std::to_string(line_no) + ": no relevant ids");
    truth[{story, sentence}] = std::move(rel);
  }
  return truth;
}

TruthTable load_truth(const std::filesystem::path& path) { return parse_truth(read_file(path)); }

void save_truth(const TruthTable& truth, const std::filesystem::path& path) {
  std::string out;
  for (const auto& [key, ids] : truth) {
    out += key.story_id + ' ' + std::to_string(key.sentence) + ' ';
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ',';
      out += ids[i];
    }
    out += '\n';
  }
  write_file(path, out);
}

}  // namespace storyseq
