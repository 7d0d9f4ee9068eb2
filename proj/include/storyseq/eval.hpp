#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace storyseq {

// 1-based rank of the first relevant item, or ranked.size() + 1 when none
// is present.
std::size_t rank_of_truth(std::span<const std::string> ranked, const std::set<std::string>& relevant);

// Precision at each relevant hit, summed and divided by |relevant|.
double average_precision(std::span<const std::string> ranked, const std::set<std::string>& relevant);

struct EvalReport {
  std::vector<std::size_t> ks;
  std::vector<double> recall;  // aligned with ks
  double med_rank = 0.0;
  double mean_rank = 0.0;
  double map_score = 0.0;
  std::vector<std::size_t> ranks;

  double recall_at(std::size_t k) const;
};

// Ranks of single-relevant queries; each query's average precision is 1/rank.
EvalReport compute_report(std::span<const std::size_t> ranks, std::span<const std::size_t> ks);

struct RankedQuery {
  std::vector<std::string> ranked;
  std::set<std::string> relevant;
};

// Queries with an empty candidate list get rank (longest list + 1) and AP 0.
EvalReport compute_report(std::span<const RankedQuery> queries, std::span<const std::size_t> ks);

// Aligned table: R@K columns (percent), MedR, MeanR, MAP (percent).
std::string format_report(const EvalReport& report, const std::string& label = "");

// Indices sorting scores descending, ties by ascending id.
std::vector<std::size_t> rank_by_score(std::span<const double> scores,
                                       std::span<const std::string> ids);

struct TruthKey {
  std::string story_id;
  std::size_t sentence = 0;
  auto operator<=>(const TruthKey&) const = default;
};

// Relevant image ids per (story, sentence). The first id is the paired
// image used for training.
using TruthTable = std::map<TruthKey, std::vector<std::string>>;

// Lines: `story_id sentence_idx relevant_id[,relevant_id...]`.
TruthTable load_truth(const std::filesystem::path& path);
TruthTable parse_truth(std::string_view text);
void save_truth(const TruthTable& truth, const std::filesystem::path& path);

}  // namespace storyseq
