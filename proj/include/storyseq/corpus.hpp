#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "storyseq/common.hpp"

namespace storyseq {

// Lowercases, splits on whitespace, and peels leading/trailing ASCII
// punctuation off each piece as single-character tokens. Inner punctuation
// ("it's") stays attached.
std::vector<std::string> tokenize(std::string_view text);

struct Sentence {
  std::vector<std::string> tokens;

  std::size_t size() const { return tokens.size(); }
  std::string text() const;
  bool operator==(const Sentence&) const = default;
};

// Half-open word span [start, end) inside one sentence.
struct ChunkSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const ChunkSpan&) const = default;
};

struct Story {
  std::string id;
  std::vector<Sentence> sentences;
  // Optional externally supplied phrase chunks, one entry per sentence.
  std::vector<std::optional<std::vector<ChunkSpan>>> chunk_hints;
};

// Builds a story from raw sentence strings; throws on an empty story or a
// sentence without tokens.
Story make_story(std::string id, const std::vector<std::string>& sentences);

// Story file: one story per line, `id<TAB>sentence|sentence|...`. A segment
// `chunkspans=0-3,3-6` annotates the sentence before it.
std::vector<Story> load_stories(const std::filesystem::path& path);
void save_stories(const std::vector<Story>& stories, const std::filesystem::path& path);
Story parse_story_line(std::string_view line, std::size_t line_no);

// Frozen pretrained word vectors; unknown tokens map to the zero vector.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim), zero_(dim, 0.0) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const Vec& lookup(const std::string& token) const;
  // Insert or overwrite; returns true when the token was already present.
  bool set(const std::string& token, Vec vector);

  // Insertion order, for deterministic serialization.
  const std::vector<std::pair<std::string, Vec>>& entries() const { return entries_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  void add_warning(std::string w) { warnings_.push_back(std::move(w)); }

 private:
  std::size_t dim_ = 0;
  Vec zero_;
  std::vector<std::pair<std::string, Vec>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> warnings_;
};

EmbeddingTable load_embeddings(const std::filesystem::path& path);
EmbeddingTable parse_embeddings(std::string_view text);
void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);

// Per-sentence word vectors, in token order.
using EmbeddedStory = std::vector<std::vector<Vec>>;
EmbeddedStory embed(const Story& story, const EmbeddingTable& table);
std::vector<Vec> embed(const Sentence& sentence, const EmbeddingTable& table);

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
  bool operator==(const BBox&) const = default;
};

struct RegionFeature {
  BBox bbox;
  Vec feature;
  bool operator==(const RegionFeature&) const = default;
};

struct ImageRecord {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<RegionFeature> regions;
  std::optional<std::string> caption;
  std::vector<std::string> mask_refs;
  bool operator==(const ImageRecord&) const = default;
};

// Throws Error naming the image when a record breaks an invariant.
void validate(const ImageRecord& record, std::size_t region_dim);

class ImageStore {
 public:
  ImageStore() = default;
  ImageStore(std::size_t region_dim, std::vector<ImageRecord> records);

  std::size_t region_dim() const { return region_dim_; }
  std::size_t size() const { return records_.size(); }
  const std::vector<ImageRecord>& records() const { return records_; }
  const ImageRecord* find(const std::string& image_id) const;
  const ImageRecord& at(const std::string& image_id) const;

  // Records rejected while loading, one diagnostic each.
  std::vector<std::string> rejected;

 private:
  std::size_t region_dim_ = 0;
  std::vector<ImageRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Line-record feature file. First line is a header carrying region_dim;
// invalid records are skipped and reported in ImageStore::rejected.
ImageStore load_image_features(const std::filesystem::path& path);
ImageStore parse_image_features(std::string_view text);
void save_image_features(const ImageStore& store, const std::filesystem::path& path);

// Binary raster, row-major, height x width.
struct InstanceMask {
  std::string mask_id;
  std::string image_id;
  std::string label;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  bool at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x] != 0; }
  std::size_t foreground() const;
  bool operator==(const InstanceMask&) const = default;
};

// Row-major RLE that starts with a background run (possibly zero).
std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t>& pixels);
std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t>& counts, std::size_t total);

std::vector<InstanceMask> load_masks(const std::filesystem::path& path);
std::vector<InstanceMask> parse_masks(std::string_view text);
void save_masks(const std::vector<InstanceMask>& masks, const std::filesystem::path& path);
// Checks raster size against the parent image when it is in the store.
void validate(const InstanceMask& mask, const ImageStore& store);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace storyseq
