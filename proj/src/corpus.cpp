#include "storyseq/corpus.hpp"

#include <cctype>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace storyseq {
namespace {

using nlohmann::json;

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

// Calls fn(line, 1-based line number) for every line, including blanks.
template <class F>
void for_each_line(std::string_view text, F&& fn) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    fn(line, ++line_no);
    start = end + 1;
  }
}

json parse_json_line(std::string_view line, std::size_t line_no, const char* what) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw Error(std::string(what) + " line " + std::to_string(line_no) +
                ": malformed record (" + e.what() + ")");
  }
}

std::size_t parse_index(std::string_view s, std::size_t line_no) {
  s = trim(s);
  if (s.empty()) throw Error("story line " + std::to_string(line_no) + ": empty chunk bound");
  std::size_t v = 0;
  for (char c : s) {
    if (!std::isdigit(static_cast<unsigned char>(c))) {
      throw Error("story line " + std::to_string(line_no) + ": bad chunk bound '" +
                  std::string(s) + "'");
    }
    v = v * 10 + static_cast<std::size_t>(c - '0');
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Text

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j == i) break;
    std::string_view piece = text.substr(i, j - i);
    i = j;

    std::size_t lead = 0;
    while (lead < piece.size() && is_punct(piece[lead])) ++lead;
    std::size_t trail = piece.size();
    while (trail > lead && is_punct(piece[trail - 1])) --trail;

    for (std::size_t k = 0; k < lead; ++k) tokens.emplace_back(1, piece[k]);
    if (trail > lead) {
      std::string word(piece.substr(lead, trail - lead));
      for (char& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      tokens.push_back(std::move(word));
    }
    for (std::size_t k = trail; k < piece.size(); ++k) tokens.emplace_back(1, piece[k]);
  }
  return tokens;
}

std::string Sentence::text() const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Story make_story(std::string id, const std::vector<std::string>& sentences) {
  Story story;
  story.id = std::move(id);
  for (const auto& s : sentences) {
    Sentence sent{tokenize(s)};
    if (sent.tokens.empty()) throw Error("story " + story.id + ": empty sentence");
    story.sentences.push_back(std::move(sent));
  }
  if (story.sentences.empty()) throw Error("story " + story.id + ": no sentences");
  story.chunk_hints.resize(story.sentences.size());
  return story;
}

Story parse_story_line(std::string_view line, std::size_t line_no) {
  const std::size_t tab = line.find('\t');
  if (tab == std::string_view::npos) {
    throw Error("story line " + std::to_string(line_no) + ": expected id<TAB>sentences");
  }
  Story story;
  story.id = std::string(trim(line.substr(0, tab)));
  if (story.id.empty()) throw Error("story line " + std::to_string(line_no) + ": empty id");
  static constexpr std::string_view kChunkKey = "chunkspans=";
  for (std::string_view seg : split(line.substr(tab + 1), '|')) {
    seg = trim(seg);
    if (seg.substr(0, kChunkKey.size()) == kChunkKey) {
      if (story.sentences.empty()) {
        throw Error("story line " + std::to_string(line_no) + ": chunk spans before any sentence");
      }
      std::vector<ChunkSpan> spans;
      for (std::string_view part : split(seg.substr(kChunkKey.size()), ',')) {
        const std::size_t dash = part.find('-');
        if (dash == std::string_view::npos) {
          throw Error("story line " + std::to_string(line_no) + ": chunk span needs start-end");
        }
        spans.push_back({parse_index(part.substr(0, dash), line_no),
                         parse_index(part.substr(dash + 1), line_no)});
      }
      story.chunk_hints.back() = std::move(spans);
      continue;
    }
    Sentence sent{tokenize(seg)};
    if (sent.tokens.empty()) {
      throw Error("story line " + std::to_string(line_no) + ": empty sentence in story " + story.id);
    }
    story.sentences.push_back(std::move(sent));
    story.chunk_hints.emplace_back();
  }
  if (story.sentences.empty()) {
    throw Error("story line " + std::to_string(line_no) + ": story " + story.id + " has no sentences");
  }
  return story;
}

std::vector<Story> load_stories(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<Story> stories;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    if (trim(line).empty()) return;
    stories.push_back(parse_story_line(line, line_no));
  });
  return stories;
}

void save_stories(const std::vector<Story>& stories, const std::filesystem::path& path) {
  std::ostringstream out;
  for (const Story& s : stories) {
    out << s.id << '\t';
    for (std::size_t i = 0; i < s.sentences.size(); ++i) {
      if (i) out << '|';
      out << s.sentences[i].text();
      if (i < s.chunk_hints.size() && s.chunk_hints[i]) {
        out << "|chunkspans=";
        const auto& spans = *s.chunk_hints[i];
        for (std::size_t k = 0; k < spans.size(); ++k) {
          if (k) out << ',';
          out << spans[k].start << '-' << spans[k].end;
        }
      }
    }
    out << '\n';
  }
  write_file(path, out.str());
}

// ---------------------------------------------------------------------------
// Embeddings

const Vec& EmbeddingTable::lookup(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? zero_ : entries_[it->second].second;
}

bool EmbeddingTable::set(const std::string& token, Vec vector) {
  if (vector.size() != dim_) {
    throw Error("embedding for '" + token + "' has width " + std::to_string(vector.size()) +
                ", expected " + std::to_string(dim_));
  }
  auto it = index_.find(token);
  if (it != index_.end()) {
    entries_[it->second].second = std::move(vector);
    return true;
  }
  index_.emplace(token, entries_.size());
  entries_.emplace_back(token, std::move(vector));
  return false;
}

EmbeddingTable parse_embeddings(std::string_view text) {
  std::optional<EmbeddingTable> table;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    line = trim(line);
    if (line.empty()) return;
    std::istringstream in{std::string(line)};
    std::string token;
    in >> token;
    Vec values;
    std::string field;
    while (in >> field) {
      char* end = nullptr;
      const double v = std::strtod(field.c_str(), &end);
      if (end == field.c_str() || *end != '\0') {
        throw Error("embeddings line " + std::to_string(line_no) + ": bad number '" + field + "'");
      }
      values.push_back(v);
    }
    if (!table) {
      if (values.empty()) throw Error("embeddings line " + std::to_string(line_no) + ": no vector");
      table.emplace(values.size());
    }
    if (values.size() != table->dim()) {
      throw Error("embeddings line " + std::to_string(line_no) + ": expected " +
                  std::to_string(table->dim()) + " values, got " + std::to_string(values.size()));
    }
    if (table->set(token, std::move(values))) {
      table->add_warning("embeddings line " + std::to_string(line_no) + ": duplicate token '" +
                         token + "', keeping the last vector");
    }
  });
  if (!table) throw Error("embeddings: file has no vectors");
  return std::move(*table);
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  EmbeddingTable table = parse_embeddings(read_file(path));
  for (const auto& w : table.warnings()) std::cerr << "warning: " << w << '\n';
  return table;
}

void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::string out;
  for (const auto& [token, vec] : table.entries()) {
    out += token;
    for (double v : vec) {
      out += ' ';
      out += format_double(v);
    }
    out += '\n';
  }
  write_file(path, out);
}

std::vector<Vec> embed(const Sentence& sentence, const EmbeddingTable& table) {
  std::vector<Vec> out;
  out.reserve(sentence.tokens.size());
  for (const auto& t : sentence.tokens) out.push_back(table.lookup(t));
  return out;
}

EmbeddedStory embed(const Story& story, const EmbeddingTable& table) {
  EmbeddedStory out;
  out.reserve(story.sentences.size());
  for (const auto& s : story.sentences) out.push_back(embed(s, table));
  return out;
}

// ---------------------------------------------------------------------------
// Image features

void validate(const ImageRecord& r, std::size_t region_dim) {
  if (r.image_id.empty()) throw Error("image record without image_id");
  if (r.width <= 0 || r.height <= 0) throw Error("image " + r.image_id + ": non-positive size");
  if (r.regions.empty()) throw Error("image " + r.image_id + ": no regions");
  for (std::size_t k = 0; k < r.regions.size(); ++k) {
    const BBox& b = r.regions[k].bbox;
    if (!(b.w > 0) || !(b.h > 0)) {
      throw Error("image " + r.image_id + ": region " + std::to_string(k) + " has empty box");
    }
    if (b.x < 0 || b.y < 0 || b.x + b.w > r.width || b.y + b.h > r.height) {
      throw Error("image " + r.image_id + ": region " + std::to_string(k) +
                  " box lies outside the image");
    }
    if (r.regions[k].feature.size() != region_dim) {
      throw Error("image " + r.image_id + ": region " + std::to_string(k) + " feature width " +
                  std::to_string(r.regions[k].feature.size()) + ", expected " +
                  std::to_string(region_dim));
    }
  }
}

ImageStore::ImageStore(std::size_t region_dim, std::vector<ImageRecord> records)
    : region_dim_(region_dim) {
  for (auto& r : records) {
    validate(r, region_dim_);
    if (index_.count(r.image_id)) throw Error("duplicate image_id " + r.image_id);
    index_.emplace(r.image_id, records_.size());
    records_.push_back(std::move(r));
  }
}

const ImageRecord* ImageStore::find(const std::string& image_id) const {
  auto it = index_.find(image_id);
  return it == index_.end() ? nullptr : &records_[it->second];
}

const ImageRecord& ImageStore::at(const std::string& image_id) const {
  const ImageRecord* r = find(image_id);
  if (!r) throw Error("unknown image_id " + image_id);
  return *r;
}

ImageStore parse_image_features(std::string_view text) {
  std::optional<std::size_t> region_dim;
  std::vector<ImageRecord> records;
  std::vector<std::string> rejected;
  std::unordered_map<std::string, bool> seen;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    if (trim(line).empty()) return;
    const json j = parse_json_line(line, line_no, "features");
    if (!region_dim) {
      if (!j.contains("region_dim")) {
        throw Error("features line " + std::to_string(line_no) + ": missing region_dim header");
      }
      region_dim = j.at("region_dim").get<std::size_t>();
      if (*region_dim == 0) throw Error("features: region_dim must be positive");
      return;
    }
    ImageRecord r;
    try {
      r.image_id = j.at("image_id").get<std::string>();
      r.width = j.at("width").get<int>();
      r.height = j.at("height").get<int>();
      if (j.contains("caption") && !j.at("caption").is_null()) {
        r.caption = j.at("caption").get<std::string>();
      }
      if (j.contains("mask_refs")) r.mask_refs = j.at("mask_refs").get<std::vector<std::string>>();
      for (const json& reg : j.at("regions")) {
        const auto box = reg.at("bbox").get<std::vector<double>>();
        if (box.size() != 4) throw Error("bbox needs 4 numbers");
        r.regions.push_back({{box[0], box[1], box[2], box[3]}, reg.at("feature").get<Vec>()});
      }
    } catch (const json::exception& e) {
      throw Error("features line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      validate(r, *region_dim);
      if (seen.count(r.image_id)) throw Error("duplicate image_id " + r.image_id);
    } catch (const Error& e) {
      rejected.push_back("features line " + std::to_string(line_no) + ": " + e.what());
      return;
    }
    seen.emplace(r.image_id, true);
    records.push_back(std::move(r));
  });
  if (!region_dim) throw Error("features: empty file");
  ImageStore store(*region_dim, std::move(records));
  store.rejected = std::move(rejected);
  return store;
}

ImageStore load_image_features(const std::filesystem::path& path) {
  ImageStore store = parse_image_features(read_file(path));
  for (const auto& r : store.rejected) std::cerr << "warning: rejected " << r << '\n';
  return store;
}

void save_image_features(const ImageStore& store, const std::filesystem::path& path) {
  std::string out = json{{"region_dim", store.region_dim()}}.dump() + '\n';
  for (const ImageRecord& r : store.records()) {
    json j;
    j["image_id"] = r.image_id;
    j["width"] = r.width;
    j["height"] = r.height;
    if (r.caption) j["caption"] = *r.caption;
    if (!r.mask_refs.empty()) j["mask_refs"] = r.mask_refs;
    json regions = json::array();
    for (const auto& reg : r.regions) {
      regions.push_back({{"bbox", {reg.bbox.x, reg.bbox.y, reg.bbox.w, reg.bbox.h}},
                         {"feature", reg.feature}});
    }
    j["regions"] = std::move(regions);
    out += j.dump();
    out += '\n';
  }
  write_file(path, out);
}

// ---------------------------------------------------------------------------
// Masks

std::size_t InstanceMask::foreground() const {
  std::size_t n = 0;
  for (auto p : pixels) n += p != 0;
  return n;
}

std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (auto p : pixels) {
    const std::uint8_t v = p ? 1 : 0;
    if (v != current) {
      counts.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
  }
  counts.push_back(run);
  return counts;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t>& counts, std::size_t total) {
  std::vector<std::uint8_t> pixels;
  pixels.reserve(total);
  std::uint8_t v = 0;
  for (auto c : counts) {
    if (pixels.size() + c > total) throw Error("rle: runs exceed raster size");
    pixels.insert(pixels.end(), c, v);
    v ^= 1;
  }
  if (pixels.size() != total) throw Error("rle: runs do not cover the raster");
  return pixels;
}

std::vector<InstanceMask> parse_masks(std::string_view text) {
  std::vector<InstanceMask> masks;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    if (trim(line).empty()) return;
    const json j = parse_json_line(line, line_no, "masks");
    InstanceMask m;
    try {
      m.mask_id = j.at("mask_id").get<std::string>();
      m.image_id = j.at("image_id").get<std::string>();
      m.label = j.value("label", std::string());
      const auto size = j.at("size").get<std::vector<int>>();
      if (size.size() != 2 || size[0] <= 0 || size[1] <= 0) throw Error("size must be [h, w]");
      m.height = size[0];
      m.width = size[1];
      m.pixels = rle_decode(j.at("rle").get<std::vector<std::uint32_t>>(),
                            static_cast<std::size_t>(m.height) * m.width);
    } catch (const std::exception& e) {
      throw Error("masks line " + std::to_string(line_no) + ": " + e.what());
    }
    if (m.foreground() == 0) {
      throw Error("masks line " + std::to_string(line_no) + ": mask " + m.mask_id + " is empty");
    }
    masks.push_back(std::move(m));
  });
  return masks;
}

std::vector<InstanceMask> load_masks(const std::filesystem::path& path) {
  return parse_masks(read_file(path));
}

void save_masks(const std::vector<InstanceMask>& masks, const std::filesystem::path& path) {
  std::string out;
  for (const auto& m : masks) {
    json j{{"mask_id", m.mask_id},
           {"image_id", m.image_id},
           {"label", m.label},
           {"size", {m.height, m.width}},
           {"rle", rle_encode(m.pixels)}};
    out += j.dump();
    out += '\n';
  }
  write_file(path, out);
}

void validate(const InstanceMask& mask, const ImageStore& store) {
  const ImageRecord* img = store.find(mask.image_id);
  if (!img) return;
  if (img->height != mask.height || img->width != mask.width) {
    throw Error("mask " + mask.mask_id + ": raster " + std::to_string(mask.height) + "x" +
                std::to_string(mask.width) + " does not match image " + mask.image_id);
  }
}

// ---------------------------------------------------------------------------

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace storyseq
