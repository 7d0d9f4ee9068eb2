#include "storyseq/model.hpp"

#include <bit>
#include <cstring>
#include <random>

namespace storyseq {
namespace {

constexpr char kMagic[8] = {'S', 'T', 'S', 'Q', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <class T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof(T));
  }
  void str(std::string_view s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void doubles(std::span<const double> v) {
    out_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void doubles(std::span<double> v) {
    need(v.size() * sizeof(double));
    std::memcpy(v.data(), in_.data() + pos_, v.size() * sizeof(double));
    pos_ += v.size() * sizeof(double);
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw Error("checkpoint: truncated file");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::cadm: return "cadm";
    case Variant::fixed_context: return "fixed_context";
    case Variant::no_context: return "no_context";
  }
  return "cadm";
}

Variant parse_variant(std::string_view name) {
  if (name == "cadm") return Variant::cadm;
  if (name == "fixed_context") return Variant::fixed_context;
  if (name == "no_context") return Variant::no_context;
  throw Error("unknown encoder variant '" + std::string(name) +
              "' (expected cadm, fixed_context or no_context)");
}

ParamPack<Shape> param_shapes(const ModelDims& d) {
  const std::size_t W = d.word_dim, H = d.hidden_dim, A = d.attn_dim, X = d.joint_dim,
                    R = d.region_dim;
  if (!W || !H || !A || !X || !R) throw Error("model dimensions must be positive");
  ParamPack<Shape> p;
  p.sent_fwd_w = {4 * H, W + H};
  p.sent_fwd_b = {4 * H, 1};
  p.sent_bwd_w = {4 * H, W + H};
  p.sent_bwd_b = {4 * H, 1};
  p.sent_merge_w = {H, 2 * H + W};
  p.sent_merge_b = {H, 1};
  p.attn_w = {A, 2 * H};
  p.attn_b = {A, 1};
  p.attn_v = {A, 1};
  p.gate_w = {A, 2 * H};
  p.gate_b = {A, 1};
  p.gate_v = {A, 1};
  p.story_fwd_w = {4 * H, 2 * H};
  p.story_fwd_b = {4 * H, 1};
  p.story_bwd_w = {4 * H, 2 * H};
  p.story_bwd_b = {4 * H, 1};
  p.story_merge_w = {H, 3 * H};
  p.story_merge_b = {H, 1};
  p.proj_w = {X, H};
  p.proj_b = {X, 1};
  p.region_w = {X, R};
  p.region_b = {X, 1};
  return p;
}

ParamTensors zeros_like(const ModelDims& dims) {
  const auto shapes = param_shapes(dims);
  ParamTensors p;
  visit_pair(p, shapes, [](std::string_view, Tensor& t, const Shape& s) { t = Tensor(s.rows, s.cols); });
  return p;
}

ModelParams init_params(const ModelDims& dims, std::uint64_t seed, double scale) {
  ModelParams params{dims, zeros_like(dims)};
  std::mt19937_64 rng(seed);
  params.t.visit([&](std::string_view name, Tensor& t) {
    const bool bias = name.ends_with(".b");
    if (bias) return;
    for (double& v : t.data) v = (uniform01(rng) * 2.0 - 1.0) * scale;
  });
  const std::size_t H = dims.hidden_dim;
  for (Tensor* b : {&params.t.sent_fwd_b, &params.t.sent_bwd_b, &params.t.story_fwd_b,
                    &params.t.story_bwd_b}) {
    for (std::size_t i = H; i < 2 * H; ++i) (*b)[i] = 1.0;
  }
  return params;
}

void check_shapes(const ModelParams& params) {
  const auto expected = param_shapes(params.dims);
  visit_pair(params.t, expected, [](std::string_view name, const Tensor& got, const Shape& want) {
    if (got.rows != want.rows || got.cols != want.cols || got.data.size() != got.rows * got.cols) {
      throw Error("parameter " + std::string(name) + " has shape " + std::to_string(got.rows) +
                  "x" + std::to_string(got.cols) + ", expected " + std::to_string(want.rows) +
                  "x" + std::to_string(want.cols));
    }
  });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  t.visit([&](std::string_view, const Tensor& x) { n += x.size(); });
  return n;
}

bool ModelParams::operator==(const ModelParams& o) const {
  if (!(dims == o.dims)) return false;
  bool eq = true;
  visit_pair(t, o.t, [&](std::string_view, const Tensor& a, const Tensor& b) { eq = eq && a == b; });
  return eq;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  check_shapes(ckpt.params);
  Writer w;
  for (char c : kMagic) w.pod(c);
  w.pod(kVersion);
  const ModelDims& d = ckpt.params.dims;
  for (std::size_t v : {d.word_dim, d.hidden_dim, d.attn_dim, d.joint_dim, d.region_dim}) {
    w.pod<std::uint64_t>(v);
  }
  w.str(to_string(ckpt.variant));
  std::uint32_t count = 0;
  ckpt.params.t.visit([&](std::string_view, const Tensor&) { ++count; });
  w.pod(count);
  ckpt.params.t.visit([&](std::string_view name, const Tensor& t) {
    w.str(name);
    w.pod<std::uint64_t>(t.rows);
    w.pod<std::uint64_t>(t.cols);
    w.doubles(t.data);
  });
  w.pod<std::uint64_t>(ckpt.embeddings.dim());
  w.pod<std::uint64_t>(ckpt.embeddings.size());
  for (const auto& [token, vec] : ckpt.embeddings.entries()) {
    w.str(token);
    w.doubles(vec);
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  for (char c : kMagic) {
    if (r.pod<char>() != c) throw Error("checkpoint: bad magic");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ModelDims& d = ckpt.params.dims;
  for (std::size_t* v : {&d.word_dim, &d.hidden_dim, &d.attn_dim, &d.joint_dim, &d.region_dim}) {
    *v = r.pod<std::uint64_t>();
  }
  ckpt.variant = parse_variant(r.str());
  ckpt.params.t = zeros_like(d);
  const auto count = r.pod<std::uint32_t>();
  std::uint32_t seen = 0;
  ckpt.params.t.visit([&](std::string_view name, Tensor& t) {
    if (seen++ >= count) throw Error("checkpoint: missing tensor " + std::string(name));
    const std::string got = r.str();
    if (got != name) throw Error("checkpoint: expected tensor " + std::string(name) + ", found " + got);
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    if (rows != t.rows || cols != t.cols) throw Error("checkpoint: bad shape for " + got);
    r.doubles(t.data);
  });
  if (seen != count) throw Error("checkpoint: unexpected extra tensors");
  const auto edim = r.pod<std::uint64_t>();
  const auto ecount = r.pod<std::uint64_t>();
  ckpt.embeddings = EmbeddingTable(edim);
  for (std::uint64_t i = 0; i < ecount; ++i) {
    std::string token = r.str();
    Vec v(edim);
    r.doubles(v);
    ckpt.embeddings.set(token, std::move(v));
  }
  if (!r.done()) throw Error("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace storyseq
