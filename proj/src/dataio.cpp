#include <array>
#include "emoanti/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <unistd.h>

#include "byte_codec.hpp"
#include "emoanti/errors.hpp"

namespace emoanti {

using detail::ByteReader;
using detail::ByteWriter;

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move output into place at '" + path.string() + "'");
  }
}

void write_file_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Bytes read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

namespace {

std::string read_text(const fs::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

void expect_magic(ByteReader& r, const char (&magic)[5]) {
  if (r.remaining() < 4) {
    throw TruncatedError(r.what() + ": file shorter than its 4-byte magic");
  }
  auto m = r.bytes(4, "magic");
  if (std::memcmp(m.data(), magic, 4) != 0) {
    throw BadMagicError(r.what() + ": bad magic '" + std::string(m.begin(), m.end()) + "' (expected '" + magic + "')");
  }
}

void expect_end(const ByteReader& r) {
  if (r.remaining() != 0) {
    throw FormatError(r.what() + ": " + std::to_string(r.remaining()) + " unexpected trailing bytes");
  }
}

// ---- features ---------------------------------------------------------------

FeatureHeader read_feature_header_from(ByteReader& r) {
  expect_magic(r, "EMOF");
  FeatureHeader h;
  h.version = r.u16("version");
  if (h.version != kFeatureVersion) {
    throw VersionError(r.what() + ": unsupported feature format version " + std::to_string(h.version) +
                       " (supported: " + std::to_string(kFeatureVersion) + ")");
  }
  h.utt_id = r.str("utt_id");
  h.num_layers = r.u32("L");
  h.num_frames = r.u32("T");
  h.num_channels = r.u32("C");
  if (h.num_layers == 0 || h.num_frames == 0 || h.num_channels == 0) {
    throw FormatError(r.what() + ": L, T and C must all be positive");
  }
  return h;
}

}  // namespace

Bytes encode_features(const LayerFeatures& features) {
  features.validate();
  ByteWriter w;
  w.bytes("EMOF", 4);
  w.u16(kFeatureVersion);
  w.str(features.utt_id);
  w.u32(static_cast<std::uint32_t>(features.num_layers()));
  w.u32(static_cast<std::uint32_t>(features.num_frames()));
  w.u32(static_cast<std::uint32_t>(features.num_channels()));
  for (double v : features.layers.data()) {
    const float f = static_cast<float>(v);
    if (!std::isfinite(f)) {
      throw NonFiniteError("utterance '" + features.utt_id + "' has a value outside the float32 range");
    }
    w.f32(f);
  }
  return std::move(w.buffer());
}

FeatureHeader decode_feature_header(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "feature file");
  return read_feature_header_from(r);
}

LayerFeatures decode_features(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "feature file");
  const FeatureHeader h = read_feature_header_from(r);
  const std::uint64_t limit = r.remaining() / 4 + 1;
  const std::uint64_t n = detail::checked_mul(
      detail::checked_mul(h.num_layers, h.num_frames, limit, r.what()), h.num_channels, limit, r.what());
  r.need(static_cast<std::size_t>(n) * 4, "feature payload");
  std::vector<double> data(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const float f = r.f32("feature payload");
    if (!std::isfinite(f)) {
      throw NonFiniteDataError(r.what() + ": non-finite value at element " + std::to_string(i));
    }
    data[i] = f;
  }
  expect_end(r);
  return LayerFeatures{h.utt_id, Tensor({h.num_layers, h.num_frames, h.num_channels}, std::move(data))};
}

void write_features(const fs::path& path, const LayerFeatures& features) {
  write_file_atomic(path, encode_features(features));
}

LayerFeatures read_features(const fs::path& path) { return decode_features(read_file(path)); }

FeatureHeader read_feature_header(const fs::path& path) { return decode_feature_header(read_file(path)); }

std::size_t frontend_frame_count(std::size_t samples) {
  constexpr std::array<std::size_t, 7> kernels{10, 3, 3, 3, 3, 2, 2};
  constexpr std::array<std::size_t, 7> strides{5, 2, 2, 2, 2, 2, 2};
  std::size_t n = samples;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    if (n < kernels[i]) return 0;
    n = (n - kernels[i]) / strides[i] + 1;
  }
  return n;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (double v : t.data()) w.f64(v);
}

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Reads a named tensor; with `materialize` false the payload is skipped.
NamedTensor read_tensor(ByteReader& r, bool materialize, std::size_t* count = nullptr) {
  NamedTensor out;
  out.name = r.str("tensor name");
  const std::uint32_t rank = r.u32("tensor rank");
  if (rank == 0 || rank > 8) throw FormatError(r.what() + ": tensor '" + out.name + "' has invalid rank");
  Shape shape;
  const std::uint64_t limit = r.remaining() / 8 + 1;
  std::uint64_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t d = r.u64("tensor extent");
    if (d == 0) throw FormatError(r.what() + ": tensor '" + out.name + "' has a zero extent");
    n = detail::checked_mul(n, d, limit, r.what());
    shape.push_back(static_cast<std::size_t>(d));
  }
  r.need(static_cast<std::size_t>(n) * 8, "tensor payload");
  if (count) *count += static_cast<std::size_t>(n);
  if (!materialize) {
    r.skip(static_cast<std::size_t>(n) * 8, "tensor payload");
    return out;
  }
  std::vector<double> data(static_cast<std::size_t>(n));
  for (double& v : data) {
    v = r.f64("tensor payload");
    if (!std::isfinite(v)) throw NonFiniteDataError(r.what() + ": tensor '" + out.name + "' has a non-finite value");
  }
  out.value = Tensor(std::move(shape), std::move(data));
  return out;
}

void write_config(ByteWriter& w, const ModelConfig& c) {
  w.u64(c.input_channels);
  w.i64(c.input_layer_index);
  w.u32(static_cast<std::uint32_t>(c.layer_taps.size()));
  for (std::size_t t : c.layer_taps) w.u64(t);
  for (std::size_t d : c.d_hidden) w.u64(d);
  w.u64(c.attention_width);
  w.u64(c.classifier_width);
  w.f64(c.dropout);
  w.u8(static_cast<std::uint8_t>(c.ablation));
  w.f64(c.batchnorm.eps);
  w.f64(c.batchnorm.momentum);
}

ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  c.input_channels = r.u64("input_channels");
  c.input_layer_index = r.i64("input_layer_index");
  const std::uint32_t taps = r.u32("layer tap count");
  r.need(static_cast<std::size_t>(taps) * 8, "layer taps");
  for (std::uint32_t i = 0; i < taps; ++i) c.layer_taps.push_back(r.u64("layer tap"));
  for (std::size_t& d : c.d_hidden) d = r.u64("d_hidden");
  c.attention_width = r.u64("attention_width");
  c.classifier_width = r.u64("classifier_width");
  c.dropout = r.f64("dropout");
  const std::uint8_t ab = r.u8("ablation");
  if (ab > static_cast<std::uint8_t>(Ablation::no_crfe)) throw FormatError(r.what() + ": unknown ablation code");
  c.ablation = static_cast<Ablation>(ab);
  c.batchnorm.eps = r.f64("batchnorm eps");
  c.batchnorm.momentum = r.f64("batchnorm momentum");
  try {
    c.validate();
  } catch (const Error& e) {
    throw FormatError(r.what() + ": invalid hyperparameters: " + e.what());
  }
  return c;
}

struct ParsedCheckpoint {
  CheckpointHeader header;
  std::vector<NamedTensor> tensors;
  struct Buffer {
    std::string name;
    BatchNormStats stats;
  };
  std::vector<Buffer> buffers;
  std::optional<AdamState> adam;
};

ParsedCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes, bool materialize) {
  ByteReader r(bytes, "checkpoint");
  expect_magic(r, "EMOC");
  ParsedCheckpoint p;
  CheckpointHeader& h = p.header;
  h.version = r.u16("version");
  if (h.version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported version " + std::to_string(h.version) +
                       " (supported: " + std::to_string(kCheckpointVersion) + ")");
  }
  h.config = read_config(r);
  h.meta.seed = r.u64("seed");
  h.meta.epoch = r.u32("epoch");
  h.meta.val_loss = r.f64("val_loss");

  h.num_tensors = r.u32("tensor count");
  for (std::size_t i = 0; i < h.num_tensors; ++i) {
    p.tensors.push_back(read_tensor(r, materialize, &h.num_values));
  }

  const std::uint32_t nbuf = r.u32("buffer count");
  for (std::uint32_t i = 0; i < nbuf; ++i) {
    ParsedCheckpoint::Buffer b;
    b.name = r.str("buffer name");
    b.stats.initialized = r.u8("buffer initialized") != 0;
    NamedTensor mean = read_tensor(r, materialize);
    NamedTensor var = read_tensor(r, materialize);
    b.stats.mean = std::move(mean.value);
    b.stats.var = std::move(var.value);
    p.buffers.push_back(std::move(b));
  }

  h.has_adam = r.u8("adam flag") != 0;
  if (h.has_adam) {
    AdamState s;
    s.beta1 = r.f64("adam beta1");
    s.beta2 = r.f64("adam beta2");
    s.eps = r.f64("adam eps");
    s.step = r.u64("adam step");
    const std::uint32_t n = r.u32("adam tensor count");
    for (std::uint32_t i = 0; i < n; ++i) {
      s.m.push_back(read_tensor(r, materialize).value);
      s.v.push_back(read_tensor(r, materialize).value);
    }
    p.adam = std::move(s);
  }
  expect_end(r);
  return p;
}

}  // namespace

Bytes encode_checkpoint(EmoAntiModel& model, const CheckpointMeta& meta, const AdamState* adam) {
  const std::vector<Parameter*> params = model.parameters();
  ByteWriter w;
  w.bytes("EMOC", 4);
  w.u16(kCheckpointVersion);
  write_config(w, model.config());
  w.u64(meta.seed);
  w.u32(meta.epoch);
  w.f64(meta.val_loss);

  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) write_tensor(w, p->name, p->value);

  const auto buffers = model.buffers();
  w.u32(static_cast<std::uint32_t>(buffers.size()));
  for (const auto& [name, stats] : buffers) {
    w.str(name);
    w.u8(stats->initialized ? 1 : 0);
    write_tensor(w, "mean", stats->mean);
    write_tensor(w, "var", stats->var);
  }

  w.u8(adam ? 1 : 0);
  if (adam) {
    adam->check_compatible(params);
    w.f64(adam->beta1);
    w.f64(adam->beta2);
    w.f64(adam->eps);
    w.u64(adam->step);
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      write_tensor(w, params[i]->name + ".m", adam->m[i]);
      write_tensor(w, params[i]->name + ".v", adam->v[i]);
    }
  }
  return std::move(w.buffer());
}

CheckpointHeader decode_checkpoint_header(std::span<const std::uint8_t> bytes) {
  return parse_checkpoint(bytes, false).header;
}

LoadedCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ParsedCheckpoint p = parse_checkpoint(bytes, true);
  LoadedCheckpoint out{EmoAntiModel(p.header.config, 0), p.header.meta, std::nullopt};

  const std::vector<Parameter*> params = out.model.parameters();
  if (p.tensors.size() != params.size()) {
    throw FormatError("checkpoint: " + std::to_string(p.tensors.size()) + " parameter tensors, model defines " +
                      std::to_string(params.size()));
  }
  std::set<std::string> seen;
  for (NamedTensor& t : p.tensors) {
    if (!seen.insert(t.name).second) throw FormatError("checkpoint: duplicate tensor '" + t.name + "'");
    auto it = std::find_if(params.begin(), params.end(), [&](const Parameter* q) { return q->name == t.name; });
    if (it == params.end()) throw FormatError("checkpoint: unexpected tensor '" + t.name + "'");
    if (t.value.shape() != (*it)->value.shape()) {
      throw FormatError("checkpoint: tensor '" + t.name + "' has shape " + shape_to_string(t.value.shape()) +
                        ", expected " + shape_to_string((*it)->value.shape()));
    }
    (*it)->value = std::move(t.value);
    (*it)->zero_grad();
  }

  auto buffers = out.model.buffers();
  if (p.buffers.size() != buffers.size()) throw FormatError("checkpoint: BatchNorm buffer count mismatch");
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    auto& [name, stats] = buffers[i];
    ParsedCheckpoint::Buffer& b = p.buffers[i];
    if (b.name != name) throw FormatError("checkpoint: expected buffer '" + name + "', found '" + b.name + "'");
    if (b.stats.mean.shape() != stats->mean.shape() || b.stats.var.shape() != stats->var.shape()) {
      throw FormatError("checkpoint: buffer '" + name + "' has the wrong channel count");
    }
    *stats = std::move(b.stats);
  }

  if (p.adam) {
    try {
      p.adam->check_compatible(params);
    } catch (const ShapeError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
    out.adam = std::move(p.adam);
  }
  return out;
}

void save_checkpoint(const fs::path& path, EmoAntiModel& model, const CheckpointMeta& meta, const AdamState* adam) {
  write_file_atomic(path, encode_checkpoint(model, meta, adam));
}

LoadedCheckpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

CheckpointHeader read_checkpoint_header(const fs::path& path) { return decode_checkpoint_header(read_file(path)); }

// ---- manifests --------------------------------------------------------------

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::string> whitespace_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Calls `fn(lineno, line)` for every non-blank line with any trailing CR removed.
template <class Fn>
void for_each_line(const std::string& text, Fn fn) {
  std::size_t start = 0;
  int lineno = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++lineno;
    if (line.find_first_not_of(" \t") != std::string::npos) fn(lineno, line);
    start = end + 1;
  }
}

}  // namespace

std::size_t Manifest::count(TrialLabel label) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.label == label; }));
}

Manifest Manifest::parse(const std::string& text, const fs::path& base_dir) {
  Manifest m;
  std::set<std::string> ids;
  for_each_line(text, [&](int lineno, const std::string& line) {
    const auto fields = split(line, '\t');
    const std::string where = "manifest line " + std::to_string(lineno);
    if (fields.size() != 3) throw FormatError(where + ": expected utt_id<TAB>path<TAB>label");
    if (fields[0].empty() || fields[1].empty()) throw FormatError(where + ": empty utt_id or path");
    if (!ids.insert(fields[0]).second) throw FormatError(where + ": duplicate utt_id '" + fields[0] + "'");
    ManifestEntry e;
    e.utt_id = fields[0];
    e.path = fs::path(fields[1]);
    if (e.path.is_relative()) e.path = base_dir / e.path;
    try {
      e.label = parse_label(fields[2]);
    } catch (const InvalidArgument& err) {
      throw FormatError(where + ": " + err.what());
    }
    m.entries.push_back(std::move(e));
  });
  return m;
}

Manifest Manifest::load(const fs::path& path) {
  Manifest m = parse(read_text(path), path.parent_path());
  for (const ManifestEntry& e : m.entries) {
    if (!fs::is_regular_file(e.path)) {
      throw IoError("manifest '" + path.string() + "': feature file for '" + e.utt_id + "' not found at '" +
                    e.path.string() + "'");
    }
  }
  return m;
}

void Manifest::save(const fs::path& path) const {
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  std::string text;
  for (const ManifestEntry& e : entries) {
    if (e.utt_id.find_first_of("\t\n") != std::string::npos) {
      throw InvalidArgument("utt_id '" + e.utt_id + "' contains a tab or newline");
    }
    fs::path p = e.path;
    const fs::path rel = p.lexically_relative(base);
    if (!rel.empty() && *rel.begin() != "..") p = rel;
    text += e.utt_id + '\t' + p.generic_string() + '\t' + to_string(e.label) + '\n';
  }
  write_file_atomic(path, text);
}

// ---- scores and keys --------------------------------------------------------

std::string format_scores(std::span<const Score> scores) {
  std::string text;
  char buf[64];
  for (const Score& s : scores) {
    if (!std::isfinite(s.score)) throw NonFiniteError("score of '" + s.utt_id + "' is not finite");
    if (s.utt_id.find_first_of(" \t\n") != std::string::npos) {
      throw InvalidArgument("utt_id '" + s.utt_id + "' contains whitespace");
    }
    const auto res = std::to_chars(buf, buf + sizeof buf, s.score);
    text += s.utt_id;
    text += ' ';
    text.append(buf, res.ptr);
    text += '\n';
  }
  return text;
}

void write_scores(const fs::path& path, std::span<const Score> scores) { write_file_atomic(path, format_scores(scores)); }

std::vector<Score> parse_scores(const std::string& text) {
  std::vector<Score> out;
  std::set<std::string> ids;
  for_each_line(text, [&](int lineno, const std::string& line) {
    const auto f = whitespace_fields(line);
    const std::string where = "score file line " + std::to_string(lineno);
    if (f.size() != 2) throw FormatError(where + ": expected 'utt_id score'");
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(f[1].data(), f[1].data() + f[1].size(), v);
    if (ec != std::errc() || ptr != f[1].data() + f[1].size()) throw FormatError(where + ": bad score '" + f[1] + "'");
    if (!std::isfinite(v)) throw NonFiniteDataError(where + ": score is not finite");
    if (!ids.insert(f[0]).second) throw FormatError(where + ": duplicate utt_id '" + f[0] + "'");
    out.push_back({f[0], v});
  });
  return out;
}

std::vector<Score> read_scores(const fs::path& path) { return parse_scores(read_text(path)); }

std::map<std::string, TrialLabel> parse_keys(const std::string& text) {
  std::map<std::string, TrialLabel> out;
  for_each_line(text, [&](int lineno, const std::string& line) {
    const auto f = whitespace_fields(line);
    const std::string where = "key file line " + std::to_string(lineno);
    if (f.size() != 2) throw FormatError(where + ": expected 'utt_id label'");
    TrialLabel label;
    try {
      label = parse_label(f[1]);
    } catch (const InvalidArgument& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (!out.emplace(f[0], label).second) throw FormatError(where + ": duplicate utt_id '" + f[0] + "'");
  });
  return out;
}

std::map<std::string, TrialLabel> read_keys(const fs::path& path) { return parse_keys(read_text(path)); }

void write_keys(const fs::path& path, const Manifest& manifest) {
  std::string text;
  for (const ManifestEntry& e : manifest.entries) text += e.utt_id + ' ' + to_string(e.label) + '\n';
  write_file_atomic(path, text);
}

std::vector<ScoreRecord> join_scores(std::span<const Score> scores, const std::map<std::string, TrialLabel>& keys) {
  std::vector<ScoreRecord> out;
  out.reserve(scores.size());
  for (const Score& s : scores) {
    auto it = keys.find(s.utt_id);
    if (it == keys.end()) throw InvalidArgument("no key for scored utterance '" + s.utt_id + "'");
    out.push_back({s.utt_id, s.score, it->second});
  }
  return out;
}

}  // namespace emoanti
