// SPDX-License-Identifier: Apache-2.0

#include "tdnn/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "common/binio.hpp"

namespace tdnnq {

namespace {

constexpr char kModelMagic[4] = {'T', 'D', 'N', 'Q'};
constexpr char kModelEndMagic[4] = {'Q', 'N', 'D', 'T'};
constexpr char kFeatureMagic[4] = {'T', 'D', 'N', 'F'};
constexpr char kLabelMagic[4] = {'T', 'D', 'N', 'L'};

void write_qparams(BinWriter& w, const QuantParams& p) {
  w.f64(p.scale);
  w.i32(p.zero_point);
  w.u8(static_cast<std::uint8_t>(p.bits));
  w.u8(static_cast<std::uint8_t>(p.mode));
}

QuantParams read_qparams(BinReader& r) {
  QuantParams p;
  p.scale = r.f64();
  p.zero_point = r.i32();
  const std::uint8_t bits = r.u8();
  if (bits != 8 && bits != 16) raise(ErrorKind::format, "model file: bad bit width in " + r.section());
  p.bits = static_cast<QuantBits>(bits);
  const std::uint8_t mode = r.u8();
  if (mode > 1) raise(ErrorKind::format, "model file: bad quantization mode in " + r.section());
  p.mode = static_cast<QuantMode>(mode);
  p.validate();
  return p;
}

// Weight tensors are written float32, or as narrow integers plus their
// quantization params. Quantizing the snapped float weights reproduces the
// stored integers exactly, so a load/save cycle is byte-identical.
void write_tensor(BinWriter& w, const Matrix& m, const std::optional<QuantParams>& q) {
  if (!q) {
    w.u8(0);
  } else {
    w.u8(q->bits == QuantBits::b8 ? 1 : 2);
    write_qparams(w, *q);
  }
  w.u32(static_cast<std::uint32_t>(m.rows));
  w.u32(static_cast<std::uint32_t>(m.cols));
  if (!q) {
    w.array(m.data);
    return;
  }
  if (q->bits == QuantBits::b8) {
    std::vector<std::int8_t> payload(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) payload[i] = static_cast<std::int8_t>(quantize_value(m.data[i], *q));
    w.array(payload);
  } else {
    std::vector<std::int16_t> payload(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) payload[i] = static_cast<std::int16_t>(quantize_value(m.data[i], *q));
    w.array(payload);
  }
}

Matrix read_tensor(BinReader& r, std::optional<QuantParams>& q_out) {
  const std::uint8_t storage = r.u8();
  if (storage > 2) raise(ErrorKind::format, "model file: unknown tensor storage in " + r.section());
  std::optional<QuantParams> q;
  if (storage != 0) q = read_qparams(r);
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  if (static_cast<std::uint64_t>(rows) * cols > (1ull << 31))
    raise(ErrorKind::format, "model file: implausible tensor shape in " + r.section());
  Matrix m(rows, cols);
  if (storage == 0) {
    m.data = r.array<float>(m.size());
  } else if (storage == 1) {
    const auto payload = r.array<std::int8_t>(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = dequantize_value(payload[i], *q);
  } else {
    const auto payload = r.array<std::int16_t>(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = dequantize_value(payload[i], *q);
  }
  q_out = q;
  return m;
}

void write_floatvec(BinWriter& w, const std::vector<float>& v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  w.array(v);
}

std::vector<float> read_floatvec(BinReader& r) {
  const std::uint32_t n = r.u32();
  if (n > (1u << 28)) raise(ErrorKind::format, "model file: implausible vector length in " + r.section());
  return r.array<float>(n);
}

}  // namespace

ModelFile ModelFile::plain(TdnnModel m) {
  ModelFile f;
  f.model = std::move(m);
  return f;
}

ModelFile ModelFile::bundle(const QuantizedModel& qm) {
  ModelFile f;
  f.model = qm.model;
  f.scheme = qm.scheme;
  f.act_params = qm.act_params;
  f.out_params = qm.out_params;
  return f;
}

QuantizedModel ModelFile::as_quantized() const {
  if (!scheme) raise(ErrorKind::invalid_argument, "model file is not a quantized bundle");
  QuantizedModel qm;
  qm.model = model;
  qm.scheme = *scheme;
  qm.act_params = act_params;
  qm.out_params = out_params;
  qm.validate();
  return qm;
}

void save_model(const ModelFile& file, const std::string& path) {
  file.model.validate();
  BinWriter w(path);
  w.magic(kModelMagic);
  w.u32(kModelFormatVersion);
  w.u8(static_cast<std::uint8_t>(file.model.head_kind));
  w.u8(file.scheme ? static_cast<std::uint8_t>(*file.scheme) : 0);
  w.u16(0);
  w.u32(static_cast<std::uint32_t>(file.model.layers.size()));

  w.u32(static_cast<std::uint32_t>(file.model.metadata.size()));
  for (const auto& [k, v] : file.model.metadata) {
    w.str(k);
    w.str(v);
  }

  for (const auto& layer : file.model.layers) {
    w.u8(static_cast<std::uint8_t>(layer.kind));
    w.u32(static_cast<std::uint32_t>(layer.in_dim));
    w.u32(static_cast<std::uint32_t>(layer.out_dim));
    w.u32(static_cast<std::uint32_t>(layer.context_offsets.size()));
    for (auto o : layer.context_offsets) w.i32(o);
    if (layer.kind == LayerKind::dense) {
      write_tensor(w, layer.weights, layer.stored_weight_q);
    } else {
      w.u32(static_cast<std::uint32_t>(layer.rank));
      write_tensor(w, layer.factor_a, layer.stored_weight_q);
      write_tensor(w, layer.factor_b, layer.stored_weight_q);
    }
    write_floatvec(w, layer.bias);
    write_floatvec(w, layer.bn_scale);
    write_floatvec(w, layer.bn_shift);
  }

  write_tensor(w, file.model.output_weights, file.model.stored_head_q);
  write_floatvec(w, file.model.output_bias);

  if (file.scheme) {
    w.u32(static_cast<std::uint32_t>(file.act_params.size()));
    for (const auto& p : file.act_params) write_qparams(w, p);
    if (*file.scheme == QuantScheme::requant) {
      w.u32(static_cast<std::uint32_t>(file.out_params.size()));
      for (const auto& p : file.out_params) write_qparams(w, p);
    }
  }
  w.magic(kModelEndMagic);
  w.finish();
}

ModelFile load_model(const std::string& path) {
  BinReader r(path);
  r.section("header");
  r.expect_magic(kModelMagic, "model header");
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion)
    raise(ErrorKind::format, path + ": unsupported model format version " + std::to_string(version));

  ModelFile file;
  const std::uint8_t head_kind = r.u8();
  if (head_kind > 2) raise(ErrorKind::format, path + ": bad head kind");
  file.model.head_kind = static_cast<HeadKind>(head_kind);
  const std::uint8_t scheme = r.u8();
  if (scheme > 2) raise(ErrorKind::format, path + ": bad bundle scheme");
  if (scheme != 0) file.scheme = static_cast<QuantScheme>(scheme);
  r.u16();
  const std::uint32_t n_layers = r.u32();
  if (n_layers == 0 || n_layers > 4096) raise(ErrorKind::format, path + ": implausible layer count");

  r.section("metadata");
  const std::uint32_t n_meta = r.u32();
  if (n_meta > 4096) raise(ErrorKind::format, path + ": implausible metadata count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    file.model.metadata[k] = r.str();
  }

  for (std::uint32_t i = 0; i < n_layers; ++i) {
    r.section("layer " + std::to_string(i));
    TdnnLayer layer;
    const std::uint8_t kind = r.u8();
    if (kind > 1) raise(ErrorKind::format, path + ": bad layer kind in " + r.section());
    layer.kind = static_cast<LayerKind>(kind);
    layer.in_dim = r.u32();
    layer.out_dim = r.u32();
    const std::uint32_t n_ctx = r.u32();
    if (n_ctx == 0 || n_ctx > 1024) raise(ErrorKind::format, path + ": implausible context size in " + r.section());
    layer.context_offsets.resize(n_ctx);
    for (auto& o : layer.context_offsets) o = r.i32();
    if (layer.kind == LayerKind::dense) {
      layer.weights = read_tensor(r, layer.stored_weight_q);
    } else {
      layer.rank = r.u32();
      std::optional<QuantParams> qa, qb;
      layer.factor_a = read_tensor(r, qa);
      layer.factor_b = read_tensor(r, qb);
      layer.stored_weight_q = qa;
    }
    layer.bias = read_floatvec(r);
    layer.bn_scale = read_floatvec(r);
    layer.bn_shift = read_floatvec(r);
    file.model.layers.push_back(std::move(layer));
  }

  r.section("output head");
  file.model.output_weights = read_tensor(r, file.model.stored_head_q);
  file.model.output_bias = read_floatvec(r);

  if (file.scheme) {
    r.section("activation params");
    const std::uint32_t n_act = r.u32();
    if (n_act != n_layers + 1) raise(ErrorKind::format, path + ": activation param count does not match layers");
    for (std::uint32_t i = 0; i < n_act; ++i) file.act_params.push_back(read_qparams(r));
    if (*file.scheme == QuantScheme::requant) {
      r.section("output params");
      const std::uint32_t n_out = r.u32();
      if (n_out != n_layers + 1) raise(ErrorKind::format, path + ": output param count does not match layers");
      for (std::uint32_t i = 0; i < n_out; ++i) file.out_params.push_back(read_qparams(r));
    }
  }

  r.section("trailer");
  r.expect_magic(kModelEndMagic, "model trailer");

  try {
    file.model.validate();
  } catch (const Error& e) {
    raise(ErrorKind::format, path + ": inconsistent model: " + e.what());
  }
  return file;
}

std::size_t FeatureSet::total_frames() const {
  std::size_t n = 0;
  for (const auto& u : utterances) n += u.rows;
  return n;
}

std::size_t LabelSet::total_frames() const {
  std::size_t n = 0;
  for (const auto& u : utterances) n += u.size();
  return n;
}

void save_features(const FeatureSet& fs, const std::string& path) {
  if (fs.utterances.empty()) raise(ErrorKind::invalid_input, "save_features: empty set");
  BinWriter w(path);
  w.magic(kFeatureMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(fs.utterances.size()));
  w.u32(static_cast<std::uint32_t>(fs.dim()));
  for (const auto& u : fs.utterances) {
    if (u.cols != fs.dim()) raise(ErrorKind::dimension, "save_features: inconsistent frame dim");
    w.u32(static_cast<std::uint32_t>(u.rows));
    w.array(u.data);
  }
  w.finish();
}

namespace {

bool has_magic(const std::string& path, const char tag[4]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::io, "cannot open for reading: " + path);
  char buf[4] = {0, 0, 0, 0};
  in.read(buf, 4);
  return in.gcount() == 4 && std::memcmp(buf, tag, 4) == 0;
}

FeatureSet load_features_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::io, "cannot open for reading: " + path);
  std::vector<std::vector<float>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<float> row;
    float v;
    while (ss >> v) row.push_back(v);
    if (!ss.eof()) raise(ErrorKind::format, path + ": line " + std::to_string(lineno) + ": not a number");
    if (row.empty()) continue;
    if (!rows.empty() && row.size() != rows.front().size())
      raise(ErrorKind::format, path + ": line " + std::to_string(lineno) + ": ragged row");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) raise(ErrorKind::format, path + ": no frames");
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < m.cols; ++c) m.at(r, c) = rows[r][c];
  FeatureSet fs;
  fs.utterances.push_back(std::move(m));
  return fs;
}

}  // namespace

FeatureSet load_features(const std::string& path) {
  if (!has_magic(path, kFeatureMagic)) return load_features_text(path);
  BinReader r(path);
  r.section("feature header");
  r.expect_magic(kFeatureMagic, "feature header");
  const std::uint32_t version = r.u32();
  if (version != 1) raise(ErrorKind::format, path + ": unsupported feature format version");
  const std::uint32_t n_utts = r.u32();
  const std::uint32_t dim = r.u32();
  if (n_utts == 0 || dim == 0 || n_utts > (1u << 24) || dim > (1u << 20))
    raise(ErrorKind::format, path + ": implausible feature header");
  FeatureSet fs;
  for (std::uint32_t i = 0; i < n_utts; ++i) {
    r.section("utterance " + std::to_string(i));
    const std::uint32_t frames = r.u32();
    if (frames == 0 || frames > (1u << 24)) raise(ErrorKind::format, path + ": implausible frame count");
    Matrix m(frames, dim);
    m.data = r.array<float>(m.size());
    fs.utterances.push_back(std::move(m));
  }
  return fs;
}

void save_labels(const LabelSet& ls, const std::string& path) {
  if (ls.utterances.empty()) raise(ErrorKind::invalid_input, "save_labels: empty set");
  BinWriter w(path);
  w.magic(kLabelMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(ls.utterances.size()));
  for (const auto& u : ls.utterances) {
    w.u32(static_cast<std::uint32_t>(u.size()));
    w.array(u);
  }
  w.finish();
}

LabelSet load_labels(const std::string& path) {
  if (!has_magic(path, kLabelMagic)) {
    std::ifstream in(path);
    if (!in) raise(ErrorKind::io, "cannot open for reading: " + path);
    LabelSet ls;
    ls.utterances.emplace_back();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        ls.utterances.back().push_back(std::stoi(line));
      } catch (const std::exception&) {
        raise(ErrorKind::format, path + ": line " + std::to_string(lineno) + ": not an integer label");
      }
    }
    if (ls.utterances.back().empty()) raise(ErrorKind::format, path + ": no labels");
    return ls;
  }
  BinReader r(path);
  r.section("label header");
  r.expect_magic(kLabelMagic, "label header");
  const std::uint32_t version = r.u32();
  if (version != 1) raise(ErrorKind::format, path + ": unsupported label format version");
  const std::uint32_t n_utts = r.u32();
  if (n_utts == 0 || n_utts > (1u << 24)) raise(ErrorKind::format, path + ": implausible label header");
  LabelSet ls;
  for (std::uint32_t i = 0; i < n_utts; ++i) {
    r.section("labels " + std::to_string(i));
    const std::uint32_t frames = r.u32();
    if (frames > (1u << 24)) raise(ErrorKind::format, path + ": implausible label count");
    ls.utterances.push_back(r.array<std::int32_t>(frames));
  }
  return ls;
}

}  // namespace tdnnq
