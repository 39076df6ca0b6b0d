// SPDX-License-Identifier: Apache-2.0
#include "affect/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include "affect/error.hpp"
#include "affect/rng.hpp"

namespace affect {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'B', '1'};
constexpr std::uint16_t kVersion = 1;

class ByteReader {
 public:
  ByteReader(const std::filesystem::path& path) : path_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path_ + ": cannot open for reading");
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  std::size_t offset() const { return offset_; }
  std::size_t size() const { return bytes_.size(); }

  void need(std::size_t n, const char* what) {
    if (offset_ + n > bytes_.size()) {
      throw ParseError(path_ + ": truncated " + what + ": expected " + std::to_string(n) +
                       " bytes at offset " + std::to_string(offset_) + ", file ends at offset " +
                       std::to_string(bytes_.size()));
    }
  }

  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + offset_, n);
    offset_ += n;
  }

  template <typename T>
  T scalar(const char* what) {
    T v;
    raw(&v, sizeof(T), what);
    return v;
  }

  std::string string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + offset_), n);
    offset_ += n;
    return s;
  }

  void expect_end() {
    if (offset_ != bytes_.size()) {
      throw ParseError(path_ + ": " + std::to_string(bytes_.size() - offset_) +
                       " unexpected trailing bytes at offset " + std::to_string(offset_));
    }
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<std::uint8_t> bytes_;
  std::size_t offset_ = 0;
};

}  // namespace

void VideoRecord::validate() const {
  if (video_id.empty()) throw ContractError("VideoRecord: empty video_id");
  if (n_frames < 1 || feat_dim < 1) {
    throw ContractError("VideoRecord " + video_id + ": n_frames and feat_dim must be positive");
  }
  if (static_cast<long>(features.size()) != n_frames * feat_dim) {
    throw ContractError("VideoRecord " + video_id + ": feature count " +
                        std::to_string(features.size()) + " != n_frames*feat_dim " +
                        std::to_string(n_frames * feat_dim));
  }
  if (label_kind == LabelKind::va) {
    if (static_cast<long>(va.size()) != n_frames * 2) {
      throw ContractError("VideoRecord " + video_id + ": VA label count " +
                          std::to_string(va.size()) + " != n_frames*2");
    }
    for (float v : va) {
      if (!(v >= -1.0f && v <= 1.0f)) {
        throw ContractError("VideoRecord " + video_id + ": VA label " + std::to_string(v) +
                            " outside [-1, 1]");
      }
    }
  } else if (label_kind == LabelKind::au12) {
    if (static_cast<long>(au.size()) != n_frames * kAuChannels) {
      throw ContractError("VideoRecord " + video_id + ": AU label count " +
                          std::to_string(au.size()) + " != n_frames*12");
    }
    for (std::uint8_t b : au) {
      if (b > 1) throw ContractError("VideoRecord " + video_id + ": AU bit out of {0,1}");
    }
  }
}

VideoRecord read_video_file(const std::filesystem::path& path) {
  ByteReader in(path);
  char magic[4];
  in.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError(in.path() + ": bad magic at offset 0, not an AFB1 file");
  }
  const auto version = in.scalar<std::uint16_t>("version");
  if (version != kVersion) {
    throw ParseError(in.path() + ": unsupported version " + std::to_string(version) +
                     " at offset 4");
  }
  const auto kind_byte = in.scalar<std::uint8_t>("label kind");
  if (kind_byte > 2) {
    throw ParseError(in.path() + ": unknown label kind " + std::to_string(kind_byte) +
                     " at offset 6");
  }
  in.scalar<std::uint8_t>("reserved byte");

  VideoRecord rec;
  rec.label_kind = static_cast<LabelKind>(kind_byte);
  const auto id_len = in.scalar<std::uint16_t>("video id length");
  rec.video_id = in.string(id_len, "video id");
  rec.n_frames = in.scalar<std::uint32_t>("frame count");
  rec.feat_dim = in.scalar<std::uint32_t>("feature dim");
  if (rec.n_frames < 1 || rec.feat_dim < 1) {
    throw ParseError(in.path() + ": non-positive frame count or feature dim in header");
  }

  rec.features.resize(rec.n_frames * rec.feat_dim);
  in.raw(rec.features.data(), rec.features.size() * sizeof(float), "features");
  if (rec.label_kind == LabelKind::va) {
    rec.va.resize(rec.n_frames * 2);
    in.raw(rec.va.data(), rec.va.size() * sizeof(float), "VA labels");
  } else if (rec.label_kind == LabelKind::au12) {
    rec.au.resize(rec.n_frames * kAuChannels);
    in.raw(rec.au.data(), rec.au.size(), "AU labels");
  }
  in.expect_end();

  try {
    rec.validate();
  } catch (const ContractError& e) {
    throw ParseError(in.path() + ": invalid payload: " + e.what());
  }
  return rec;
}

void write_video_file(const std::filesystem::path& path, const VideoRecord& record) {
  record.validate();
  if (record.video_id.size() > 0xffff) {
    throw ContractError("write_video_file: video id longer than 65535 bytes");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");

  auto put = [&out](const void* p, std::size_t n) {
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
  };
  put(kMagic, 4);
  put(&kVersion, 2);
  const auto kind = static_cast<std::uint8_t>(record.label_kind);
  const std::uint8_t reserved = 0;
  put(&kind, 1);
  put(&reserved, 1);
  const auto id_len = static_cast<std::uint16_t>(record.video_id.size());
  put(&id_len, 2);
  put(record.video_id.data(), record.video_id.size());
  const auto frames = static_cast<std::uint32_t>(record.n_frames);
  const auto dim = static_cast<std::uint32_t>(record.feat_dim);
  put(&frames, 4);
  put(&dim, 4);
  put(record.features.data(), record.features.size() * sizeof(float));
  if (record.label_kind == LabelKind::va) {
    put(record.va.data(), record.va.size() * sizeof(float));
  } else if (record.label_kind == LabelKind::au12) {
    put(record.au.data(), record.au.size());
  }
  if (!out) throw IoError(path.string() + ": write failed");
}

std::filesystem::path Manifest::resolve(const ManifestEntry& e) const {
  std::filesystem::path p(e.path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<ManifestEntry> Manifest::with_split(const std::string& split) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(e);
  }
  return out;
}

const ManifestEntry* Manifest::find(const std::string& video_id) const {
  for (const auto& e : entries) {
    if (e.video_id == video_id) return &e;
  }
  return nullptr;
}

Manifest read_manifest(const std::filesystem::path& path, bool check_files) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open manifest");
  Manifest m;
  m.base_dir = path.parent_path();
  std::set<std::string> seen;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      std::size_t tab = line.find('\t', pos);
      fields.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (fields.size() != 4) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    }
    ManifestEntry e;
    e.video_id = fields[0];
    e.path = fields[1];
    e.split = fields[2];
    if (e.split != "train" && e.split != "val" && e.split != "test") {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": unknown split '" +
                       e.split + "' (want train/val/test)");
    }
    if (fields[3] == "-") {
      e.fold = -1;
    } else {
      try {
        e.fold = std::stoi(fields[3]);
      } catch (...) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad fold field '" +
                         fields[3] + "'");
      }
      if (e.fold < 0) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": negative fold index");
      }
    }
    if (!seen.insert(e.video_id).second) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": duplicate video id '" +
                       e.video_id + "'");
    }
    m.entries.push_back(std::move(e));
  }
  if (check_files) {
    for (const auto& e : m.entries) {
      if (!std::filesystem::exists(m.resolve(e))) {
        throw IoError(path.string() + ": referenced file missing for video '" + e.video_id +
                      "': " + m.resolve(e).string());
      }
    }
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open manifest for writing");
  for (const auto& e : manifest.entries) {
    out << e.video_id << '\t' << e.path << '\t' << e.split << '\t';
    if (e.fold < 0) {
      out << '-';
    } else {
      out << e.fold;
    }
    out << '\n';
  }
  if (!out) throw IoError(path.string() + ": manifest write failed");
}

std::vector<Window> window_sequences(const VideoRecord& record, long window_len, long stride) {
  record.validate();
  if (window_len < 1) throw ContractError("window_sequences: window length must be >= 1");
  if (stride < 1 || stride > window_len) {
    throw ContractError(
        "window_sequences: stride must lie in [1, window length] to cover every frame");
  }
  const long d = record.feat_dim;
  std::vector<Window> out;
  for (long start = 0; start < record.n_frames; start += stride) {
    Window w;
    w.video_id = record.video_id;
    w.start = start;
    w.valid = std::min(window_len, record.n_frames - start);
    w.length = window_len;
    w.feat_dim = d;
    w.label_kind = record.label_kind;
    w.features.resize(window_len * d);
    if (record.label_kind == LabelKind::va) w.va.resize(window_len * 2);
    if (record.label_kind == LabelKind::au12) w.au.resize(window_len * kAuChannels);
    for (long t = 0; t < window_len; ++t) {
      const long src = start + std::min(t, w.valid - 1);  // repeat last valid frame as padding
      std::copy_n(record.features.data() + src * d, d, w.features.data() + t * d);
      if (record.label_kind == LabelKind::va) {
        std::copy_n(record.va.data() + src * 2, 2, w.va.data() + t * 2);
      } else if (record.label_kind == LabelKind::au12) {
        std::copy_n(record.au.data() + src * kAuChannels, kAuChannels,
                    w.au.data() + t * kAuChannels);
      }
    }
    out.push_back(std::move(w));
    if (start + window_len >= record.n_frames) break;
  }
  return out;
}

SequenceBatch make_batch(const std::vector<const Window*>& windows) {
  if (windows.empty()) throw ContractError("make_batch: no windows");
  const Window& first = *windows[0];
  SequenceBatch batch;
  batch.batch = static_cast<long>(windows.size());
  batch.time = first.length;
  batch.feat_dim = first.feat_dim;
  batch.label_kind = first.label_kind;

  std::vector<double> feats(batch.batch * batch.time * batch.feat_dim);
  std::vector<double> va;
  std::vector<double> au;
  if (batch.label_kind == LabelKind::va) va.resize(batch.batch * batch.time * 2);
  if (batch.label_kind == LabelKind::au12) au.resize(batch.batch * batch.time * kAuChannels);

  for (long b = 0; b < batch.batch; ++b) {
    const Window& w = *windows[b];
    if (w.length != batch.time || w.feat_dim != batch.feat_dim ||
        w.label_kind != batch.label_kind) {
      throw ContractError("make_batch: window " + std::to_string(b) +
                          " does not match the batch layout");
    }
    for (long i = 0; i < w.length * w.feat_dim; ++i) {
      feats[b * batch.time * batch.feat_dim + i] = w.features[i];
    }
    if (batch.label_kind == LabelKind::va) {
      for (long i = 0; i < w.length * 2; ++i) va[b * batch.time * 2 + i] = w.va[i];
    } else if (batch.label_kind == LabelKind::au12) {
      for (long i = 0; i < w.length * kAuChannels; ++i) {
        au[b * batch.time * kAuChannels + i] = w.au[i];
      }
    }
    for (long t = 0; t < w.valid; ++t) batch.valid_positions.emplace_back(b, t);
  }
  batch.features = Tensor::from_data({batch.batch, batch.time, batch.feat_dim}, std::move(feats));
  if (batch.label_kind == LabelKind::va) {
    batch.va_labels = Tensor::from_data({batch.batch, batch.time, 2}, std::move(va));
  } else if (batch.label_kind == LabelKind::au12) {
    batch.au_labels = Tensor::from_data({batch.batch, batch.time, kAuChannels}, std::move(au));
  }
  return batch;
}

std::vector<double> stitch_windows(const std::vector<Window>& windows,
                                   const std::vector<std::vector<double>>& rows_per_window,
                                   long n_frames, long channels) {
  if (windows.size() != rows_per_window.size()) {
    throw ContractError("stitch_windows: window/prediction count mismatch");
  }
  std::vector<double> out(n_frames * channels, 0.0);
  std::vector<double> best_dist(n_frames, std::numeric_limits<double>::infinity());
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const Window& w = windows[wi];
    if (static_cast<long>(rows_per_window[wi].size()) != w.length * channels) {
      throw ContractError("stitch_windows: window " + std::to_string(wi) +
                          " prediction size mismatch");
    }
    const double center = static_cast<double>(w.start) + static_cast<double>(w.valid - 1) / 2.0;
    for (long t = 0; t < w.valid; ++t) {
      const long frame = w.start + t;
      if (frame >= n_frames) throw ContractError("stitch_windows: frame index out of range");
      const double dist = std::abs(static_cast<double>(frame) - center);
      if (dist < best_dist[frame]) {
        best_dist[frame] = dist;
        std::copy_n(rows_per_window[wi].data() + t * channels, channels,
                    out.data() + frame * channels);
      }
    }
  }
  for (long f = 0; f < n_frames; ++f) {
    if (!std::isfinite(best_dist[f])) {
      throw ContractError("stitch_windows: frame " + std::to_string(f) + " not covered");
    }
  }
  return out;
}

std::vector<VideoRecord> synth_generate(const SynthOptions& options) {
  if (options.n_videos < 1 || options.n_frames < 2 || options.feat_dim < 1) {
    throw ContractError("synth_generate: need n_videos >= 1, n_frames >= 2, feat_dim >= 1");
  }
  Rng rng(options.seed);
  constexpr long kLatent = 4;
  constexpr long kHarmonics = 3;
  // The lift input is the latent plus the label channels themselves: the two
  // tanh-squashed VA trajectories, or the twelve tanh-sharpened AU margins.
  // Embedding the label channels keeps the mapping learnable with a margin.
  const long lift_in =
      kLatent + (options.labels == LabelKind::au12 ? kAuChannels : 2);

  // Dataset-level lift and label weights, fixed before any per-video draws.
  std::vector<double> lift(lift_in * options.feat_dim);
  const double lift_scale = 1.0 / std::sqrt(static_cast<double>(lift_in));
  for (auto& v : lift) v = rng.normal(0.0, lift_scale);
  std::vector<double> w_val(kLatent), w_aro(kLatent);
  for (auto& v : w_val) v = rng.normal(0.0, 1.0);
  for (auto& v : w_aro) v = rng.normal(0.0, 1.0);
  std::vector<double> au_w(kAuChannels * kLatent), au_b(kAuChannels);
  for (auto& v : au_w) v = rng.normal(0.0, 1.0);
  for (auto& v : au_b) v = rng.uniform(-0.3, 0.3);

  std::vector<VideoRecord> records;
  records.reserve(options.n_videos);
  for (long vid = 0; vid < options.n_videos; ++vid) {
    VideoRecord rec;
    {
      std::ostringstream id;
      id << "synth_";
      id.fill('0');
      id.width(4);
      id << vid;
      rec.video_id = id.str();
    }
    rec.n_frames = options.n_frames;
    rec.feat_dim = options.feat_dim;
    rec.label_kind = options.labels;
    rec.features.resize(options.n_frames * options.feat_dim);
    if (options.labels == LabelKind::va) rec.va.resize(options.n_frames * 2);
    if (options.labels == LabelKind::au12) rec.au.resize(options.n_frames * kAuChannels);

    // Smooth latent: each channel is a sum of low-frequency sinusoids with
    // unit total amplitude.
    std::vector<double> freq(kLatent * kHarmonics), phase(kLatent * kHarmonics),
        amp(kLatent * kHarmonics);
    for (long c = 0; c < kLatent; ++c) {
      double total = 0.0;
      for (long h = 0; h < kHarmonics; ++h) {
        freq[c * kHarmonics + h] = rng.uniform(0.5, 2.5);
        phase[c * kHarmonics + h] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        amp[c * kHarmonics + h] = rng.uniform(0.3, 1.0);
        total += amp[c * kHarmonics + h];
      }
      for (long h = 0; h < kHarmonics; ++h) amp[c * kHarmonics + h] /= total;
    }

    std::vector<double> latent(kLatent);
    std::vector<double> lifted(lift_in);
    for (long t = 0; t < options.n_frames; ++t) {
      const double pos = static_cast<double>(t) / static_cast<double>(options.n_frames);
      for (long c = 0; c < kLatent; ++c) {
        double z = 0.0;
        for (long h = 0; h < kHarmonics; ++h) {
          z += amp[c * kHarmonics + h] *
               std::sin(2.0 * std::numbers::pi * freq[c * kHarmonics + h] * pos +
                        phase[c * kHarmonics + h]);
        }
        latent[c] = z;
      }
      double sv = 0.0, sa = 0.0;
      for (long c = 0; c < kLatent; ++c) {
        sv += w_val[c] * latent[c];
        sa += w_aro[c] * latent[c];
      }
      const double valence = std::clamp(std::tanh(1.5 * sv), -1.0, 1.0);
      const double arousal = std::clamp(std::tanh(1.5 * sa), -1.0, 1.0);

      for (long c = 0; c < kLatent; ++c) lifted[c] = latent[c];
      if (options.labels == LabelKind::au12) {
        for (long c = 0; c < kAuChannels; ++c) {
          double s = au_b[c];
          for (long k = 0; k < kLatent; ++k) s += au_w[c * kLatent + k] * latent[k];
          rec.au[t * kAuChannels + c] = s > 0.0 ? 1 : 0;
          lifted[kLatent + c] = std::tanh(6.0 * s);
        }
      } else {
        if (options.labels == LabelKind::va) {
          rec.va[t * 2 + 0] = static_cast<float>(valence);
          rec.va[t * 2 + 1] = static_cast<float>(arousal);
        }
        lifted[kLatent + 0] = valence;
        lifted[kLatent + 1] = arousal;
      }
      for (long j = 0; j < options.feat_dim; ++j) {
        double x = 0.0;
        for (long c = 0; c < lift_in; ++c) x += lifted[c] * lift[c * options.feat_dim + j];
        x += options.noise * rng.normal(0.0, 1.0);
        rec.features[t * options.feat_dim + j] = static_cast<float>(x);
      }
    }
    rec.validate();
    records.push_back(std::move(rec));
  }
  return records;
}

namespace {

std::vector<std::string> score_columns(long channels) {
  std::vector<std::string> cols;
  if (channels == 2) {
    cols = {"valence", "arousal"};
  } else if (channels == kAuChannels) {
    for (long c = 1; c <= kAuChannels; ++c) {
      std::ostringstream os;
      os << "au";
      os.fill('0');
      os.width(2);
      os << c;
      cols.push_back(os.str());
    }
  } else {
    for (long c = 0; c < channels; ++c) cols.push_back("c" + std::to_string(c));
  }
  return cols;
}

}  // namespace

void write_scores(const std::filesystem::path& path, const std::vector<ScoredVideo>& videos) {
  long channels = videos.empty() ? 2 : videos[0].channels;
  for (const auto& v : videos) {
    if (v.channels != channels) throw ContractError("write_scores: mixed channel counts");
    if (v.channels < 1 || v.rows.size() % static_cast<std::size_t>(v.channels) != 0) {
      throw ContractError("write_scores: row size not a multiple of channels for " + v.video_id);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << "video_id,frame";
  for (const auto& c : score_columns(channels)) out << ',' << c;
  out << '\n';
  char buf[32];
  for (const auto& v : videos) {
    const long frames = static_cast<long>(v.rows.size()) / channels;
    for (long f = 0; f < frames; ++f) {
      out << v.video_id << ',' << f;
      for (long c = 0; c < channels; ++c) {
        std::snprintf(buf, sizeof(buf), "%.6f", v.rows[f * channels + c]);
        out << ',' << buf;
      }
      out << '\n';
    }
  }
  if (!out) throw IoError(path.string() + ": score write failed");
}

std::vector<ScoredVideo> read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open scores");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": missing header line");
  const long channels = static_cast<long>(std::count(line.begin(), line.end(), ',')) - 1;
  if (channels < 1) throw ParseError(path.string() + ": malformed header '" + line + "'");
  std::vector<ScoredVideo> out;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      std::size_t comma = line.find(',', pos);
      f.push_back(line.substr(pos, comma == std::string::npos ? comma : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (static_cast<long>(f.size()) != channels + 2) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(channels + 2) + " fields");
    }
    if (out.empty() || out.back().video_id != f[0]) {
      out.push_back({f[0], channels, {}});
    }
    try {
      for (long c = 0; c < channels; ++c) out.back().rows.push_back(std::stod(f[2 + c]));
    } catch (...) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad numeric field");
    }
  }
  return out;
}

}  // namespace affect
