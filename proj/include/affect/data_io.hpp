// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "affect/tensor.hpp"

namespace affect {

enum class LabelKind : std::uint8_t { none = 0, va = 1, au12 = 2 };

constexpr long kAuChannels = 12;

/**
 * One video's per-frame feature block plus optional labels. Features and VA
 * labels are stored as float32 to mirror the on-disk format exactly, so a
 * write/read cycle is bit-identical.
 */
struct VideoRecord {
  std::string video_id;
  long n_frames = 0;
  long feat_dim = 0;
  std::vector<float> features;   // n_frames * feat_dim, row-major
  LabelKind label_kind = LabelKind::none;
  std::vector<float> va;         // n_frames * 2, each in [-1, 1]
  std::vector<std::uint8_t> au;  // n_frames * 12, each 0/1

  /// Throws ContractError if sizes/ranges are inconsistent.
  void validate() const;
};

// AFB1 container, little-endian:
//   magic "AFB1" | u16 version=1 | u8 label_kind | u8 reserved
//   | u16 id_len | id bytes | u32 n_frames | u32 feat_dim
//   | features f32[n_frames*feat_dim]
//   | labels: va -> f32[n_frames*2], au12 -> u8[n_frames*12]
VideoRecord read_video_file(const std::filesystem::path& path);
void write_video_file(const std::filesystem::path& path, const VideoRecord& record);

struct ManifestEntry {
  std::string video_id;
  std::string path;  // relative paths resolve against the manifest directory
  std::string split;  // train | val | test
  int fold = -1;      // -1 = unassigned, written as "-"
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& e) const;
  std::vector<ManifestEntry> with_split(const std::string& split) const;
  const ManifestEntry* find(const std::string& video_id) const;
};

/// One `video_id<TAB>path<TAB>split<TAB>fold` line per video, fold "-" when
/// unassigned. check_files verifies every referenced file exists.
Manifest read_manifest(const std::filesystem::path& path, bool check_files = true);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

/**
 * One training window cut from a video. Short final windows are padded by
 * repeating the last valid frame; `valid` counts real frames and the mask
 * derived from it keeps padding out of losses and metrics.
 */
struct Window {
  std::string video_id;
  long start = 0;
  long valid = 0;
  long length = 0;
  long feat_dim = 0;
  LabelKind label_kind = LabelKind::none;
  std::vector<float> features;
  std::vector<float> va;
  std::vector<std::uint8_t> au;
};

/// Cut [start, start+window_len) slices at the given stride; every frame is
/// covered. Requires 1 <= stride <= window_len.
std::vector<Window> window_sequences(const VideoRecord& record, long window_len, long stride);

/// Dense batch assembled from equally long windows.
struct SequenceBatch {
  Tensor features;   // [B, T, d]
  Tensor va_labels;  // [B, T, 2] when kind == va
  Tensor au_labels;  // [B, T, 12] when kind == au12
  std::vector<std::pair<long, long>> valid_positions;  // (batch, time) of real frames
  long batch = 0;
  long time = 0;
  long feat_dim = 0;
  LabelKind label_kind = LabelKind::none;
};

SequenceBatch make_batch(const std::vector<const Window*>& windows);

/// Reassemble per-frame rows from per-window predictions: each frame takes the
/// row from the covering window whose center is nearest (ties -> earlier
/// window). rows_per_window[i] has windows[i].length * channels entries.
std::vector<double> stitch_windows(const std::vector<Window>& windows,
                                   const std::vector<std::vector<double>>& rows_per_window,
                                   long n_frames, long channels);

struct SynthOptions {
  long n_videos = 40;
  long n_frames = 400;
  long feat_dim = 64;
  std::uint64_t seed = 7;
  LabelKind labels = LabelKind::va;
  double noise = 0.08;
};

/**
 * Synthetic dataset: smooth low-frequency latent trajectories drive the
 * labels, and features are a fixed random linear+nonlinear lift of the latent
 * plus Gaussian noise, so the label mapping is learnable. Deterministic per
 * seed.
 */
std::vector<VideoRecord> synth_generate(const SynthOptions& options);

/// Per-video score rows for the text score format.
struct ScoredVideo {
  std::string video_id;
  long channels = 0;
  std::vector<double> rows;  // n_frames * channels
};

/// CSV with a header line; one frame per line, values at fixed 6 decimals.
void write_scores(const std::filesystem::path& path, const std::vector<ScoredVideo>& videos);
std::vector<ScoredVideo> read_scores(const std::filesystem::path& path);

}  // namespace affect
