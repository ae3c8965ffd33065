#pragma once

#include "voco/runtime.hpp"

namespace voco {

// Ordered per-frame VoCo caches: the compressed representation of a video.
struct VideoCacheSequence {
  std::vector<VoCoCache> frames;
  std::vector<std::pair<int, int>> frame_positions;  // [start, end) per frame
  int total_voco = 0;
  bool sequential = true;  // earlier caches were visible during compression

  int num_frames() const { return static_cast<int>(frames.size()); }
  void validate() const;
};

// Compresses each frame in order. Vision tokens occupy transient positions
// [0, n) that are reused frame to frame; VoCo positions are permanent and
// allocated after the largest frame. With independent=true frames are
// compressed without sight of earlier caches (ablation mode).
VideoCacheSequence compress_video(const ModelParams& params,
                                  const std::vector<std::vector<int>>& frames,
                                  int num_voco_per_frame, bool independent = false,
                                  int reserved_text = 0);

// Text over the concatenated cache sequence. Tokens consumed at query time
// is exactly total_voco + text length.
Tensor infer_video(const ModelParams& params, const VideoCacheSequence& seq,
                   const std::vector<int>& text_token_ids);

// Position ids for a full single-pass video layout, matching the transient
// scheme used by compress_video. frames holds (num_vision, num_voco) pairs.
std::vector<int> video_position_ids(const std::vector<std::pair<int, int>>& frames,
                                    int num_text);

// One forward over the whole video layout; the oracle infer_video must match.
Tensor single_pass_video_reference(const ModelParams& params,
                                   const std::vector<std::vector<int>>& frames,
                                   int num_voco_per_frame,
                                   const std::vector<int>& text_token_ids);

// Bundle file: index header (frame count, offsets) then per-frame cache files.
std::vector<uint8_t> serialize_video_bundle(const VideoCacheSequence& seq);
VideoCacheSequence deserialize_video_bundle(std::span<const uint8_t> bytes);
void save_video_bundle(const std::filesystem::path& path, const VideoCacheSequence& seq);
VideoCacheSequence load_video_bundle(const std::filesystem::path& path);

}  // namespace voco
