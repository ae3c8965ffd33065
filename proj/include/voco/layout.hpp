#pragma once

#include <string>
#include <vector>

#include "voco/common.hpp"

namespace voco {

enum class SegmentKind { VISION, VOCO, TEXT };

struct Segment {
  SegmentKind kind;
  int start;
  int length;
  // frame index for VISION/VOCO segments (0-based); -1 for TEXT
  int frame = -1;
};

// Token-position layout of one sequence: contiguous, non-overlapping
// segments covering [0, total_len). Every VISION segment is immediately
// followed by the VOCO segment that compresses it.
struct SequenceLayout {
  std::vector<Segment> segments;
  int total_len = 0;

  int count(SegmentKind kind) const;
  int num_frames() const;
  // per-position kind/frame tables
  std::vector<SegmentKind> kinds() const;
  std::vector<int> frames() const;
  // contiguity and coverage only; holds for layout fragments too
  void check_structure() const;
  void validate() const;  // full invariants; throws UsageError on breach
};

// L x L boolean attention matrix; bit(i, j) true means position i may
// attend to position j. Causal: never true above the diagonal.
struct AttentionMask {
  int size = 0;
  BoolGrid bits;

  bool at(int i, int j) const { return bits.at(i, j); }
  std::string ascii() const;  // one 0/1 row per line, for debugging
};

struct MaskViolation {
  int i;
  int j;
  bool expected;
  bool found;
};

SequenceLayout build_layout(int num_vision, int num_voco, int num_text);
SequenceLayout build_video_layout(const std::vector<std::pair<int, int>>& frames,
                                  int num_text);

AttentionMask build_causal_mask(int len);
AttentionMask build_voco_mask(const SequenceLayout& layout);

// True iff the rules allow position i of this layout to attend to j.
bool mask_rule(const std::vector<SegmentKind>& kinds, const std::vector<int>& frames,
               int i, int j);

std::vector<MaskViolation> validate_mask(const AttentionMask& mask,
                                         const SequenceLayout& layout);

}  // namespace voco
