#include "voco/layout.hpp"

namespace voco {

int SequenceLayout::count(SegmentKind kind) const {
  int n = 0;
  for (const Segment& s : segments)
    if (s.kind == kind) n += s.length;
  return n;
}

int SequenceLayout::num_frames() const {
  int k = 0;
  for (const Segment& s : segments)
    if (s.kind == SegmentKind::VOCO) ++k;
  return k;
}

std::vector<SegmentKind> SequenceLayout::kinds() const {
  std::vector<SegmentKind> out(static_cast<size_t>(total_len), SegmentKind::TEXT);
  for (const Segment& s : segments)
    for (int p = s.start; p < s.start + s.length; ++p) out[static_cast<size_t>(p)] = s.kind;
  return out;
}

std::vector<int> SequenceLayout::frames() const {
  std::vector<int> out(static_cast<size_t>(total_len), -1);
  for (const Segment& s : segments)
    for (int p = s.start; p < s.start + s.length; ++p) out[static_cast<size_t>(p)] = s.frame;
  return out;
}

void SequenceLayout::check_structure() const {
  int cursor = 0;
  for (const Segment& s : segments) {
    if (s.length <= 0) throw UsageError("layout: empty segment");
    if (s.start != cursor) throw UsageError("layout: segments must be contiguous");
    cursor += s.length;
  }
  if (cursor != total_len) throw UsageError("layout: segments do not cover total_len");
}

void SequenceLayout::validate() const {
  check_structure();
  const Segment* prev = nullptr;
  for (const Segment& s : segments) {
    if (s.kind == SegmentKind::VOCO) {
      // VOCO either follows its VISION segment directly or opens a frame
      // with no vision tokens; either way it closes the frame.
      if (prev && prev->kind == SegmentKind::VISION && prev->frame != s.frame)
        throw UsageError("layout: VOCO does not follow its VISION segment");
    }
    if (s.kind == SegmentKind::VISION) {
      if (prev && prev->kind == SegmentKind::VISION)
        throw UsageError("layout: VISION segment without VOCO follower");
    }
    if (s.kind == SegmentKind::TEXT && prev && prev->kind == SegmentKind::VISION)
      throw UsageError("layout: VISION segment not followed by VOCO before TEXT");
    prev = &s;
  }
  if (prev && prev->kind == SegmentKind::VISION)
    throw UsageError("layout: trailing VISION segment has no VOCO");
}

std::string AttentionMask::ascii() const {
  std::string out;
  out.reserve(static_cast<size_t>(size) * (size + 1));
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) out.push_back(at(i, j) ? '1' : '0');
    out.push_back('\n');
  }
  return out;
}

SequenceLayout build_layout(int num_vision, int num_voco, int num_text) {
  if (num_voco < 1) throw UsageError("build_layout: num_voco must be >= 1");
  if (num_vision < 0 || num_text < 0) throw UsageError("build_layout: negative count");
  SequenceLayout layout;
  int cursor = 0;
  if (num_vision > 0) {
    layout.segments.push_back({SegmentKind::VISION, cursor, num_vision, 0});
    cursor += num_vision;
  }
  layout.segments.push_back({SegmentKind::VOCO, cursor, num_voco, 0});
  cursor += num_voco;
  if (num_text > 0) {
    layout.segments.push_back({SegmentKind::TEXT, cursor, num_text, -1});
    cursor += num_text;
  }
  layout.total_len = cursor;
  layout.validate();
  return layout;
}

SequenceLayout build_video_layout(const std::vector<std::pair<int, int>>& frames,
                                  int num_text) {
  if (frames.empty()) throw UsageError("build_video_layout: needs at least one frame");
  SequenceLayout layout;
  int cursor = 0;
  for (size_t t = 0; t < frames.size(); ++t) {
    auto [num_vision, num_voco] = frames[t];
    if (num_voco < 1) throw UsageError("build_video_layout: num_voco must be >= 1");
    if (num_vision < 0) throw UsageError("build_video_layout: negative vision count");
    if (num_vision > 0) {
      layout.segments.push_back({SegmentKind::VISION, cursor, num_vision, static_cast<int>(t)});
      cursor += num_vision;
    }
    layout.segments.push_back({SegmentKind::VOCO, cursor, num_voco, static_cast<int>(t)});
    cursor += num_voco;
  }
  if (num_text > 0) {
    layout.segments.push_back({SegmentKind::TEXT, cursor, num_text, -1});
    cursor += num_text;
  }
  layout.total_len = cursor;
  layout.validate();
  return layout;
}

AttentionMask build_causal_mask(int len) {
  if (len < 1) throw UsageError("build_causal_mask: len must be >= 1");
  AttentionMask mask;
  mask.size = len;
  mask.bits = BoolGrid(len, len);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j <= i; ++j) mask.bits.set(i, j, true);
  return mask;
}

bool mask_rule(const std::vector<SegmentKind>& kinds, const std::vector<int>& frames,
               int i, int j) {
  if (j > i) return false;  // causal base
  if (kinds[static_cast<size_t>(j)] != SegmentKind::VISION) return true;
  // Vision columns: visible only within the owning frame. Text never sees
  // vision; later frames reach earlier ones only through their VoCo tokens.
  if (kinds[static_cast<size_t>(i)] == SegmentKind::TEXT) return false;
  return frames[static_cast<size_t>(i)] == frames[static_cast<size_t>(j)];
}

AttentionMask build_voco_mask(const SequenceLayout& layout) {
  layout.validate();
  auto kinds = layout.kinds();
  auto frames = layout.frames();
  AttentionMask mask;
  mask.size = layout.total_len;
  mask.bits = BoolGrid(layout.total_len, layout.total_len);
  for (int i = 0; i < layout.total_len; ++i)
    for (int j = 0; j <= i; ++j) mask.bits.set(i, j, mask_rule(kinds, frames, i, j));
  return mask;
}

std::vector<MaskViolation> validate_mask(const AttentionMask& mask,
                                         const SequenceLayout& layout) {
  if (mask.size != layout.total_len)
    throw UsageError("validate_mask: dimensions disagree");
  auto kinds = layout.kinds();
  auto frames = layout.frames();
  std::vector<MaskViolation> violations;
  for (int i = 0; i < mask.size; ++i)
    for (int j = 0; j < mask.size; ++j) {
      bool expected = mask_rule(kinds, frames, i, j);
      bool found = mask.at(i, j);
      if (expected != found) violations.push_back({i, j, expected, found});
    }
  return violations;
}

}  // namespace voco
