#pragma once

namespace amc::tokens {

// Reserved token ids shared by the tokenizer and the model. PAD positions
// are masked out of attention; CLS and PAD rows are excluded from the
// GradCAM text-query reduction.
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kMask = 2;
inline constexpr int kFirstWord = 3;

inline constexpr bool is_special(int id) { return id < kFirstWord; }

} // namespace amc::tokens
