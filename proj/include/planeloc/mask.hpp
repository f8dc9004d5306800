#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "planeloc/errors.hpp"

namespace planeloc {

// Binary H x W pixel mask with packed storage.
class Mask {
public:
  Mask() = default;
  Mask(int w, int h)
      : width_(w), height_(h), words_((static_cast<size_t>(w) * h + 63) / 64, 0) {}

  int width() const { return width_; }
  int height() const { return height_; }

  void set(int x, int y, bool on = true) {
    const size_t i = static_cast<size_t>(y) * width_ + x;
    if (on)
      words_[i >> 6] |= (1ull << (i & 63));
    else
      words_[i >> 6] &= ~(1ull << (i & 63));
  }

  bool test(int x, int y) const {
    const size_t i = static_cast<size_t>(y) * width_ + x;
    return (words_[i >> 6] >> (i & 63)) & 1ull;
  }

  size_t count() const {
    size_t n = 0;
    for (uint64_t w : words_) n += std::popcount(w);
    return n;
  }

  bool empty() const { return count() == 0; }

  bool same_shape(const Mask& o) const {
    return width_ == o.width_ && height_ == o.height_;
  }

  bool intersects(const Mask& o) const {
    for (size_t i = 0; i < words_.size(); ++i)
      if (words_[i] & o.words_[i]) return true;
    return false;
  }

  template <typename F>
  void for_each(F&& f) const {
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x)
        if (test(x, y)) f(x, y);
  }

  friend double mask_iou(const Mask& a, const Mask& b);

private:
  int width_ = 0, height_ = 0;
  std::vector<uint64_t> words_;
};

// |a & b| / |a | b|; zero when the union is empty.
inline double mask_iou(const Mask& a, const Mask& b) {
  if (!a.same_shape(b))
    throw DimensionMismatch("mask_iou: mask shapes differ");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.words_.size(); ++i) {
    inter += std::popcount(a.words_[i] & b.words_[i]);
    uni += std::popcount(a.words_[i] | b.words_[i]);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

} // namespace planeloc
