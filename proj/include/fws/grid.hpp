// Grid<T>: a minimal H×W raster. Masks are Grid<u8>; scalar fields used by
// the sparsifier (noise, distance transforms) are Grid<double>.
#pragma once

#include <vector>

#include "fws/common.hpp"

namespace fws {

template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(i64 h, i64 w, T fill = T{}) : h_(h), w_(w), data_(static_cast<size_t>(h * w), fill) {
    check(h >= 0 && w >= 0, "Grid: negative dims");
  }

  i64 height() const { return h_; }
  i64 width() const { return w_; }
  i64 size() const { return h_ * w_; }

  T& at(i64 r, i64 c) { return data_[static_cast<size_t>(r * w_ + c)]; }
  const T& at(i64 r, i64 c) const { return data_[static_cast<size_t>(r * w_ + c)]; }
  T& operator[](i64 i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](i64 i) const { return data_[static_cast<size_t>(i)]; }

  bool in_bounds(i64 r, i64 c) const { return r >= 0 && r < h_ && c >= 0 && c < w_; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool operator==(const Grid& o) const {
    return h_ == o.h_ && w_ == o.w_ && data_ == o.data_;
  }
  bool operator!=(const Grid& o) const { return !(*this == o); }

  i64 count(T v) const {
    i64 n = 0;
    for (const T& x : data_)
      if (x == v) ++n;
    return n;
  }

 private:
  i64 h_ = 0, w_ = 0;
  std::vector<T> data_;
};

using MaskGrid = Grid<u8>;
using BoolGrid = Grid<u8>;  // 0/1 values

}  // namespace fws
