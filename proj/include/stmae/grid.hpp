#pragma once

#include <array>
#include <cstddef>
#include <string>

namespace stmae {

// Token grid (T', H', W'); tokens are enumerated time-major, then height,
// then width.
struct TokenGrid {
  std::size_t t = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t spatial() const { return h * w; }
  std::size_t tokens() const { return t * h * w; }

  std::size_t index(std::size_t ti, std::size_t hi, std::size_t wi) const {
    return (ti * h + hi) * w + wi;
  }
  // (t, h, w) coordinates of a token index.
  std::array<std::size_t, 3> coords(std::size_t i) const {
    return {i / (h * w), (i / w) % h, i % w};
  }
  std::size_t time_of(std::size_t i) const { return i / (h * w); }
  std::size_t space_of(std::size_t i) const { return i % (h * w); }

  std::string str() const {
    return std::to_string(t) + "," + std::to_string(h) + "," + std::to_string(w);
  }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

}  // namespace stmae
