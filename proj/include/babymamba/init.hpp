#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "babymamba/random.hpp"
#include "babymamba/tensor.hpp"

namespace bm {

// Uniform in +-sqrt(1/fan_in), drawn from the stream of (seed, name).
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name) {
  Tensor t(std::move(shape));
  auto rng = named_stream(seed, name);
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace bm
