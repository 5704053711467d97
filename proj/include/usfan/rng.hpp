/*
 * Copyright (c) 2026, the usfan authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <random>

namespace usfan {

/// Deterministic random stream used everywhere in the project.
///
/// The generator is std::mt19937_64, whose bit stream is pinned by the C++
/// standard. Uniform and normal variates are derived here instead of going
/// through std::*_distribution so the value stream does not depend on the
/// standard library implementation:
///   uniform: top 53 bits of the next 64-bit word, scaled to [0, 1)
///   normal:  Marsaglia polar method (pairs cached, consumed in order)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform draw in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal draw.
  double normal();

  /// Uniform index in [0, n). Uses the modulo map, which is deterministic;
  /// the bias is irrelevant at the n used here and determinism is the point.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  /// Fisher-Yates shuffle, descending, one index() draw per swap.
  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[index(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Derives an independent stream seed from a run seed and a stream counter
/// (splitmix64 of the sum). Used for per-epoch shuffles and named substreams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace usfan
