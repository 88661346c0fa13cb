// Copyright 2026 The tlkfac Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace tlkfac {

/// Mixes a seed and a stream id through the SplitMix64 finalizer so that
/// related streams (data, initialization) do not share a generator state.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Reproducible random stream.
///
/// Bits come from std::mt19937_64, whose output sequence is fixed by the
/// C++ standard. Uniform and normal variates are derived here rather than
/// through <random> distributions, whose algorithms are implementation
/// defined, so a seed produces the same numbers with every standard library.
///  - uniform(): top 53 bits scaled to [0, 1).
///  - normal(): Box-Muller, both variates of a pair are used.
///  - below(n): rejection sampling on the full 64-bit range.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }
  double uniform();
  double normal();
  std::uint64_t below(std::uint64_t n);

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

  /// Full generator state (including a cached normal) as text.
  std::string save() const;
  void restore(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) {
    return a.engine_ == b.engine_ && a.has_spare_ == b.has_spare_ &&
           (!a.has_spare_ || a.spare_ == b.spare_);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tlkfac
