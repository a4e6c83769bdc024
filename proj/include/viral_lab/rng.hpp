#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace viral {

/// SplitMix64 finalizer; the mixing primitive behind every stream derivation.
std::uint64_t mix64(std::uint64_t x);

/// 64-bit FNV-1a over a label.
std::uint64_t hash_label(std::string_view label);

/// Stream seed = hash(seed, purpose-label, index). Adding a new consumer with a
/// new label never perturbs the draws seen by existing ones.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t index = 0);

/// Counter-based generator: the n-th draw is mix64(key + n * golden). The whole
/// state is (key, counter), so it can be checkpointed as two integers.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key) {}
  Rng(std::uint64_t seed, std::string_view label, std::uint64_t index = 0)
      : key_(derive_seed(seed, label, index)) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform();
  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller; caches the second variate.
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) {
    counter_ = c;
    has_spare_ = false;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace viral
