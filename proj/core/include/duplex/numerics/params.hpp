#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "duplex/numerics/array.hpp"

namespace duplex::num {

struct Param {
  Array value;
  Array grad;
  /// Partition tag (e.g. "backbone", "talk_adapter").
  std::string group;
};

/// Named parameter arrays. Each parameter draws its initial values from an
/// RNG keyed on (seed, name), so two stores with the same seed agree on every
/// parameter they share regardless of declaration order.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Param& add(const std::string& name, Array init, std::string group);
  /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), fan_in = rows.
  Param& add_linear_weight(const std::string& name, std::size_t rows, std::size_t cols,
                           std::string group);
  Param& add_normal(const std::string& name, Shape shape, float stddev, std::string group);
  Param& add_zeros(const std::string& name, Shape shape, std::string group);
  Param& add_constant(const std::string& name, Shape shape, float v, std::string group);

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;

  std::map<std::string, Param>& entries() { return params_; }
  const std::map<std::string, Param>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;

  void zero_grad();
  /// L2 norm of parameter values per group, for diagnostics.
  std::map<std::string, double> group_norms() const;
  std::vector<std::string> groups() const;

 private:
  std::uint64_t rng_seed_for(const std::string& name) const;

  std::uint64_t seed_;
  std::map<std::string, Param> params_;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t hash_string(const std::string& s);

}  // namespace duplex::num
