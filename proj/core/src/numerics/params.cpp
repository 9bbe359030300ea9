#include "duplex/numerics/params.hpp"

#include <cmath>
#include <random>
#include <set>

namespace duplex::num {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined word
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t ParamStore::rng_seed_for(const std::string& name) const {
  return mix_seed(seed_, hash_string(name));
}

Param& ParamStore::add(const std::string& name, Array init, std::string group) {
  if (contains(name)) throw NumericError("param store: duplicate parameter '" + name + "'");
  check_finite(init, "param init " + name);
  Param p;
  p.grad = Array(init.shape());
  p.value = std::move(init);
  p.group = std::move(group);
  return params_.emplace(name, std::move(p)).first->second;
}

Param& ParamStore::add_linear_weight(const std::string& name, std::size_t rows,
                                     std::size_t cols, std::string group) {
  std::mt19937_64 rng(rng_seed_for(name));
  const float bound = 1.0F / std::sqrt(static_cast<float>(rows));
  std::uniform_real_distribution<float> dist(-bound, bound);
  Array w = Array::matrix(rows, cols);
  for (auto& v : w.values()) v = dist(rng);
  return add(name, std::move(w), std::move(group));
}

Param& ParamStore::add_normal(const std::string& name, Shape shape, float stddev,
                              std::string group) {
  std::mt19937_64 rng(rng_seed_for(name));
  std::normal_distribution<float> dist(0.0F, stddev);
  Array w(std::move(shape));
  for (auto& v : w.values()) v = dist(rng);
  return add(name, std::move(w), std::move(group));
}

Param& ParamStore::add_zeros(const std::string& name, Shape shape, std::string group) {
  return add(name, Array(std::move(shape)), std::move(group));
}

Param& ParamStore::add_constant(const std::string& name, Shape shape, float v,
                                std::string group) {
  return add(name, Array(std::move(shape), v), std::move(group));
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw NumericError("param store: no parameter '" + name + "'");
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw NumericError("param store: no parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.fill(0.0F);
}

std::map<std::string, double> ParamStore::group_norms() const {
  std::map<std::string, double> out;
  for (const auto& [_, p] : params_) {
    double s = 0.0;
    for (float v : p.value.values()) s += static_cast<double>(v) * v;
    out[p.group] += s;
  }
  for (auto& [_, v] : out) v = std::sqrt(v);
  return out;
}

std::vector<std::string> ParamStore::groups() const {
  std::set<std::string> g;
  for (const auto& [_, p] : params_) g.insert(p.group);
  return {g.begin(), g.end()};
}

}  // namespace duplex::num
