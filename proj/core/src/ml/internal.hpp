#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "orgapipe/error.hpp"
#include "orgapipe/ml.hpp"

namespace orgapipe::ml::internal {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for a sub-unit (tree, fold, class).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

/// mt19937_64 with hand-written mappings; std distributions differ across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    const std::uint64_t bound = n;
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return static_cast<std::size_t>(r % bound);
    }
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
};

using Hyper = std::map<std::string, double>;

inline std::size_t hp_size(const Hyper& hp, const char* name) { return static_cast<std::size_t>(hp.at(name)); }

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Reads a self-delimiting parameter stream.
class ParamReader {
 public:
  explicit ParamReader(std::span<const double> p) : p_(p) {}
  double next() {
    if (pos_ >= p_.size()) throw Error(ErrorKind::format, "model parameter payload is too short");
    return p_[pos_++];
  }
  std::size_t next_size() {
    const double v = next();
    if (!(v >= 0.0) || v > 1e12 || v != static_cast<double>(static_cast<std::uint64_t>(v)))
      throw Error(ErrorKind::format, "corrupt size in model parameter payload");
    return static_cast<std::size_t>(v);
  }
  std::span<const double> take(std::size_t n) {
    if (p_.size() - pos_ < n) throw Error(ErrorKind::format, "model parameter payload is too short");
    auto s = p_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == p_.size(); }

 private:
  std::span<const double> p_;
  std::size_t pos_ = 0;
};

struct FitInput {
  const Matrix& x;  // standardized
  std::span<const double> y;
  std::size_t n_classes = 0;  // 0 for regression
  Task task = Task::classification;
  const Hyper& hp;
  std::uint64_t seed = 0;
};

std::shared_ptr<const Estimator> fit_knn(const FitInput& in);
std::shared_ptr<const Estimator> fit_forest(const FitInput& in);
std::shared_ptr<const Estimator> fit_adaboost(const FitInput& in);
std::shared_ptr<const Estimator> fit_mlp(const FitInput& in);
std::shared_ptr<const Estimator> fit_linear_svc(const FitInput& in);

std::shared_ptr<const Estimator> load_knn(ParamReader& r, std::size_t n_classes, Task task, std::size_t features);
std::shared_ptr<const Estimator> load_forest(ParamReader& r, std::size_t n_classes, Task task, std::size_t features);
std::shared_ptr<const Estimator> load_adaboost(ParamReader& r, std::size_t n_classes, std::size_t features);
std::vector<double> adaboost_stages(const FitInput& in);
std::shared_ptr<const Estimator> load_mlp(ParamReader& r, Task task, std::size_t features, std::size_t outputs);
std::shared_ptr<const Estimator> load_linear_svc(ParamReader& r, std::size_t n_classes, std::size_t features);

}  // namespace orgapipe::ml::internal
