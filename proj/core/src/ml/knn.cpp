#include <algorithm>
#include <cmath>
#include <numeric>

#include "internal.hpp"

namespace orgapipe::ml::internal {

namespace {

class Knn final : public Estimator {
 public:
  Knn(std::size_t k, Matrix x, std::vector<double> y, std::size_t n_classes, Task task)
      : k_(std::min(k, x.rows)), x_(std::move(x)), y_(std::move(y)), n_classes_(n_classes), task_(task) {}

  std::vector<double> scores(std::span<const double> row) const override {
    std::vector<std::pair<double, std::size_t>> dist(x_.rows);
    for (std::size_t i = 0; i < x_.rows; ++i) {
      double d = 0.0;
      const auto xi = x_.row(i);
      for (std::size_t j = 0; j < x_.cols; ++j) d += (xi[j] - row[j]) * (xi[j] - row[j]);
      dist[i] = {d, i};
    }
    // Equal distances resolve to the earlier training row.
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k_), dist.end());
    if (task_ == Task::regression) {
      double sum = 0.0;
      for (std::size_t i = 0; i < k_; ++i) sum += y_[dist[i].second];
      return {sum / static_cast<double>(k_)};
    }
    std::vector<double> votes(n_classes_, 0.0);
    for (std::size_t i = 0; i < k_; ++i) votes[static_cast<std::size_t>(y_[dist[i].second])] += 1.0;
    for (double& v : votes) v /= static_cast<double>(k_);
    return votes;
  }

  std::vector<double> parameters() const override {
    std::vector<double> p{static_cast<double>(k_), static_cast<double>(x_.rows), static_cast<double>(x_.cols)};
    p.insert(p.end(), x_.data.begin(), x_.data.end());
    p.insert(p.end(), y_.begin(), y_.end());
    return p;
  }

 private:
  std::size_t k_;
  Matrix x_;
  std::vector<double> y_;
  std::size_t n_classes_;
  Task task_;
};

}  // namespace

std::shared_ptr<const Estimator> fit_knn(const FitInput& in) {
  return std::make_shared<Knn>(hp_size(in.hp, "k"), in.x, std::vector<double>(in.y.begin(), in.y.end()),
                               in.n_classes, in.task);
}

std::shared_ptr<const Estimator> load_knn(ParamReader& r, std::size_t n_classes, Task task, std::size_t features) {
  const std::size_t k = r.next_size();
  const std::size_t n = r.next_size();
  const std::size_t d = r.next_size();
  if (k == 0 || n == 0 || d != features) throw Error(ErrorKind::format, "corrupt knn state");
  Matrix x(n, d);
  const auto xs = r.take(n * d);
  std::copy(xs.begin(), xs.end(), x.data.begin());
  const auto ys = r.take(n);
  if (task == Task::classification)
    for (double y : ys)
      if (!(y >= 0.0) || y >= static_cast<double>(n_classes) || y != std::floor(y))
        throw Error(ErrorKind::format, "corrupt knn label");
  return std::make_shared<Knn>(k, std::move(x), std::vector<double>(ys.begin(), ys.end()), n_classes, task);
}

}  // namespace orgapipe::ml::internal
