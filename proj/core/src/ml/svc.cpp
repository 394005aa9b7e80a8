#include <numeric>

#include "internal.hpp"

namespace orgapipe::ml::internal {

namespace {

/// One-vs-rest linear classifiers; scores are raw decision values.
class LinearSvc final : public Estimator {
 public:
  LinearSvc(std::size_t classes, std::size_t features, std::vector<double> w, std::vector<double> b)
      : classes_(classes), features_(features), w_(std::move(w)), b_(std::move(b)) {}

  std::vector<double> scores(std::span<const double> row) const override {
    std::vector<double> out(classes_);
    for (std::size_t c = 0; c < classes_; ++c) {
      double z = b_[c];
      for (std::size_t j = 0; j < features_; ++j) z += w_[c * features_ + j] * row[j];
      out[c] = z;
    }
    return out;
  }

  std::vector<double> parameters() const override {
    std::vector<double> p{static_cast<double>(classes_), static_cast<double>(features_)};
    p.insert(p.end(), w_.begin(), w_.end());
    p.insert(p.end(), b_.begin(), b_.end());
    return p;
  }

 private:
  std::size_t classes_;
  std::size_t features_;
  std::vector<double> w_;
  std::vector<double> b_;
};

}  // namespace

std::shared_ptr<const Estimator> fit_linear_svc(const FitInput& in) {
  if (in.task != Task::classification)
    throw Error(ErrorKind::invalid_argument, "linear_svc supports classification only");
  const std::size_t n = in.x.rows;
  const std::size_t d = in.x.cols;
  const std::size_t k = in.n_classes;
  const std::size_t epochs = hp_size(in.hp, "epochs");
  const double lr0 = in.hp.at("learning_rate");
  const double lambda = in.hp.at("lambda");

  std::vector<double> w(k * d, 0.0), b(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    Rng rng(derive_seed(in.seed, c));
    double* wc = w.data() + c * d;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t e = 1; e <= epochs; ++e) {
      const double lr = lr0 / static_cast<double>(e);
      rng.shuffle(order);
      for (std::size_t i : order) {
        const double yi = static_cast<std::size_t>(in.y[i]) == c ? 1.0 : -1.0;
        const auto xi = in.x.row(i);
        double margin = b[c];
        for (std::size_t j = 0; j < d; ++j) margin += wc[j] * xi[j];
        margin *= yi;
        for (std::size_t j = 0; j < d; ++j) wc[j] -= lr * lambda * wc[j];
        if (margin < 1.0) {
          for (std::size_t j = 0; j < d; ++j) wc[j] += lr * yi * xi[j];
          b[c] += lr * yi;
        }
      }
    }
  }
  return std::make_shared<LinearSvc>(k, d, std::move(w), std::move(b));
}

std::shared_ptr<const Estimator> load_linear_svc(ParamReader& r, std::size_t n_classes, std::size_t features) {
  const std::size_t k = r.next_size();
  const std::size_t d = r.next_size();
  if (k != n_classes || d != features) throw Error(ErrorKind::format, "corrupt linear_svc shape");
  const auto w = r.take(k * d);
  const auto b = r.take(k);
  return std::make_shared<LinearSvc>(k, d, std::vector<double>(w.begin(), w.end()),
                                     std::vector<double>(b.begin(), b.end()));
}

}  // namespace orgapipe::ml::internal
