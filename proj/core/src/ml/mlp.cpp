#include <algorithm>
#include <cmath>

#include "internal.hpp"

namespace orgapipe::ml {

namespace detail {

namespace {

struct Views {
  const double* w1;
  const double* b1;
  const double* w2;
  const double* b2;
};

Views views(const MlpShape& s, const double* p) {
  Views v;
  v.w1 = p;
  v.b1 = v.w1 + s.hidden * s.inputs;
  v.w2 = v.b1 + s.hidden;
  v.b2 = v.w2 + s.outputs * s.hidden;
  return v;
}

}  // namespace

// Forward pass for one row; `hidden` receives post-ReLU activations.
void mlp_forward(const MlpShape& s, std::span<const double> params, std::span<const double> row,
                 std::vector<double>& hidden, std::vector<double>& out) {
  const Views v = views(s, params.data());
  hidden.assign(s.hidden, 0.0);
  out.assign(s.outputs, 0.0);
  for (std::size_t h = 0; h < s.hidden; ++h) {
    double a = v.b1[h];
    for (std::size_t j = 0; j < s.inputs; ++j) a += v.w1[h * s.inputs + j] * row[j];
    hidden[h] = a > 0.0 ? a : 0.0;
  }
  for (std::size_t o = 0; o < s.outputs; ++o) {
    double z = v.b2[o];
    for (std::size_t h = 0; h < s.hidden; ++h) z += v.w2[o * s.hidden + h] * hidden[h];
    out[o] = z;
  }
  if (s.classification) {
    const double mx = *std::max_element(out.begin(), out.end());
    double sum = 0.0;
    for (double& z : out) sum += (z = std::exp(z - mx));
    for (double& z : out) z /= sum;
  }
}

double mlp_loss(const MlpShape& s, std::span<const double> params, const Matrix& x, std::span<const double> y,
                std::vector<double>* grad) {
  if (params.size() != s.parameter_count()) throw Error(ErrorKind::invalid_argument, "mlp parameter size mismatch");
  const Views v = views(s, params.data());
  if (grad) grad->assign(params.size(), 0.0);
  double* g_w1 = grad ? grad->data() : nullptr;
  double* g_b1 = grad ? g_w1 + s.hidden * s.inputs : nullptr;
  double* g_w2 = grad ? g_b1 + s.hidden : nullptr;
  double* g_b2 = grad ? g_w2 + s.outputs * s.hidden : nullptr;

  std::vector<double> hidden, out, d_out(s.outputs);
  double loss = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto row = x.row(i);
    mlp_forward(s, params, row, hidden, out);
    if (s.classification) {
      const auto label = static_cast<std::size_t>(y[i]);
      loss -= std::log(std::max(out[label], 1e-300));
      for (std::size_t o = 0; o < s.outputs; ++o) d_out[o] = out[o] - (o == label ? 1.0 : 0.0);
    } else {
      const double r = out[0] - y[i];
      loss += 0.5 * r * r;
      d_out[0] = r;
    }
    if (!grad) continue;
    for (std::size_t o = 0; o < s.outputs; ++o) {
      g_b2[o] += d_out[o];
      for (std::size_t h = 0; h < s.hidden; ++h) g_w2[o * s.hidden + h] += d_out[o] * hidden[h];
    }
    for (std::size_t h = 0; h < s.hidden; ++h) {
      double d = 0.0;
      if (hidden[h] > 0.0)
        for (std::size_t o = 0; o < s.outputs; ++o) d += v.w2[o * s.hidden + h] * d_out[o];
      g_b1[h] += d;
      for (std::size_t j = 0; j < s.inputs; ++j) g_w1[h * s.inputs + j] += d * row[j];
    }
  }
  const double n = static_cast<double>(x.rows);
  if (grad)
    for (double& g : *grad) g /= n;
  return loss / n;
}

}  // namespace detail

namespace internal {

namespace {

class Mlp final : public Estimator {
 public:
  Mlp(detail::MlpShape shape, std::vector<double> params) : shape_(shape), params_(std::move(params)) {}

  std::vector<double> scores(std::span<const double> row) const override {
    std::vector<double> hidden, out;
    detail::mlp_forward(shape_, params_, row, hidden, out);
    return out;
  }

  std::vector<double> parameters() const override {
    std::vector<double> p{static_cast<double>(shape_.inputs), static_cast<double>(shape_.hidden),
                          static_cast<double>(shape_.outputs)};
    p.insert(p.end(), params_.begin(), params_.end());
    return p;
  }

 private:
  detail::MlpShape shape_;
  std::vector<double> params_;
};

}  // namespace

std::shared_ptr<const Estimator> fit_mlp(const FitInput& in) {
  detail::MlpShape s;
  s.inputs = in.x.cols;
  s.hidden = hp_size(in.hp, "hidden_units");
  s.classification = in.task == Task::classification;
  s.outputs = s.classification ? in.n_classes : 1;

  // Glorot-uniform init for weights and biases of each layer.
  Rng rng(in.seed);
  std::vector<double> p(s.parameter_count());
  const double a1 = std::sqrt(6.0 / static_cast<double>(s.inputs + s.hidden));
  const double a2 = std::sqrt(6.0 / static_cast<double>(s.hidden + s.outputs));
  const std::size_t layer1 = s.hidden * s.inputs + s.hidden;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = i < layer1 ? a1 : a2;
    p[i] = rng.uniform(-a, a);
  }

  const std::size_t epochs = hp_size(in.hp, "epochs");
  const double lr = in.hp.at("learning_rate");
  const double beta1 = in.hp.at("beta1");
  const double beta2 = in.hp.at("beta2");
  constexpr double eps = 1e-8;
  std::vector<double> m(p.size(), 0.0), v(p.size(), 0.0), grad;
  double b1t = 1.0, b2t = 1.0;
  for (std::size_t t = 1; t <= epochs; ++t) {
    detail::mlp_loss(s, p, in.x, in.y, &grad);
    b1t *= beta1;
    b2t *= beta2;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      const double mh = m[i] / (1.0 - b1t);
      const double vh = v[i] / (1.0 - b2t);
      p[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
  return std::make_shared<Mlp>(s, std::move(p));
}

std::shared_ptr<const Estimator> load_mlp(ParamReader& r, Task task, std::size_t features, std::size_t outputs) {
  detail::MlpShape s;
  s.inputs = r.next_size();
  s.hidden = r.next_size();
  s.outputs = r.next_size();
  s.classification = task == Task::classification;
  if (s.inputs != features || s.hidden == 0 || s.outputs != outputs) throw Error(ErrorKind::format, "corrupt mlp shape");
  const auto p = r.take(s.parameter_count());
  return std::make_shared<Mlp>(s, std::vector<double>(p.begin(), p.end()));
}

}  // namespace internal

}  // namespace orgapipe::ml
