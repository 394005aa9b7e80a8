// CART trees shared by the random forest and the boosted stumps.
#include <algorithm>
#include <cmath>
#include <numeric>

#include "internal.hpp"

namespace orgapipe::ml::internal {

namespace {

struct Node {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  std::vector<double> value;  // class proportions or the mean target
};

struct Tree {
  std::vector<Node> nodes;
  std::size_t width = 1;

  const std::vector<double>& leaf(std::span<const double> row) const {
    std::size_t i = 0;
    while (nodes[i].feature >= 0)
      i = static_cast<std::size_t>(row[static_cast<std::size_t>(nodes[i].feature)] <= nodes[i].threshold
                                       ? nodes[i].left
                                       : nodes[i].right);
    return nodes[i].value;
  }

  void append(std::vector<double>& p) const {
    p.push_back(static_cast<double>(nodes.size()));
    p.push_back(static_cast<double>(width));
    for (const Node& n : nodes) {
      p.push_back(n.feature);
      p.push_back(n.threshold);
      p.push_back(n.left);
      p.push_back(n.right);
      p.insert(p.end(), n.value.begin(), n.value.end());
    }
  }

  static Tree read(ParamReader& r, std::size_t features) {
    Tree t;
    const std::size_t count = r.next_size();
    t.width = r.next_size();
    if (count == 0 || t.width == 0) throw Error(ErrorKind::format, "corrupt tree");
    t.nodes.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      Node& n = t.nodes[i];
      n.feature = static_cast<int>(r.next());
      n.threshold = r.next();
      n.left = static_cast<int>(r.next());
      n.right = static_cast<int>(r.next());
      const auto v = r.take(t.width);
      n.value.assign(v.begin(), v.end());
      // Children always come after their parent, which also rules out cycles.
      if (n.feature >= 0 &&
          (static_cast<std::size_t>(n.feature) >= features || n.left <= static_cast<int>(i) ||
           n.right <= static_cast<int>(i) || n.left >= static_cast<int>(count) || n.right >= static_cast<int>(count)))
        throw Error(ErrorKind::format, "corrupt tree node");
    }
    return t;
  }
};

struct TreeParams {
  std::size_t max_depth = 0;  // 0: unlimited
  std::size_t min_leaf = 1;
  std::size_t max_features = 0;  // non-constant features examined per split
};

class TreeBuilder {
 public:
  TreeBuilder(const FitInput& in, const TreeParams& params, Rng* rng, const std::vector<double>* weights)
      : in_(in), params_(params), rng_(rng), weights_(weights) {
    tree_.width = in.task == Task::classification ? in.n_classes : 1;
  }

  Tree build(std::vector<std::size_t> samples) {
    grow(samples, 0);
    return std::move(tree_);
  }

 private:
  double weight(std::size_t i) const { return weights_ ? (*weights_)[i] : 1.0; }
  bool classification() const { return in_.task == Task::classification; }

  std::vector<double> leaf_value(const std::vector<std::size_t>& s) const {
    std::vector<double> v(tree_.width, 0.0);
    double total = 0.0;
    for (std::size_t i : s) {
      const double w = weight(i);
      total += w;
      if (classification()) v[static_cast<std::size_t>(in_.y[i])] += w;
      else v[0] += w * in_.y[i];
    }
    if (total > 0.0)
      for (double& e : v) e /= total;
    return v;
  }

  bool pure(const std::vector<std::size_t>& s) const {
    for (std::size_t i : s)
      if (in_.y[i] != in_.y[s.front()]) return false;
    return true;
  }

  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double score = -std::numeric_limits<double>::infinity();  // larger is better
  };

  // Returns false when the feature is constant over the node.
  bool evaluate(const std::vector<std::size_t>& s, std::size_t f, Split& best) const {
    std::vector<std::pair<double, std::size_t>> vals;
    vals.reserve(s.size());
    for (std::size_t i : s) vals.emplace_back(in_.x.at(i, f), i);
    std::stable_sort(vals.begin(), vals.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    if (vals.front().first == vals.back().first) return false;

    const std::size_t m = vals.size();
    const std::size_t k = tree_.width;
    std::vector<double> total(k, 0.0), left(k, 0.0);
    double w_total = 0.0;
    for (const auto& [v, i] : vals) {
      const double w = weight(i);
      w_total += w;
      total[classification() ? static_cast<std::size_t>(in_.y[i]) : 0] += classification() ? w : w * in_.y[i];
    }
    double w_left = 0.0;
    for (std::size_t p = 0; p + 1 < m; ++p) {
      const std::size_t i = vals[p].second;
      const double w = weight(i);
      w_left += w;
      left[classification() ? static_cast<std::size_t>(in_.y[i]) : 0] += classification() ? w : w * in_.y[i];
      if (vals[p].first == vals[p + 1].first) continue;
      if (p + 1 < params_.min_leaf || m - p - 1 < params_.min_leaf) continue;
      const double w_right = w_total - w_left;
      if (w_left <= 0.0 || w_right <= 0.0) continue;
      // Gini and squared error both reduce to maximising sum(stat^2 / weight) over children.
      double score = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double r = total[c] - left[c];
        score += left[c] * left[c] / w_left + r * r / w_right;
      }
      if (score > best.score) {
        double t = vals[p].first + (vals[p + 1].first - vals[p].first) / 2.0;
        if (!(t < vals[p + 1].first)) t = vals[p].first;
        best = {static_cast<int>(f), t, score};
      }
    }
    return true;
  }

  int grow(const std::vector<std::size_t>& s, std::size_t depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.push_back({});
    tree_.nodes[static_cast<std::size_t>(id)].value = leaf_value(s);
    if (s.size() < 2 * params_.min_leaf || pure(s) || (params_.max_depth && depth >= params_.max_depth)) return id;

    std::vector<std::size_t> order(in_.x.cols);
    std::iota(order.begin(), order.end(), 0);
    if (rng_) rng_->shuffle(order);
    const std::size_t budget = params_.max_features ? params_.max_features : order.size();
    Split best;
    std::size_t examined = 0;
    for (std::size_t f : order) {
      if (examined >= budget) break;
      if (evaluate(s, f, best)) ++examined;
    }
    if (best.feature < 0) return id;

    std::vector<std::size_t> ls, rs;
    for (std::size_t i : s)
      (in_.x.at(i, static_cast<std::size_t>(best.feature)) <= best.threshold ? ls : rs).push_back(i);
    const int l = grow(ls, depth + 1);
    const int r = grow(rs, depth + 1);
    Node& node = tree_.nodes[static_cast<std::size_t>(id)];
    node.feature = best.feature;
    node.threshold = best.threshold;
    node.left = l;
    node.right = r;
    return id;
  }

  const FitInput& in_;
  TreeParams params_;
  Rng* rng_;
  const std::vector<double>* weights_;
  Tree tree_;
};

class Forest final : public Estimator {
 public:
  Forest(std::vector<Tree> trees, std::size_t width) : trees_(std::move(trees)), width_(width) {}

  std::vector<double> scores(std::span<const double> row) const override {
    std::vector<double> acc(width_, 0.0);
    for (const Tree& t : trees_) {
      const auto& v = t.leaf(row);
      for (std::size_t c = 0; c < width_; ++c) acc[c] += v[c];
    }
    for (double& a : acc) a /= static_cast<double>(trees_.size());
    return acc;
  }

  std::vector<double> parameters() const override {
    std::vector<double> p{static_cast<double>(trees_.size())};
    for (const Tree& t : trees_) t.append(p);
    return p;
  }

 private:
  std::vector<Tree> trees_;
  std::size_t width_;
};

class Boost final : public Estimator {
 public:
  Boost(std::vector<Tree> stumps, std::vector<double> alphas, std::size_t n_classes)
      : stumps_(std::move(stumps)), alphas_(std::move(alphas)), n_classes_(n_classes) {}

  std::vector<double> scores(std::span<const double> row) const override {
    std::vector<double> acc(n_classes_, 0.0);
    double total = 0.0;
    for (std::size_t m = 0; m < stumps_.size(); ++m) {
      acc[argmax(stumps_[m].leaf(row))] += alphas_[m];
      total += alphas_[m];
    }
    if (total > 0.0)
      for (double& a : acc) a /= total;
    return acc;
  }

  std::vector<double> parameters() const override {
    std::vector<double> p{static_cast<double>(stumps_.size())};
    for (std::size_t m = 0; m < stumps_.size(); ++m) {
      p.push_back(alphas_[m]);
      stumps_[m].append(p);
    }
    return p;
  }

 private:
  std::vector<Tree> stumps_;
  std::vector<double> alphas_;
  std::size_t n_classes_;
};

struct BoostResult {
  std::vector<Tree> stumps;
  std::vector<double> alphas;
  std::vector<double> staged_errors;
};

// SAMME with weighted-Gini depth-1 trees.
BoostResult boost(const FitInput& in) {
  if (in.task != Task::classification)
    throw Error(ErrorKind::invalid_argument, "adaboost supports classification only");
  const std::size_t n = in.x.rows;
  const std::size_t k = in.n_classes;
  const std::size_t rounds = hp_size(in.hp, "n_estimators");
  const double lr = in.hp.at("learning_rate");
  std::vector<double> w(n, 1.0 / static_cast<double>(n));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::vector<double>> votes(n, std::vector<double>(k, 0.0));

  BoostResult out;
  auto record = [&](Tree stump, double alpha, const std::vector<std::size_t>& pred) {
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < n; ++i) {
      votes[i][pred[i]] += alpha;
      if (argmax(votes[i]) != static_cast<std::size_t>(in.y[i])) ++wrong;
    }
    out.stumps.push_back(std::move(stump));
    out.alphas.push_back(alpha);
    out.staged_errors.push_back(static_cast<double>(wrong) / static_cast<double>(n));
  };

  for (std::size_t m = 0; m < rounds; ++m) {
    TreeBuilder builder(in, {1, 1, 0}, nullptr, &w);
    Tree stump = builder.build(all);
    std::vector<std::size_t> pred(n);
    double err = 0.0, w_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = argmax(stump.leaf(in.x.row(i)));
      w_sum += w[i];
      if (pred[i] != static_cast<std::size_t>(in.y[i])) err += w[i];
    }
    err /= w_sum;
    if (err <= 0.0) {
      record(std::move(stump), 1.0, pred);
      break;
    }
    if (err >= 1.0 - 1.0 / static_cast<double>(k)) {
      if (out.stumps.empty()) record(std::move(stump), 1.0, pred);
      break;
    }
    const double alpha = lr * (std::log((1.0 - err) / err) + std::log(static_cast<double>(k) - 1.0));
    record(std::move(stump), alpha, pred);
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (pred[i] != static_cast<std::size_t>(in.y[i])) w[i] *= std::exp(alpha);
      norm += w[i];
    }
    for (double& wi : w) wi /= norm;
  }
  return out;
}

}  // namespace

std::shared_ptr<const Estimator> fit_forest(const FitInput& in) {
  const std::size_t n = in.x.rows;
  const std::size_t n_trees = hp_size(in.hp, "n_estimators");
  TreeParams params;
  params.max_depth = hp_size(in.hp, "max_depth");
  params.min_leaf = hp_size(in.hp, "min_samples_leaf");
  params.max_features = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(in.x.cols))));
  std::vector<Tree> trees;
  trees.reserve(n_trees);
  for (std::size_t t = 0; t < n_trees; ++t) {
    Rng rng(derive_seed(in.seed, t));
    std::vector<std::size_t> sample(n);
    for (auto& s : sample) s = rng.below(n);
    std::sort(sample.begin(), sample.end());
    trees.push_back(TreeBuilder(in, params, &rng, nullptr).build(std::move(sample)));
  }
  return std::make_shared<Forest>(std::move(trees), in.task == Task::classification ? in.n_classes : 1);
}

std::shared_ptr<const Estimator> fit_adaboost(const FitInput& in) {
  BoostResult r = boost(in);
  return std::make_shared<Boost>(std::move(r.stumps), std::move(r.alphas), in.n_classes);
}

std::vector<double> adaboost_stages(const FitInput& in) { return boost(in).staged_errors; }

std::shared_ptr<const Estimator> load_forest(ParamReader& r, std::size_t n_classes, Task task, std::size_t features) {
  const std::size_t width = task == Task::classification ? n_classes : 1;
  const std::size_t count = r.next_size();
  if (count == 0) throw Error(ErrorKind::format, "corrupt forest");
  std::vector<Tree> trees;
  for (std::size_t t = 0; t < count; ++t) {
    trees.push_back(Tree::read(r, features));
    if (trees.back().width != width) throw Error(ErrorKind::format, "forest leaf width mismatch");
  }
  return std::make_shared<Forest>(std::move(trees), width);
}

std::shared_ptr<const Estimator> load_adaboost(ParamReader& r, std::size_t n_classes, std::size_t features) {
  const std::size_t count = r.next_size();
  if (count == 0) throw Error(ErrorKind::format, "corrupt boosted ensemble");
  std::vector<Tree> stumps;
  std::vector<double> alphas;
  for (std::size_t m = 0; m < count; ++m) {
    alphas.push_back(r.next());
    stumps.push_back(Tree::read(r, features));
    if (stumps.back().width != n_classes) throw Error(ErrorKind::format, "stump leaf width mismatch");
  }
  return std::make_shared<Boost>(std::move(stumps), std::move(alphas), n_classes);
}

}  // namespace orgapipe::ml::internal
