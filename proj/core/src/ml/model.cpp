#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "internal.hpp"
#include "orgapipe/error.hpp"

namespace orgapipe::ml {

using nlohmann::json;
using internal::Hyper;

std::string_view to_string(Architecture a) {
  switch (a) {
    case Architecture::knn: return "knn";
    case Architecture::random_forest: return "random_forest";
    case Architecture::adaboost: return "adaboost";
    case Architecture::mlp: return "mlp";
    case Architecture::linear_svc: return "linear_svc";
  }
  return "knn";
}

Architecture architecture_from_string(std::string_view s) {
  for (auto a : {Architecture::knn, Architecture::random_forest, Architecture::adaboost, Architecture::mlp,
                 Architecture::linear_svc})
    if (to_string(a) == s) return a;
  throw Error(ErrorKind::invalid_argument, "unknown architecture '" + std::string(s) + "'");
}

std::string_view to_string(Task t) { return t == Task::classification ? "classification" : "regression"; }

Task task_from_string(std::string_view s) {
  if (s == "classification") return Task::classification;
  if (s == "regression") return Task::regression;
  throw Error(ErrorKind::invalid_argument, "unknown task '" + std::string(s) + "'");
}

namespace {

struct HyperRule {
  double fallback;
  double min;
  double max;
  bool integer;
  bool min_exclusive = false;
};

std::map<std::string, HyperRule> rules_for(Architecture a) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  switch (a) {
    case Architecture::knn: return {{"k", {5, 1, 1e9, true}}};
    case Architecture::random_forest:
      return {{"n_estimators", {100, 1, 1e6, true}},
              {"max_depth", {0, 0, 1e6, true}},
              {"min_samples_leaf", {1, 1, 1e9, true}}};
    case Architecture::adaboost:
      return {{"n_estimators", {50, 1, 1e6, true}}, {"learning_rate", {1.0, 0, inf, false, true}}};
    case Architecture::mlp:
      return {{"hidden_units", {100, 1, 1e6, true}},
              {"epochs", {200, 1, 1e9, true}},
              {"learning_rate", {1e-3, 0, inf, false, true}},
              {"beta1", {0.9, 0, 1, false}},
              {"beta2", {0.999, 0, 1, false}}};
    case Architecture::linear_svc:
      return {{"epochs", {100, 1, 1e9, true}},
              {"learning_rate", {0.01, 0, inf, false, true}},
              {"lambda", {1e-4, 0, inf, false}}};
  }
  return {};
}

}  // namespace

std::map<std::string, double> resolve_hyperparameters(const ModelSpec& spec) {
  const auto rules = rules_for(spec.architecture);
  Hyper out;
  for (const auto& [name, rule] : rules) out[name] = rule.fallback;
  for (const auto& [name, value] : spec.hyperparameters) {
    auto it = rules.find(name);
    if (it == rules.end())
      throw Error(ErrorKind::invalid_argument, "unknown hyperparameter '" + name + "' for " +
                                                   std::string(to_string(spec.architecture)));
    const HyperRule& r = it->second;
    const bool below = r.min_exclusive ? !(value > r.min) : !(value >= r.min);
    if (!std::isfinite(value) || below || value > r.max || (r.integer && value != std::floor(value)))
      throw Error(ErrorKind::invalid_argument, "hyperparameter '" + name + "' out of range");
    out[name] = value;
  }
  if (spec.architecture == Architecture::mlp && (out["beta1"] >= 1.0 || out["beta2"] >= 1.0))
    throw Error(ErrorKind::invalid_argument, "Adam betas must be < 1");
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.feature_names = feature_names;
  d.vocabulary = vocabulary;
  d.task = task;
  d.x = Matrix(indices.size(), x.cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = x.row(indices[r]);
    std::copy(src.begin(), src.end(), d.x.row(r).begin());
    d.y.push_back(y[indices[r]]);
  }
  return d;
}

namespace {

std::optional<double> numeric_cell(const Cell& c) {
  if (const auto* d = std::get_if<double>(&c)) return *d;
  if (const auto* s = std::get_if<std::string>(&c)) return parse_number(*s);
  return std::nullopt;
}

std::optional<std::string> text_cell(const Cell& c) {
  if (const auto* d = std::get_if<double>(&c)) return format_number(*d);
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  return std::nullopt;
}

bool excluded_by_default(const std::string& name) {
  return name == "detection_id" || name == "frame" || name == "track_id" || name == "provenance" ||
         name.starts_with("ann:") || name.starts_with("pred:");
}

}  // namespace

Dataset make_dataset(const TabularData& table, const std::string& label, std::vector<std::string> features,
                     Task task) {
  const auto label_idx = table.column_index(label);
  if (!label_idx) throw Error(ErrorKind::invalid_argument, "label column '" + label + "' not found");
  if (features.empty()) {
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      const std::string& name = table.columns[c];
      if (c == *label_idx || excluded_by_default(name)) continue;
      bool numeric = false, all_numeric = true;
      for (const auto& row : table.rows) {
        if (std::holds_alternative<std::monostate>(row[c])) continue;
        if (numeric_cell(row[c])) numeric = true;
        else all_numeric = false;
      }
      if (numeric && all_numeric) features.push_back(name);
    }
    if (features.empty()) throw Error(ErrorKind::invalid_argument, "no numeric feature columns found");
  }
  std::vector<std::size_t> cols;
  std::string missing;
  for (const auto& f : features) {
    if (auto i = table.column_index(f)) cols.push_back(*i);
    else missing += (missing.empty() ? "" : ", ") + f;
  }
  if (!missing.empty()) throw Error(ErrorKind::invalid_argument, "feature columns not found: " + missing);

  Dataset d;
  d.task = task;
  d.feature_names = features;
  std::vector<double> values;
  std::map<std::string, std::size_t> label_index;
  for (const auto& row : table.rows) {
    std::vector<double> x;
    bool ok = true;
    for (std::size_t c : cols) {
      const auto v = numeric_cell(row[c]);
      if (!v || !std::isfinite(*v)) {
        ok = false;
        break;
      }
      x.push_back(*v);
    }
    double y = 0.0;
    if (ok && task == Task::classification) {
      const auto t = text_cell(row[*label_idx]);
      if (!t || t->empty()) {
        ok = false;
      } else {
        auto [it, inserted] = label_index.try_emplace(*t, d.vocabulary.size());
        if (inserted) d.vocabulary.push_back(*t);
        y = static_cast<double>(it->second);
      }
    } else if (ok) {
      const auto v = numeric_cell(row[*label_idx]);
      if (!v || !std::isfinite(*v)) ok = false;
      else y = *v;
    }
    if (!ok) {
      ++d.dropped_rows;
      continue;
    }
    values.insert(values.end(), x.begin(), x.end());
    d.y.push_back(y);
  }
  if (d.y.empty()) throw Error(ErrorKind::invalid_argument, "no usable rows");
  d.x.rows = d.y.size();
  d.x.cols = cols.size();
  d.x.data = std::move(values);
  return d;
}

Dataset load_training_csv(const std::filesystem::path& path, const std::string& label,
                          std::vector<std::string> features, Task task) {
  return make_dataset(read_csv_file(path), label, std::move(features), task);
}

Standardizer Standardizer::fit(const Matrix& x) {
  Standardizer s;
  s.mean.assign(x.cols, 0.0);
  s.std.assign(x.cols, 1.0);
  if (x.rows == 0) return s;
  const double n = static_cast<double>(x.rows);
  for (std::size_t j = 0; j < x.cols; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) sum += x.at(i, j);
    const double mean = sum / n;
    double ss = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) ss += (x.at(i, j) - mean) * (x.at(i, j) - mean);
    const double sd = std::sqrt(ss / n);
    s.mean[j] = mean;
    s.std[j] = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

void Standardizer::transform_row(std::span<const double> in, std::span<double> out) const {
  for (std::size_t j = 0; j < in.size(); ++j) out[j] = (in[j] - mean[j]) / std[j];
}

Matrix Standardizer::transform(const Matrix& x) const {
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) transform_row(x.row(i), out.row(i));
  return out;
}

namespace {

std::shared_ptr<const Estimator> fit(const ModelSpec& spec, const Hyper& hp, const Dataset& data, const Matrix& xs) {
  const internal::FitInput in{xs, data.y, data.task == Task::classification ? data.n_classes() : 0, data.task, hp,
                              spec.seed};
  switch (spec.architecture) {
    case Architecture::knn: return internal::fit_knn(in);
    case Architecture::random_forest: return internal::fit_forest(in);
    case Architecture::adaboost: return internal::fit_adaboost(in);
    case Architecture::mlp: return internal::fit_mlp(in);
    case Architecture::linear_svc: return internal::fit_linear_svc(in);
  }
  throw Error(ErrorKind::invalid_argument, "unknown architecture");
}

void validate_training_data(const ModelSpec& spec, const Dataset& data) {
  if (spec.task != data.task) throw Error(ErrorKind::invalid_argument, "model task does not match dataset task");
  if (data.size() < 2) throw Error(ErrorKind::invalid_argument, "training needs at least 2 rows");
  if (data.x.cols == 0) throw Error(ErrorKind::invalid_argument, "training needs at least one feature column");
  if (data.y.size() != data.x.rows) throw Error(ErrorKind::invalid_argument, "label count does not match rows");
  if (data.task == Task::classification) {
    std::set<double> distinct;
    for (double y : data.y) {
      if (!(y >= 0.0) || y >= static_cast<double>(data.n_classes()) || y != std::floor(y))
        throw Error(ErrorKind::invalid_argument, "label index outside the vocabulary");
      distinct.insert(y);
    }
    if (distinct.size() < 2) throw Error(ErrorKind::invalid_argument, "classification needs at least 2 classes");
  }
  for (double v : data.x.data)
    if (!std::isfinite(v)) throw Error(ErrorKind::invalid_argument, "feature matrix holds non-finite values");
}

double score_dataset(const TrainedModel& model, const Dataset& data) {
  const Prediction p = predict(model, data.feature_names, data.x);
  if (data.task == Task::classification) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) hits += p.values[i] == data.y[i];
    return static_cast<double>(hits) / static_cast<double>(data.size());
  }
  const double mean = std::accumulate(data.y.begin(), data.y.end(), 0.0) / static_cast<double>(data.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ss_res += (p.values[i] - data.y[i]) * (p.values[i] - data.y[i]);
    ss_tot += (data.y[i] - mean) * (data.y[i] - mean);
  }
  return ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
}

}  // namespace

TrainedModel train(const ModelSpec& spec, const Dataset& data) {
  validate_training_data(spec, data);
  const Hyper hp = resolve_hyperparameters(spec);
  TrainedModel model;
  model.spec = spec;
  model.schema = data.feature_names;
  model.vocabulary = data.task == Task::classification ? data.vocabulary : std::vector<std::string>{};
  model.standardizer = Standardizer::fit(data.x);
  model.estimator = fit(spec, hp, data, model.standardizer.transform(data.x));
  model.report.training_accuracy = score_dataset(model, data);
  return model;
}

Prediction predict(const TrainedModel& model, const std::vector<std::string>& schema, const Matrix& rows) {
  if (schema != model.schema) throw Error(ErrorKind::schema_mismatch, "row schema does not match the model schema");
  if (rows.cols != model.schema.size()) throw Error(ErrorKind::schema_mismatch, "row width does not match the schema");
  Prediction out;
  std::vector<double> xs(rows.cols);
  for (std::size_t i = 0; i < rows.rows; ++i) {
    const auto row = rows.row(i);
    for (double v : row)
      if (!std::isfinite(v)) throw Error(ErrorKind::invalid_argument, "absent feature cell in prediction rows");
    model.standardizer.transform_row(row, xs);
    std::vector<double> s = model.estimator->scores(xs);
    if (model.spec.task == Task::classification) {
      out.values.push_back(static_cast<double>(internal::argmax(s)));
      out.scores.push_back(std::move(s));
    } else {
      out.values.push_back(s.at(0));
    }
  }
  return out;
}

std::vector<std::size_t> stratified_folds(const Dataset& data, const CvConfig& cv) {
  if (cv.k < 2 || cv.k > data.size())
    throw Error(ErrorKind::invalid_argument, "fold count must satisfy 2 <= k <= n");
  std::vector<std::size_t> fold(data.size(), 0);
  internal::Rng rng(cv.seed);
  std::size_t counter = 0;
  auto assign = [&](std::vector<std::size_t> members) {
    rng.shuffle(members);
    for (std::size_t i : members) fold[i] = counter++ % cv.k;
  };
  if (data.task == Task::regression) {
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), 0);
    assign(std::move(all));
    return fold;
  }
  std::vector<std::vector<std::size_t>> by_class(data.n_classes());
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.y[i])].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) continue;
    if (by_class[c].size() < cv.k)
      throw Error(ErrorKind::invalid_argument,
                  "class '" + data.vocabulary[c] + "' has " + std::to_string(by_class[c].size()) +
                      " samples, fewer than k = " + std::to_string(cv.k) +
                      "; lower k or annotate more samples of that class");
  }
  for (auto& members : by_class)
    if (!members.empty()) assign(std::move(members));
  return fold;
}

CvResult cross_validate(const ModelSpec& spec, const Dataset& data, const CvConfig& cv) {
  validate_training_data(spec, data);
  resolve_hyperparameters(spec);
  const std::vector<std::size_t> fold = stratified_folds(data, cv);
  CvResult r;
  for (std::size_t f = 0; f < cv.k; ++f) {
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < data.size(); ++i) (fold[i] == f ? test_idx : train_idx).push_back(i);
    const TrainedModel m = train(spec, data.subset(train_idx));
    r.per_fold.push_back(score_dataset(m, data.subset(test_idx)));
  }
  const double k = static_cast<double>(cv.k);
  r.mean_accuracy = std::accumulate(r.per_fold.begin(), r.per_fold.end(), 0.0) / k;
  double ss = 0.0;
  for (double a : r.per_fold) ss += (a - r.mean_accuracy) * (a - r.mean_accuracy);
  r.sd = std::sqrt(ss / k);
  return r;
}

namespace detail {

std::vector<double> adaboost_staged_errors(const ModelSpec& spec, const Dataset& data) {
  validate_training_data(spec, data);
  const Hyper hp = resolve_hyperparameters(spec);
  const Matrix xs = Standardizer::fit(data.x).transform(data.x);
  return internal::adaboost_stages({xs, data.y, data.n_classes(), data.task, hp, spec.seed});
}

}  // namespace detail

// Container: "OPML" | u16 version | u32 header length | header JSON | u64 count | f64[count] | u32 CRC32.
namespace {

constexpr char kMagic[4] = {'O', 'P', 'M', 'L'};

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
T get_le(std::span<const std::uint8_t> in, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[at + i]) << (8 * i);
  return v;
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

std::vector<std::uint8_t> export_model(const TrainedModel& model) {
  if (!model.estimator) throw Error(ErrorKind::invalid_argument, "model has no learned state");
  json header;
  header["architecture"] = to_string(model.spec.architecture);
  header["task"] = to_string(model.spec.task);
  header["hyperparameters"] = model.spec.hyperparameters;
  header["seed"] = model.spec.seed;
  header["schema"] = model.schema;
  header["vocabulary"] = model.vocabulary;
  header["report"] = {{"fold_accuracies", model.report.fold_accuracies},
                      {"training_accuracy", model.report.training_accuracy}};
  const std::string text = header.dump();

  std::vector<double> payload = model.standardizer.mean;
  payload.insert(payload.end(), model.standardizer.std.begin(), model.standardizer.std.end());
  const std::vector<double> state = model.estimator->parameters();
  payload.insert(payload.end(), state.begin(), state.end());

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le<std::uint16_t>(out, kContainerVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  put_le<std::uint64_t>(out, payload.size());
  for (double v : payload) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_le<std::uint64_t>(out, bits);
  }
  put_le<std::uint32_t>(out, crc_of(out));
  return out;
}

TrainedModel import_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw Error(ErrorKind::format, "not a model container");
  if (bytes.size() >= 6) {
    const auto version = get_le<std::uint16_t>(bytes, 4);
    if (version != kContainerVersion)
      throw Error(ErrorKind::version, "unsupported model container version " + std::to_string(version));
  }
  if (bytes.size() < 4 + 2 + 4 + 8 + 4) throw Error(ErrorKind::checksum, "model container is truncated");
  const auto body = bytes.first(bytes.size() - 4);
  if (crc_of(body) != get_le<std::uint32_t>(bytes, bytes.size() - 4))
    throw Error(ErrorKind::checksum, "model container checksum mismatch");

  const std::size_t header_len = get_le<std::uint32_t>(bytes, 6);
  if (10 + header_len + 8 > body.size()) throw Error(ErrorKind::format, "model header length is inconsistent");
  const json header = json::parse(bytes.begin() + 10, bytes.begin() + 10 + static_cast<std::ptrdiff_t>(header_len));
  const std::uint64_t count = get_le<std::uint64_t>(bytes, 10 + header_len);
  if (count != (body.size() - 18 - header_len) / 8 || (body.size() - 18 - header_len) % 8 != 0)
    throw Error(ErrorKind::format, "model payload length is inconsistent");
  std::vector<double> payload(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto bits = get_le<std::uint64_t>(bytes, 18 + header_len + 8 * i);
    std::memcpy(&payload[i], &bits, sizeof bits);
  }

  TrainedModel m;
  try {
    m.spec.architecture = architecture_from_string(header.at("architecture").get<std::string>());
    m.spec.task = task_from_string(header.at("task").get<std::string>());
    m.spec.hyperparameters = header.at("hyperparameters").get<std::map<std::string, double>>();
    m.spec.seed = header.at("seed").get<std::uint64_t>();
    m.schema = header.at("schema").get<std::vector<std::string>>();
    m.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
    m.report.fold_accuracies = header.at("report").at("fold_accuracies").get<std::vector<double>>();
    m.report.training_accuracy = header.at("report").at("training_accuracy").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("malformed model header: ") + e.what());
  }
  const std::size_t d = m.schema.size();
  if (d == 0) throw Error(ErrorKind::format, "model schema is empty");
  const std::size_t k = m.vocabulary.size();
  if (m.spec.task == Task::classification && k < 2) throw Error(ErrorKind::format, "model vocabulary is too small");

  internal::ParamReader r(payload);
  const auto mean = r.take(d);
  const auto sd = r.take(d);
  m.standardizer.mean.assign(mean.begin(), mean.end());
  m.standardizer.std.assign(sd.begin(), sd.end());
  const std::size_t outputs = m.spec.task == Task::classification ? k : 1;
  switch (m.spec.architecture) {
    case Architecture::knn: m.estimator = internal::load_knn(r, k, m.spec.task, d); break;
    case Architecture::random_forest: m.estimator = internal::load_forest(r, k, m.spec.task, d); break;
    case Architecture::adaboost: m.estimator = internal::load_adaboost(r, k, d); break;
    case Architecture::mlp: m.estimator = internal::load_mlp(r, m.spec.task, d, outputs); break;
    case Architecture::linear_svc: m.estimator = internal::load_linear_svc(r, k, d); break;
  }
  if (!r.done()) throw Error(ErrorKind::format, "trailing data in model payload");
  return m;
}

}  // namespace orgapipe::ml
