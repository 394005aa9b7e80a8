#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "orgapipe/table.hpp"

namespace orgapipe::ml {

enum class Architecture { knn, random_forest, adaboost, mlp, linear_svc };
enum class Task { classification, regression };

std::string_view to_string(Architecture a);
Architecture architecture_from_string(std::string_view s);
std::string_view to_string(Task t);
Task task_from_string(std::string_view s);

struct ModelSpec {
  Architecture architecture = Architecture::knn;
  std::map<std::string, double> hyperparameters;  // missing entries take the architecture default
  std::uint64_t seed = 0;
  Task task = Task::classification;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Defaults merged with the ModelSpec overrides; throws on unknown names or out-of-range values.
std::map<std::string, double> resolve_hyperparameters(const ModelSpec& spec);

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  friend bool operator==(const Matrix&, const Matrix&) = default;
};

struct Dataset {
  std::vector<std::string> feature_names;
  Matrix x;
  std::vector<double> y;  // class index (classification) or target value
  std::vector<std::string> vocabulary;
  Task task = Task::classification;
  std::size_t dropped_rows = 0;

  std::size_t size() const { return x.rows; }
  std::size_t n_classes() const { return vocabulary.size(); }
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Builds a dataset from table columns. Rows with an absent or non-numeric feature cell, or an
/// absent label, are dropped and counted. Labels map to indices in first-seen order.
/// With no explicit features, every numeric column except the label, id/frame/track columns and
/// annotation or prediction columns is used.
Dataset make_dataset(const TabularData& table, const std::string& label, std::vector<std::string> features,
                     Task task = Task::classification);
Dataset load_training_csv(const std::filesystem::path& path, const std::string& label,
                          std::vector<std::string> features = {}, Task task = Task::classification);

/// Per-column (x - mean) / std; a zero std is stored as 1.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> std;

  static Standardizer fit(const Matrix& x);
  Matrix transform(const Matrix& x) const;
  void transform_row(std::span<const double> in, std::span<double> out) const;
  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

/// Fitted estimator on standardized features.
class Estimator {
 public:
  virtual ~Estimator() = default;
  /// Classification: per-class scores, argmax is the prediction. Regression: a single value.
  virtual std::vector<double> scores(std::span<const double> row) const = 0;
  /// Learned state as doubles; layout is architecture specific and self-delimiting.
  virtual std::vector<double> parameters() const = 0;
};

struct TrainingReport {
  std::vector<double> fold_accuracies;
  double training_accuracy = 0.0;
  friend bool operator==(const TrainingReport&, const TrainingReport&) = default;
};

struct TrainedModel {
  ModelSpec spec;
  std::vector<std::string> schema;
  std::vector<std::string> vocabulary;
  Standardizer standardizer;
  std::shared_ptr<const Estimator> estimator;
  TrainingReport report;
};

struct Prediction {
  std::vector<double> values;               // class index or regression value
  std::vector<std::vector<double>> scores;  // per-class scores; empty for regression
};

TrainedModel train(const ModelSpec& spec, const Dataset& data);

/// `schema` names the columns of `rows`; it must equal the model schema.
Prediction predict(const TrainedModel& model, const std::vector<std::string>& schema, const Matrix& rows);

struct CvConfig {
  std::size_t k = 10;
  std::uint64_t seed = 0;
};

struct CvResult {
  double mean_accuracy = 0.0;
  double sd = 0.0;  // population
  std::vector<double> per_fold;
};

/// Fold index per sample: seeded shuffle within each class, then round-robin with one counter
/// running across classes. Regression datasets get a plain shuffled round-robin.
std::vector<std::size_t> stratified_folds(const Dataset& data, const CvConfig& cv);

/// Classification reports accuracy per fold; regression reports R^2.
CvResult cross_validate(const ModelSpec& spec, const Dataset& data, const CvConfig& cv);

/// OPML container bytes.
std::vector<std::uint8_t> export_model(const TrainedModel& model);
TrainedModel import_model(std::span<const std::uint8_t> bytes);

inline constexpr std::uint16_t kContainerVersion = 1;

namespace detail {

struct MlpShape {
  std::size_t inputs = 0;
  std::size_t hidden = 0;
  std::size_t outputs = 0;
  bool classification = true;
  std::size_t parameter_count() const { return hidden * inputs + hidden + outputs * hidden + outputs; }
};

/// Mean loss of the network over (x, y); fills `grad` (same layout as params) when non-null.
double mlp_loss(const MlpShape& shape, std::span<const double> params, const Matrix& x, std::span<const double> y,
                std::vector<double>* grad);

/// Training error after each boosting round, on the training data.
std::vector<double> adaboost_staged_errors(const ModelSpec& spec, const Dataset& data);

}  // namespace detail

}  // namespace orgapipe::ml
