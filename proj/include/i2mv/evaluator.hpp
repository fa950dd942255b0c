#pragma once

#include <json.hpp>
#include <optional>
#include <span>
#include <vector>

#include "i2mv/model.hpp"

namespace i2mv {

struct GzslNumbers {
    double u = 0.0;
    double s = 0.0;
    double H = 0.0;
    double gamma = 0.0;
};

struct MetricReport {
    std::string mode;  // "zsl" | "gzsl"
    double zsl_t1 = 0.0;
    GzslNumbers gzsl;
    std::vector<std::pair<std::string, double>> per_class;

    nlohmann::json to_json() const;
    /// Fixed-width T1 / u / s / H table for terminal output.
    std::string table() const;
};

struct CalibrationSweep {
    std::vector<double> gammas;       // strictly increasing, starts at 0
    std::vector<GzslNumbers> points;  // heldout (u, s, H) per gamma
};

/// Mean over classes of within-class accuracy. Every label must belong to
/// `class_set`; a class without test images is a coverage error.
double per_class_top1(std::span<const std::size_t> predictions,
                      std::span<const std::size_t> labels,
                      std::span<const std::size_t> class_set);

// ---- score-matrix primitives (model-free, shared by eval and tests) ---------

/// Row-wise argmax with `gamma` added to boosted columns; first max wins.
std::vector<std::size_t> argmax_rows(const Eigen::MatrixXd& scores,
                                     const std::vector<char>& boosted_cols, double gamma);

/// Per-class top-1 split into the unseen-column and seen-column sides of a
/// score matrix, plus their harmonic mean, at one calibration offset.
GzslNumbers gzsl_numbers_at(const Eigen::MatrixXd& scores,
                            const std::vector<std::size_t>& label_cols,
                            const std::vector<char>& unseen_cols, double gamma);

/// 101 evenly spaced offsets from 0 to (max - min) of the score matrix.
std::vector<double> default_gamma_grid(const Eigen::MatrixXd& scores);

// ---- model-level evaluation ----------------------------------------------------

/// Restricted argmax among unseen classes; records must all be unseen-class.
MetricReport eval_zsl(const Model& model, const EmbeddingTable& table, const ViewCorpus& corpus,
                      const FeatureFile& test);

struct GzslEvalResult {
    MetricReport report;
    CalibrationSweep sweep;
};

/// Picks gamma* maximizing the harmonic mean on the heldout set (seen-class
/// images vs val-class images standing in for unseen ones), then reports
/// (u, s, H) at gamma* over the seen+unseen test set.
GzslEvalResult calibrate_and_eval_gzsl(const Model& model, const EmbeddingTable& table,
                                       const ViewCorpus& corpus, const FeatureFile& heldout,
                                       const FeatureFile& test,
                                       const std::optional<std::vector<double>>& grid = {});

// ---- helpers shared with the trainer ----------------------------------------------

/// Per-class top-1 of `candidate_split` images under restricted argmax among
/// that split's classes.
double zsl_top1_on(const Model& model, const EmbeddingTable& table, const ViewCorpus& corpus,
                   const FeatureFile& records, Split candidate_split);

/// Per-class top-1 of the file's records under `infer` over fixed bundles.
double per_class_top1_over(const Model& model, std::span<const ClassBundle> bundles,
                           const FeatureFile& records, EvalMode mode, double gamma);

}  // namespace i2mv
