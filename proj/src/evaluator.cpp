#include "i2mv/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace i2mv {

namespace {

using nlohmann::json;

struct ClassCounts {
    long correct = 0;
    long total = 0;
};

double mean_accuracy(const std::map<std::size_t, ClassCounts>& counts) {
    if (counts.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& [cls, c] : counts) acc += static_cast<double>(c.correct) / c.total;
    return acc / static_cast<double>(counts.size());
}

// Scores of every record against every bundle, one row per record.
Eigen::MatrixXd score_matrix(const Model& model, std::span<const ClassBundle> bundles,
                             const FeatureFile& records) {
    Eigen::MatrixXd scores(static_cast<Index>(records.records.size()),
                           static_cast<Index>(bundles.size()));
    for (std::size_t i = 0; i < records.records.size(); ++i) {
        ImageEmbedding img = model.project_image(records.records[i]);
        for (std::size_t c = 0; c < bundles.size(); ++c) {
            scores(static_cast<Index>(i), static_cast<Index>(c)) =
                model.score_global(img, bundles[c].emb).item();
        }
    }
    return scores;
}

std::vector<std::size_t> label_columns(std::span<const ClassBundle> bundles,
                                       const FeatureFile& records, const char* what) {
    std::vector<std::size_t> out;
    out.reserve(records.records.size());
    for (const auto& rec : records.records) {
        auto it = std::find_if(bundles.begin(), bundles.end(),
                               [&](const ClassBundle& b) { return b.name == rec.class_name; });
        if (it == bundles.end()) {
            throw DataError(std::string(what) + ": record labeled '" + rec.class_name +
                            "' has no candidate class");
        }
        out.push_back(static_cast<std::size_t>(it - bundles.begin()));
    }
    return out;
}

void validate_grid(const std::vector<double>& grid) {
    if (grid.empty()) throw ConfigError("calibration grid is empty");
    if (grid.front() != 0.0) throw ConfigError("calibration grid must include 0 first");
    for (std::size_t i = 1; i < grid.size(); ++i) {
        if (grid[i] <= grid[i - 1]) throw ConfigError("calibration grid must strictly increase");
    }
}

}  // namespace

double per_class_top1(std::span<const std::size_t> predictions,
                      std::span<const std::size_t> labels,
                      std::span<const std::size_t> class_set) {
    if (predictions.size() != labels.size()) {
        throw std::invalid_argument("per_class_top1: predictions and labels differ in length");
    }
    std::map<std::size_t, ClassCounts> counts;
    for (std::size_t cls : class_set) counts.emplace(cls, ClassCounts{});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto it = counts.find(labels[i]);
        if (it == counts.end()) {
            throw std::invalid_argument("per_class_top1: label " + std::to_string(labels[i]) +
                                        " outside the class set");
        }
        it->second.total += 1;
        if (predictions[i] == labels[i]) it->second.correct += 1;
    }
    for (const auto& [cls, c] : counts) {
        if (c.total == 0) {
            throw DataError("per_class_top1: class " + std::to_string(cls) +
                            " has no test images");
        }
    }
    return mean_accuracy(counts);
}

std::vector<std::size_t> argmax_rows(const Eigen::MatrixXd& scores,
                                     const std::vector<char>& boosted_cols, double gamma) {
    if (boosted_cols.size() != static_cast<std::size_t>(scores.cols())) {
        throw std::invalid_argument("argmax_rows: boost mask does not match columns");
    }
    std::vector<std::size_t> out(static_cast<std::size_t>(scores.rows()));
    for (Index i = 0; i < scores.rows(); ++i) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_c = 0;
        for (Index c = 0; c < scores.cols(); ++c) {
            const double s =
                scores(i, c) + (boosted_cols[static_cast<std::size_t>(c)] ? gamma : 0.0);
            if (s > best) {
                best = s;
                best_c = static_cast<std::size_t>(c);
            }
        }
        out[static_cast<std::size_t>(i)] = best_c;
    }
    return out;
}

GzslNumbers gzsl_numbers_at(const Eigen::MatrixXd& scores,
                            const std::vector<std::size_t>& label_cols,
                            const std::vector<char>& unseen_cols, double gamma) {
    const std::vector<std::size_t> preds = argmax_rows(scores, unseen_cols, gamma);
    std::map<std::size_t, ClassCounts> seen_counts, unseen_counts;
    for (std::size_t i = 0; i < label_cols.size(); ++i) {
        auto& side = unseen_cols[label_cols[i]] ? unseen_counts : seen_counts;
        auto& c = side[label_cols[i]];
        c.total += 1;
        if (preds[i] == label_cols[i]) c.correct += 1;
    }
    GzslNumbers out;
    out.gamma = gamma;
    out.u = mean_accuracy(unseen_counts);
    out.s = mean_accuracy(seen_counts);
    out.H = out.u + out.s > 0.0 ? 2.0 * out.u * out.s / (out.u + out.s) : 0.0;
    return out;
}

std::vector<double> default_gamma_grid(const Eigen::MatrixXd& scores) {
    const double range = scores.maxCoeff() - scores.minCoeff();
    if (range <= 0.0) return {0.0};
    std::vector<double> grid;
    grid.reserve(101);
    for (int i = 0; i <= 100; ++i) grid.push_back(range * static_cast<double>(i) / 100.0);
    return grid;
}

json MetricReport::to_json() const {
    json j;
    j["mode"] = mode;
    if (mode == "zsl") j["zsl_t1"] = zsl_t1;
    if (mode == "gzsl") {
        j["gzsl"] = {{"u", gzsl.u}, {"s", gzsl.s}, {"H", gzsl.H}, {"gamma", gzsl.gamma}};
    }
    json pc = json::object();
    for (const auto& [name, acc] : per_class) pc[name] = acc;
    j["per_class"] = pc;
    return j;
}

std::string MetricReport::table() const {
    char line[128];
    std::ostringstream os;
    if (mode == "zsl") {
        os << "metric      T1\n";
        std::snprintf(line, sizeof line, "zsl     %6.2f\n", 100.0 * zsl_t1);
        os << line;
    } else {
        os << "metric       u      s      H   gamma\n";
        std::snprintf(line, sizeof line, "gzsl    %6.2f %6.2f %6.2f %7.4f\n", 100.0 * gzsl.u,
                      100.0 * gzsl.s, 100.0 * gzsl.H, gzsl.gamma);
        os << line;
    }
    return os.str();
}

MetricReport eval_zsl(const Model& model, const EmbeddingTable& table, const ViewCorpus& corpus,
                      const FeatureFile& test) {
    for (const auto& rec : test.records) {
        const ClassViews* c = corpus.find(rec.class_name);
        if (!c) throw DataError("eval_zsl: unknown class '" + rec.class_name + "'");
        if (c->split != Split::unseen) {
            throw DataError("eval_zsl: split error, record labeled '" + rec.class_name +
                            "' is not an unseen class");
        }
    }
    const std::vector<std::size_t> unseen = corpus.indices_of(Split::unseen);
    std::vector<ClassBundle> bundles = compute_bundles(model, corpus, table, unseen);
    const Eigen::MatrixXd scores = score_matrix(model, bundles, test);
    const std::vector<std::size_t> labels = label_columns(bundles, test, "eval_zsl");
    const std::vector<char> no_boost(bundles.size(), 0);
    const std::vector<std::size_t> preds = argmax_rows(scores, no_boost, 0.0);

    std::map<std::size_t, ClassCounts> counts;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& c = counts[labels[i]];
        c.total += 1;
        if (preds[i] == labels[i]) c.correct += 1;
    }
    MetricReport report;
    report.mode = "zsl";
    report.zsl_t1 = mean_accuracy(counts);
    for (const auto& [col, c] : counts) {
        report.per_class.emplace_back(bundles[col].name,
                                      static_cast<double>(c.correct) / c.total);
    }
    return report;
}

GzslEvalResult calibrate_and_eval_gzsl(const Model& model, const EmbeddingTable& table,
                                       const ViewCorpus& corpus, const FeatureFile& heldout,
                                       const FeatureFile& test,
                                       const std::optional<std::vector<double>>& grid) {
    // Heldout calibration: seen classes against val classes playing unseen.
    std::vector<std::size_t> heldout_classes = corpus.indices_of(Split::seen);
    {
        const auto val = corpus.indices_of(Split::val);
        heldout_classes.insert(heldout_classes.end(), val.begin(), val.end());
        std::sort(heldout_classes.begin(), heldout_classes.end());
    }
    std::vector<ClassBundle> heldout_bundles =
        compute_bundles(model, corpus, table, heldout_classes);
    std::vector<char> heldout_unseen(heldout_bundles.size(), 0);
    for (std::size_t i = 0; i < heldout_bundles.size(); ++i) {
        if (heldout_bundles[i].split == Split::val) heldout_unseen[i] = 1;
    }
    const std::vector<std::size_t> heldout_labels =
        label_columns(heldout_bundles, heldout, "calibrate");
    bool has_seen_side = false, has_val_side = false;
    for (std::size_t lbl : heldout_labels) {
        (heldout_unseen[lbl] ? has_val_side : has_seen_side) = true;
    }
    if (!has_seen_side || !has_val_side) {
        throw DataError("calibrate: heldout set must contain both seen-class and val-class images");
    }
    const Eigen::MatrixXd heldout_scores = score_matrix(model, heldout_bundles, heldout);

    std::vector<double> gammas = grid ? *grid : default_gamma_grid(heldout_scores);
    validate_grid(gammas);

    GzslEvalResult result;
    double best_h = -1.0;
    double gamma_star = 0.0;
    for (double g : gammas) {
        GzslNumbers n = gzsl_numbers_at(heldout_scores, heldout_labels, heldout_unseen, g);
        result.sweep.gammas.push_back(g);
        result.sweep.points.push_back(n);
        if (n.H > best_h) {
            best_h = n.H;
            gamma_star = g;
        }
    }

    // Test pass: seen + unseen candidates, gamma* boosting the unseen ones.
    std::vector<std::size_t> test_classes = corpus.indices_of(Split::seen);
    {
        const auto unseen = corpus.indices_of(Split::unseen);
        test_classes.insert(test_classes.end(), unseen.begin(), unseen.end());
        std::sort(test_classes.begin(), test_classes.end());
    }
    std::vector<ClassBundle> test_bundles = compute_bundles(model, corpus, table, test_classes);
    std::vector<char> test_unseen(test_bundles.size(), 0);
    for (std::size_t i = 0; i < test_bundles.size(); ++i) {
        if (test_bundles[i].split == Split::unseen) test_unseen[i] = 1;
    }
    const std::vector<std::size_t> test_labels = label_columns(test_bundles, test, "eval_gzsl");
    const Eigen::MatrixXd test_scores = score_matrix(model, test_bundles, test);

    MetricReport report;
    report.mode = "gzsl";
    report.gzsl = gzsl_numbers_at(test_scores, test_labels, test_unseen, gamma_star);
    {
        const std::vector<std::size_t> preds = argmax_rows(test_scores, test_unseen, gamma_star);
        std::map<std::size_t, ClassCounts> counts;
        for (std::size_t i = 0; i < test_labels.size(); ++i) {
            auto& c = counts[test_labels[i]];
            c.total += 1;
            if (preds[i] == test_labels[i]) c.correct += 1;
        }
        for (const auto& [col, c] : counts) {
            report.per_class.emplace_back(test_bundles[col].name,
                                          static_cast<double>(c.correct) / c.total);
        }
    }
    result.report = std::move(report);
    return result;
}

double zsl_top1_on(const Model& model, const EmbeddingTable& table, const ViewCorpus& corpus,
                   const FeatureFile& records, Split candidate_split) {
    for (const auto& rec : records.records) {
        const ClassViews* c = corpus.find(rec.class_name);
        if (!c || c->split != candidate_split) {
            throw DataError("restricted eval: record labeled '" + rec.class_name +
                            "' is outside the " + split_name(candidate_split) + " split");
        }
    }
    std::vector<ClassBundle> bundles =
        compute_bundles(model, corpus, table, corpus.indices_of(candidate_split));
    const Eigen::MatrixXd scores = score_matrix(model, bundles, records);
    const std::vector<std::size_t> labels = label_columns(bundles, records, "restricted eval");
    const std::vector<char> no_boost(bundles.size(), 0);
    const std::vector<std::size_t> preds = argmax_rows(scores, no_boost, 0.0);
    std::map<std::size_t, ClassCounts> counts;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& c = counts[labels[i]];
        c.total += 1;
        if (preds[i] == labels[i]) c.correct += 1;
    }
    return mean_accuracy(counts);
}

double per_class_top1_over(const Model& model, std::span<const ClassBundle> bundles,
                           const FeatureFile& records, EvalMode mode, double gamma) {
    std::map<std::size_t, ClassCounts> counts;
    const std::vector<std::size_t> labels = label_columns(bundles, records, "eval");
    for (std::size_t i = 0; i < records.records.size(); ++i) {
        ImageEmbedding img = model.project_image(records.records[i]);
        const std::size_t pred = infer(model, img, bundles, mode, gamma);
        auto& c = counts[labels[i]];
        c.total += 1;
        if (pred == labels[i]) c.correct += 1;
    }
    return mean_accuracy(counts);
}

}  // namespace i2mv
