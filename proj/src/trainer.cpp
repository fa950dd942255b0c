#include "i2mv/trainer.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <unordered_map>

#include "i2mv/evaluator.hpp"

namespace i2mv {

namespace {

using nlohmann::json;

std::unordered_map<std::string, std::size_t> label_index(const ViewCorpus& corpus,
                                                         std::span<const std::size_t> classes) {
    std::unordered_map<std::string, std::size_t> out;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        out.emplace(corpus.classes[classes[i]].name, i);
    }
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("train config: lr must be > 0");
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (lambda_local < 0.0) throw ConfigError("train config: lambda_local must be >= 0");
    if (patience < 0) throw ConfigError("train config: patience must be >= 0");
    if (selection != "zsl_t1" && selection != "gzsl_h") {
        throw ConfigError("train config: selection must be zsl_t1 or gzsl_h, got '" + selection +
                          "'");
    }
}

json TrainConfig::to_json() const {
    return json{{"lr", lr},           {"epochs", epochs},     {"batch_size", batch_size},
                {"lambda_local", lambda_local}, {"seed", seed}, {"patience", patience},
                {"selection", selection}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig cfg;
    const json defaults = cfg.to_json();
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!defaults.contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
        (void)value;
    }
    try {
        cfg.lr = j.value("lr", cfg.lr);
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.lambda_local = j.value("lambda_local", cfg.lambda_local);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.patience = j.value("patience", cfg.patience);
        cfg.selection = j.value("selection", cfg.selection);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

StepLosses train_step(Model& model, const EmbeddingTable& table, const ViewCorpus& corpus,
                      std::span<const PatchFeatureRecord> batch, AdamState& opt,
                      double lambda_local) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const std::vector<std::size_t> seen = corpus.indices_of(Split::seen);
    if (seen.empty()) throw DataError("train_step: corpus has no seen classes");
    const auto labels = label_index(corpus, seen);
    for (const auto& rec : batch) {
        if (!labels.contains(rec.class_name)) {
            throw DataError("split leak: training image labeled '" + rec.class_name +
                            "' is not a seen class");
        }
    }

    Tape tape;
    std::vector<ClassBundle> bundles = compute_bundles(model, corpus, table, seen);

    Tensor cls_sum, local_sum;
    for (const auto& rec : batch) {
        ImageEmbedding img = model.project_image(rec);
        std::vector<Tensor> cls_scores, local_scores;
        cls_scores.reserve(bundles.size());
        local_scores.reserve(bundles.size());
        for (const auto& b : bundles) {
            cls_scores.push_back(model.score_global(img, b.emb));
            local_scores.push_back(model.score_local(img, b.emb));
        }
        const Index label = static_cast<Index>(labels.at(rec.class_name));
        Tensor ce_cls = cross_entropy(stack_scalars(cls_scores), label);
        Tensor ce_local = cross_entropy(stack_scalars(local_scores), label);
        cls_sum = cls_sum.valid() ? add(cls_sum, ce_cls) : ce_cls;
        local_sum = local_sum.valid() ? add(local_sum, ce_local) : ce_local;
    }
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    Tensor loss_cls = scale(cls_sum, inv_b);
    Tensor loss_local = scale(local_sum, inv_b);
    Tensor loss_total = add(loss_cls, scale(loss_local, lambda_local));

    backward(loss_total, tape);
    std::vector<Tensor> params = model.params();
    adam_step(params, opt);
    return {loss_cls.item(), loss_local.item(), loss_total.item()};
}

namespace {

double validation_metric(const Model& model, const EmbeddingTable& table,
                         const ViewCorpus& corpus, const FeatureFile& train,
                         const FeatureFile& val, const std::string& selection) {
    if (selection == "zsl_t1") {
        // Val classes stand in for unseen ones: restricted argmax among them.
        return zsl_top1_on(model, table, corpus, val, Split::val);
    }
    // gzsl_h: candidates are seen plus val; val images act as the unseen side
    // and the training images as the seen side, at gamma 0.
    std::vector<std::size_t> cand = corpus.indices_of(Split::seen);
    for (std::size_t i : corpus.indices_of(Split::val)) cand.push_back(i);
    std::sort(cand.begin(), cand.end());
    std::vector<ClassBundle> bundles = compute_bundles(model, corpus, table, cand);
    for (auto& b : bundles) {
        if (b.split == Split::val) b.split = Split::unseen;  // plays the unseen role here
    }
    const double u = per_class_top1_over(model, bundles, val, EvalMode::gzsl, 0.0);
    const double s = per_class_top1_over(model, bundles, train, EvalMode::gzsl, 0.0);
    return u + s > 0.0 ? 2.0 * u * s / (u + s) : 0.0;
}

}  // namespace

TrainState fit(Model& model, const EmbeddingTable& table, const ViewCorpus& corpus,
               const FeatureFile& train, const FeatureFile& val, const TrainConfig& cfg,
               const std::optional<std::filesystem::path>& out_dir) {
    cfg.validate();
    if (train.records.empty()) throw DataError("fit: empty training split");
    if (val.records.empty()) throw DataError("fit: empty validation split");
    for (const auto& rec : val.records) {
        const ClassViews* c = corpus.find(rec.class_name);
        if (!c || c->split != Split::val) {
            throw DataError("fit: validation image labeled '" + rec.class_name +
                            "' is not a val-split class");
        }
    }

    std::ofstream log;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        log.open(*out_dir / "train_log.jsonl", std::ios::trunc);
    }

    TrainState state;
    AdamState opt(AdamConfig{.lr = cfg.lr});
    std::mt19937_64 shuffle_rng(cfg.seed);
    std::vector<std::size_t> order(train.records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    int stale_epochs = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        StepLosses epoch_losses;
        int steps = 0;
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), at + cfg.batch_size);
            std::vector<PatchFeatureRecord> batch;
            batch.reserve(end - at);
            for (std::size_t i = at; i < end; ++i) batch.push_back(train.records[order[i]]);
            StepLosses losses = train_step(model, table, corpus, batch, opt, cfg.lambda_local);
            epoch_losses.cls += losses.cls;
            epoch_losses.local += losses.local;
            epoch_losses.total += losses.total;
            ++steps;
        }
        epoch_losses.cls /= steps;
        epoch_losses.local /= steps;
        epoch_losses.total /= steps;

        const double metric = validation_metric(model, table, corpus, train, val, cfg.selection);
        state.history.push_back(
            {epoch, epoch_losses.cls, epoch_losses.local, epoch_losses.total, metric});
        state.epochs_run = epoch;
        if (log.is_open()) {
            log << json{{"epoch", epoch},
                        {"loss_cls", epoch_losses.cls},
                        {"loss_local", epoch_losses.local},
                        {"loss_total", epoch_losses.total},
                        {"val_metric", metric}}
                       .dump()
                << "\n";
            log.flush();
        }

        if (state.best_epoch < 0 || metric > state.best_score) {
            state.best_score = metric;
            state.best_epoch = epoch;
            stale_epochs = 0;
            if (out_dir) {
                state.best_checkpoint = *out_dir / "best.ckpt";
                save_checkpoint(model.named_params(), model.cfg.to_json(),
                                state.best_checkpoint);
            }
        } else {
            ++stale_epochs;
        }
        if (stale_epochs >= cfg.patience) break;
    }
    return state;
}

}  // namespace i2mv
