#pragma once

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <span>

#include "i2mv/model.hpp"

namespace i2mv {

struct TrainConfig {
    double lr = 1e-3;
    int epochs = 200;
    int batch_size = 32;
    double lambda_local = 1.0;
    std::uint64_t seed = 7;
    int patience = 50;               // 0 stops right after the first epoch
    std::string selection = "zsl_t1";  // or "gzsl_h", both measured on the val split

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochStats {
    int epoch = 0;
    double loss_cls = 0.0;
    double loss_local = 0.0;
    double loss_total = 0.0;
    double val_metric = 0.0;
};

struct TrainState {
    int epochs_run = 0;
    double best_score = 0.0;
    int best_epoch = -1;
    std::filesystem::path best_checkpoint;
    std::vector<EpochStats> history;
};

struct StepLosses {
    double cls = 0.0;
    double local = 0.0;
    double total = 0.0;
};

/// One optimization step over a batch of seen-class images. Class bundles for
/// every seen class are rebuilt on the step's tape so the softmax denominators
/// of both losses carry gradients into the text tower.
StepLosses train_step(Model& model, const EmbeddingTable& table, const ViewCorpus& corpus,
                      std::span<const PatchFeatureRecord> batch, AdamState& opt,
                      double lambda_local);

/// Epoch loop with seeded shuffling, per-epoch validation, best-checkpoint
/// saving and patience-based early stop. Writes best.ckpt and train_log.jsonl
/// under out_dir when given.
TrainState fit(Model& model, const EmbeddingTable& table, const ViewCorpus& corpus,
               const FeatureFile& train, const FeatureFile& val, const TrainConfig& cfg,
               const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace i2mv
