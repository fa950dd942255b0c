#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>

#include "i2mv/io.hpp"

namespace i2mv {

/// Knobs of the synthetic attribute world. Every image patch carries one of
/// its class's attribute directions plus Gaussian noise; every view is a
/// shuffled bag of the class's attribute words padded with filler words.
struct SynthSpec {
    int attribute_words = 12;
    int noise_words = 20;
    int seen_classes = 8;
    int val_classes = 2;
    int unseen_classes = 4;
    int attrs_per_class = 3;
    int images_per_class = 16;       // seen-class training pool, heldout slice included
    int eval_images_per_class = 8;   // val / test-seen / test-unseen images
    int patches = 16;                // N
    int d_backbone = 32;
    int tokens_per_view = 8;
    int views_per_class = 3;         // q
    int embed_dim = 16;              // word-vector width e
    double noise_sigma = 0.1;
    int reveal_attrs = 0;            // 0 = every view names all attrs; k = rotating k-subsets
    double heldout_fraction = 0.2;

    void validate() const;
    nlohmann::json to_json() const;
    static SynthSpec from_json(const nlohmann::json& j);
};

struct SynthBundle {
    EmbeddingTable embeddings;
    ViewCorpus corpus;
    FeatureFile train;        // seen classes, minus the heldout slice
    FeatureFile val;          // val classes
    FeatureFile heldout;      // seen heldout slice + val images (calibration set)
    FeatureFile test_unseen;  // unseen classes
    FeatureFile test_gzsl;    // fresh seen images + the unseen test records
};

/// Pure function of (seed, spec); identical calls yield identical bundles.
SynthBundle synth_gen(std::uint64_t seed, const SynthSpec& spec);

/// Rejects corpora whose val/unseen views use an attribute word that never
/// occurs in any seen-class view.
void check_view_leakage(const ViewCorpus& corpus, const std::vector<std::string>& attribute_words);

/// Writes embeddings.txt, views.json, the five feature files with labels, and
/// a manifest echoing (seed, spec).
void write_synth_bundle(const SynthBundle& bundle, const std::filesystem::path& dir,
                        std::uint64_t seed, const SynthSpec& spec);

}  // namespace i2mv
