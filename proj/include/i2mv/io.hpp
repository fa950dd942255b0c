#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <unordered_map>
#include <vector>

#include "i2mv/errors.hpp"
#include "i2mv/tensor.hpp"

namespace i2mv {

// ---- word embeddings -------------------------------------------------------

struct EmbeddingTable {
    Index dim = 0;
    std::vector<std::string> tokens;  // insertion order
    std::vector<Eigen::VectorXd> vectors;
    std::unordered_map<std::string, std::size_t> index;

    void add(std::string token, Eigen::VectorXd v);
    bool contains(const std::string& token) const { return index.contains(token); }
    const Eigen::VectorXd& vector_of(const std::string& token) const;
    std::size_t size() const { return tokens.size(); }
};

/// GloVe-style text file: `<token> <f1> ... <fe>` per line. Dimension is
/// inferred from the first line; ragged lines and duplicate tokens reject
/// with the offending line number.
EmbeddingTable load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);

// ---- view corpus -------------------------------------------------------------

enum class Split { seen, val, unseen };

Split parse_split(const std::string& s);
std::string split_name(Split s);

struct ClassViews {
    std::string name;
    Split split = Split::seen;
    std::vector<std::string> views;
    std::vector<std::string> source_tags;  // empty or one tag per view
};

struct ViewCorpus {
    std::vector<ClassViews> classes;  // corpus order; ties at inference break on it

    const ClassViews* find(const std::string& name) const;
    std::vector<std::size_t> indices_of(Split split) const;
    /// Duplicate names, empty views, tag/view length mismatch, and (unless
    /// allowed) ragged per-class view counts all reject.
    void validate(bool allow_ragged_views = false) const;
};

ViewCorpus load_views(const std::filesystem::path& path, bool allow_ragged_views = false);
void save_views(const ViewCorpus& corpus, const std::filesystem::path& path);

// ---- frozen backbone features -------------------------------------------------

struct PatchFeatureRecord {
    std::string class_name;
    Mat features;  // (N+1) x d_backbone; row 0 is the backbone global feature
};

struct FeatureFile {
    Index patches = 0;  // N
    Index dim = 0;      // d_backbone
    std::vector<PatchFeatureRecord> records;
};

/// Binary layout: magic "I2MV", u32 version=1, u32 count, u32 N, u32 d
/// (little-endian), then count*(N+1)*d f32 LE values. Labels come from a
/// sidecar manifest at the same path with extension ".labels", one class
/// name per record per line.
FeatureFile load_features(const std::filesystem::path& path);
void save_features(const FeatureFile& file, const std::filesystem::path& path);
std::filesystem::path labels_path_for(const std::filesystem::path& features_path);

// ---- checkpoints ----------------------------------------------------------------

struct Checkpoint {
    nlohmann::json config;
    std::vector<std::pair<std::string, Tensor>> tensors;  // index order
};

/// Layout: magic "I2MVCKPT", u32 version=1, u32 index length, JSON index
/// {config, tensors: name -> {shape, offset}}, then a raw f64 LE blob.
/// Offsets are byte offsets into the blob. Round trips are bit-exact.
void save_checkpoint(const std::vector<std::pair<std::string, Tensor>>& named_params,
                     const nlohmann::json& config, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- shared JSON helpers ------------------------------------------------------

nlohmann::json load_json_file(const std::filesystem::path& path);
void save_json_file(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace i2mv
