#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "i2mv/embedder.hpp"
#include "i2mv/io.hpp"
#include "i2mv/tensor.hpp"

namespace i2mv {

struct ModelConfig {
    Index r = 16;              // joint embedding width
    Index summary_tokens = 4;  // T; slot 0 is the CLS summary
    Index text_blocks = 2;
    Index heads = 4;
    Index m_max = 64;
    Index q = 3;  // expected views per class; informational, data may differ
    double lambda_local = 1.0;
    Index d_backbone = 32;
    Index embed_dim = 16;  // word-vector width e
    double ln_eps = 1e-5;
    std::uint64_t seed = 7;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

struct LinearLayer {
    Tensor w, b;
};

struct LayerNormLayer {
    Tensor gain, bias;
};

/// Pre-norm encoder block: x += MHA(LN(x)); x += MLP(LN(x)). The MLP widens
/// to 4r with ReLU.
struct EncoderBlock {
    LayerNormLayer ln1, ln2;
    LinearLayer wq, wk, wv, wo;
    LinearLayer mlp1, mlp2;
};

struct SvSummaryParams {
    Tensor tokens;  // T x r, learnable summary slots
    Tensor pos;     // m_max x r, learned positions for word tokens only
    std::vector<EncoderBlock> blocks;
};

struct MvSummaryParams {
    Tensor tokens;  // T x r
    EncoderBlock block;
};

struct LocalSearchParams {
    Tensor w_q, w_k, w_v;  // r x r maps, bias-free
    Tensor image_query;    // pooling query, r
    LinearLayer pool_k, pool_v;
    LinearLayer mlp1, mlp2;
    Tensor score_w;  // final linear read-out, r
};

struct ImageEmbedding {
    Tensor cls;      // r
    Tensor patches;  // N x r
};

struct ViewSummary {
    Tensor cls;    // r, summary slot 0
    Tensor local;  // (T-1) x r, slots 1..T-1
};

struct ClassEmbeddingBundle {
    Tensor cls;  // r, mean of per-view CLS summaries
    Tensor mv;   // T x r, multi-view local summary
};

struct Model {
    ModelConfig cfg;
    ProjectionMlp image_proj;  // d_backbone -> r
    TextProjector text_proj;   // embed_dim -> r
    SvSummaryParams sv;
    MvSummaryParams mv;
    LocalSearchParams local;

    explicit Model(ModelConfig config);
    static Model from_checkpoint(const Checkpoint& ckpt);

    std::vector<std::pair<std::string, Tensor>> named_params() const;
    std::vector<Tensor> params() const;

    ImageEmbedding project_image(const PatchFeatureRecord& rec) const;
    EncodedView encode(const std::string& text, const EmbeddingTable& table,
                       const std::string& context = {}) const;
    ViewSummary sv_summary(const EncodedView& view) const;
    Tensor mv_summary(std::span<const ViewSummary> summaries) const;
    ClassEmbeddingBundle class_embeddings(const ClassViews& cls, const EmbeddingTable& table) const;

    Tensor score_global(const ImageEmbedding& img, const ClassEmbeddingBundle& cls) const;
    /// Cross-modal query search against the class's T multi-view tokens.
    /// `text_tokens_seen` reports how many text-side tokens entered the
    /// attention, which stays T regardless of view length.
    Tensor score_local(const ImageEmbedding& img, const ClassEmbeddingBundle& cls,
                       Index* text_tokens_seen = nullptr) const;

    Tensor encoder_block_forward(const EncoderBlock& block, const Tensor& x) const;
};

enum class EvalMode { zsl, gzsl };

struct ClassBundle {
    std::string name;
    Split split = Split::seen;
    ClassEmbeddingBundle emb;
};

/// Builds bundles for the given corpus indices, in corpus order.
std::vector<ClassBundle> compute_bundles(const Model& model, const ViewCorpus& corpus,
                                         const EmbeddingTable& table,
                                         std::span<const std::size_t> class_indices);

/// Argmax of the global score over the mode's candidate set; in gzsl mode
/// `gamma` is added to every unseen class's score. Ties keep the first
/// candidate in corpus order. Returns an index into `bundles`.
std::size_t infer(const Model& model, const ImageEmbedding& img,
                  std::span<const ClassBundle> bundles, EvalMode mode, double gamma = 0.0);

}  // namespace i2mv
