#include "i2mv/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace i2mv {

namespace {

using nlohmann::json;

Tensor uniform_weight(Index in, Index out, std::mt19937_64& rng) {
    Tensor w = Tensor::zeros({in, out}, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < w.numel(); ++i) w.values()(i) = u(rng);
    return w;
}

Tensor uniform_vector(Index n, Index fan_in, std::mt19937_64& rng) {
    Tensor w = Tensor::zeros({n}, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < w.numel(); ++i) w.values()(i) = u(rng);
    return w;
}

Tensor token_init(std::vector<Index> shape, std::mt19937_64& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    std::normal_distribution<double> n(0.0, 0.02);
    for (Index i = 0; i < t.numel(); ++i) t.values()(i) = n(rng);
    return t;
}

LinearLayer make_linear(Index in, Index out, std::mt19937_64& rng) {
    return {uniform_weight(in, out, rng), Tensor::zeros({out}, true)};
}

LayerNormLayer make_layer_norm(Index width) {
    return {Tensor::constant({width}, 1.0, true), Tensor::zeros({width}, true)};
}

EncoderBlock make_encoder_block(Index r, std::mt19937_64& rng) {
    EncoderBlock b;
    b.ln1 = make_layer_norm(r);
    b.ln2 = make_layer_norm(r);
    b.wq = make_linear(r, r, rng);
    b.wk = make_linear(r, r, rng);
    b.wv = make_linear(r, r, rng);
    b.wo = make_linear(r, r, rng);
    b.mlp1 = make_linear(r, 4 * r, rng);
    b.mlp2 = make_linear(4 * r, r, rng);
    return b;
}

Tensor affine(const Tensor& x, const LinearLayer& l) { return add_rowvec(matmul(x, l.w), l.b); }

void visit_block(const std::string& prefix, const EncoderBlock& b,
                 const std::function<void(const std::string&, const Tensor&)>& fn) {
    fn(prefix + ".ln1.gain", b.ln1.gain);
    fn(prefix + ".ln1.bias", b.ln1.bias);
    fn(prefix + ".wq.w", b.wq.w);
    fn(prefix + ".wq.b", b.wq.b);
    fn(prefix + ".wk.w", b.wk.w);
    fn(prefix + ".wk.b", b.wk.b);
    fn(prefix + ".wv.w", b.wv.w);
    fn(prefix + ".wv.b", b.wv.b);
    fn(prefix + ".wo.w", b.wo.w);
    fn(prefix + ".wo.b", b.wo.b);
    fn(prefix + ".ln2.gain", b.ln2.gain);
    fn(prefix + ".ln2.bias", b.ln2.bias);
    fn(prefix + ".mlp1.w", b.mlp1.w);
    fn(prefix + ".mlp1.b", b.mlp1.b);
    fn(prefix + ".mlp2.w", b.mlp2.w);
    fn(prefix + ".mlp2.b", b.mlp2.b);
}

void visit_projection(const std::string& prefix, const ProjectionMlp& p,
                      const std::function<void(const std::string&, const Tensor&)>& fn) {
    fn(prefix + ".w1", p.w1);
    fn(prefix + ".b1", p.b1);
    fn(prefix + ".w2", p.w2);
    fn(prefix + ".b2", p.b2);
    fn(prefix + ".ln.gain", p.ln_gain);
    fn(prefix + ".ln.bias", p.ln_bias);
}

void visit_params(const Model& m,
                  const std::function<void(const std::string&, const Tensor&)>& fn) {
    visit_projection("image_proj", m.image_proj, fn);
    visit_projection("text_proj", m.text_proj, fn);
    fn("sv.tokens", m.sv.tokens);
    fn("sv.pos", m.sv.pos);
    for (std::size_t i = 0; i < m.sv.blocks.size(); ++i) {
        visit_block("sv.block" + std::to_string(i), m.sv.blocks[i], fn);
    }
    fn("mv.tokens", m.mv.tokens);
    visit_block("mv.block", m.mv.block, fn);
    fn("local.wq", m.local.w_q);
    fn("local.wk", m.local.w_k);
    fn("local.wv", m.local.w_v);
    fn("local.image_query", m.local.image_query);
    fn("local.pool_k.w", m.local.pool_k.w);
    fn("local.pool_k.b", m.local.pool_k.b);
    fn("local.pool_v.w", m.local.pool_v.w);
    fn("local.pool_v.b", m.local.pool_v.b);
    fn("local.mlp1.w", m.local.mlp1.w);
    fn("local.mlp1.b", m.local.mlp1.b);
    fn("local.mlp2.w", m.local.mlp2.w);
    fn("local.mlp2.b", m.local.mlp2.b);
    fn("local.score_w", m.local.score_w);
}

}  // namespace

void ModelConfig::validate() const {
    if (r < 1) throw ConfigError("model config: r must be >= 1");
    if (summary_tokens < 2) {
        throw ConfigError("model config: summary_tokens must be >= 2 (CLS plus locals)");
    }
    if (heads < 1 || r % heads != 0) {
        throw ConfigError("model config: r (" + std::to_string(r) +
                          ") must be divisible by heads (" + std::to_string(heads) + ")");
    }
    if (text_blocks < 1) throw ConfigError("model config: text_blocks must be >= 1");
    if (m_max < 1) throw ConfigError("model config: m_max must be >= 1");
    if (q < 1) throw ConfigError("model config: q must be >= 1");
    if (d_backbone < 1) throw ConfigError("model config: d_backbone must be >= 1");
    if (embed_dim < 1) throw ConfigError("model config: embed_dim must be >= 1");
    if (lambda_local < 0.0) throw ConfigError("model config: lambda_local must be >= 0");
    if (ln_eps <= 0.0) throw ConfigError("model config: ln_eps must be > 0");
}

json ModelConfig::to_json() const {
    return json{{"r", r},
                {"summary_tokens", summary_tokens},
                {"text_blocks", text_blocks},
                {"heads", heads},
                {"m_max", m_max},
                {"q", q},
                {"lambda_local", lambda_local},
                {"d_backbone", d_backbone},
                {"embed_dim", embed_dim},
                {"ln_eps", ln_eps},
                {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig cfg;
    const json defaults = cfg.to_json();
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!defaults.contains(key)) throw ConfigError("model config: unknown key '" + key + "'");
        (void)value;
    }
    try {
        cfg.r = j.value("r", cfg.r);
        cfg.summary_tokens = j.value("summary_tokens", cfg.summary_tokens);
        cfg.text_blocks = j.value("text_blocks", cfg.text_blocks);
        cfg.heads = j.value("heads", cfg.heads);
        cfg.m_max = j.value("m_max", cfg.m_max);
        cfg.q = j.value("q", cfg.q);
        cfg.lambda_local = j.value("lambda_local", cfg.lambda_local);
        cfg.d_backbone = j.value("d_backbone", cfg.d_backbone);
        cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
        cfg.ln_eps = j.value("ln_eps", cfg.ln_eps);
        cfg.seed = j.value("seed", cfg.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

Model::Model(ModelConfig config) : cfg(config) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const Index r = cfg.r;

    image_proj = make_projection_mlp(cfg.d_backbone, r, r, rng, cfg.ln_eps);
    text_proj = make_projection_mlp(cfg.embed_dim, r, r, rng, cfg.ln_eps);

    sv.tokens = token_init({cfg.summary_tokens, r}, rng);
    sv.pos = token_init({cfg.m_max, r}, rng);
    for (Index b = 0; b < cfg.text_blocks; ++b) sv.blocks.push_back(make_encoder_block(r, rng));

    mv.tokens = token_init({cfg.summary_tokens, r}, rng);
    mv.block = make_encoder_block(r, rng);

    local.w_q = uniform_weight(r, r, rng);
    local.w_k = uniform_weight(r, r, rng);
    local.w_v = uniform_weight(r, r, rng);
    local.image_query = token_init({r}, rng);
    local.pool_k = make_linear(r, r, rng);
    local.pool_v = make_linear(r, r, rng);
    local.mlp1 = make_linear(r, r, rng);
    local.mlp2 = make_linear(r, r, rng);
    local.score_w = uniform_vector(r, r, rng);
}

Model Model::from_checkpoint(const Checkpoint& ckpt) {
    Model model(ModelConfig::from_json(ckpt.config));
    std::unordered_map<std::string, Tensor> loaded;
    for (const auto& [name, t] : ckpt.tensors) loaded.emplace(name, t);

    std::size_t used = 0;
    visit_params(model, [&](const std::string& name, const Tensor& param) {
        auto it = loaded.find(name);
        if (it == loaded.end()) {
            throw DataError("checkpoint is missing parameter '" + name + "'");
        }
        if (it->second.shape() != param.shape()) {
            throw DataError("checkpoint parameter '" + name + "' has shape " +
                            shape_str(it->second.shape()) + ", model expects " +
                            shape_str(param.shape()));
        }
        const_cast<Tensor&>(param).values() = it->second.values();
        ++used;
    });
    if (used != loaded.size()) {
        throw DataError("checkpoint holds " + std::to_string(loaded.size()) +
                        " tensors, model has " + std::to_string(used));
    }
    return model;
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    visit_params(*this, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
    return out;
}

std::vector<Tensor> Model::params() const {
    std::vector<Tensor> out;
    visit_params(*this, [&](const std::string&, const Tensor& t) { out.push_back(t); });
    return out;
}

ImageEmbedding Model::project_image(const PatchFeatureRecord& rec) const {
    if (rec.features.cols() != cfg.d_backbone || rec.features.rows() < 2) {
        throw ShapeError("project_image: record '" + rec.class_name + "' has shape " +
                         std::to_string(rec.features.rows()) + "x" +
                         std::to_string(rec.features.cols()) + ", config expects cols " +
                         std::to_string(cfg.d_backbone));
    }
    const Index n_rows = rec.features.rows();
    Tensor x = Tensor::zeros({n_rows, cfg.d_backbone});
    x.mat() = rec.features;
    Tensor projected = image_proj.apply(x);
    return {row(projected, 0), rows(projected, 1, n_rows - 1)};
}

EncodedView Model::encode(const std::string& text, const EmbeddingTable& table,
                          const std::string& context) const {
    if (table.dim != cfg.embed_dim) {
        throw ShapeError("encode: table dimension " + std::to_string(table.dim) +
                         " does not match config embed_dim " + std::to_string(cfg.embed_dim));
    }
    return encode_view(text, table, text_proj, cfg.m_max, context);
}

Tensor Model::encoder_block_forward(const EncoderBlock& block, const Tensor& x) const {
    const Index r = cfg.r;
    const Index head_dim = r / cfg.heads;

    Tensor normed = layer_norm(x, block.ln1.gain, block.ln1.bias, cfg.ln_eps);
    Tensor q = affine(normed, block.wq);
    Tensor k = affine(normed, block.wk);
    Tensor v = affine(normed, block.wv);

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(cfg.heads));
    for (Index h = 0; h < cfg.heads; ++h) {
        Tensor qh = cols(q, h * head_dim, head_dim);
        Tensor kh = cols(k, h * head_dim, head_dim);
        Tensor vh = cols(v, h * head_dim, head_dim);
        Tensor logits = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(head_dim)));
        head_outs.push_back(matmul(softmax(logits, 1), vh));
    }
    Tensor attended = cfg.heads == 1 ? head_outs[0] : concat_cols(head_outs);
    Tensor after_attn = add(x, affine(attended, block.wo));

    Tensor normed2 = layer_norm(after_attn, block.ln2.gain, block.ln2.bias, cfg.ln_eps);
    Tensor hidden = relu(affine(normed2, block.mlp1));
    return add(after_attn, affine(hidden, block.mlp2));
}

ViewSummary Model::sv_summary(const EncodedView& view) const {
    const Index m = view.embedded.size(0);
    if (m < 1) throw DataError("sv_summary: empty view");
    if (m > cfg.m_max) {
        throw ShapeError("sv_summary: view length " + std::to_string(m) + " exceeds m_max " +
                         std::to_string(cfg.m_max));
    }
    // Positions attach to word tokens only; summary slots stay position-free.
    Tensor with_pos = add(view.embedded, rows(sv.pos, 0, m));
    std::vector<Tensor> parts{sv.tokens, with_pos};
    Tensor x = concat_rows(parts);
    for (const auto& block : sv.blocks) x = encoder_block_forward(block, x);
    return {row(x, 0), rows(x, 1, cfg.summary_tokens - 1)};
}

Tensor Model::mv_summary(std::span<const ViewSummary> summaries) const {
    if (summaries.empty()) throw ShapeError("mv_summary: no view summaries");
    std::vector<Tensor> parts{mv.tokens};
    for (const auto& s : summaries) {
        if (s.local.size(0) != cfg.summary_tokens - 1 || s.local.size(1) != cfg.r) {
            throw ShapeError("mv_summary: view summary shape " + shape_str(s.local.shape()) +
                             " does not match T-1 x r for T=" +
                             std::to_string(cfg.summary_tokens));
        }
        parts.push_back(s.local);
    }
    Tensor x = concat_rows(parts);
    x = encoder_block_forward(mv.block, x);
    return rows(x, 0, cfg.summary_tokens);
}

ClassEmbeddingBundle Model::class_embeddings(const ClassViews& cls,
                                             const EmbeddingTable& table) const {
    if (cls.views.empty()) throw DataError("class '" + cls.name + "' has no views");
    std::vector<ViewSummary> summaries;
    summaries.reserve(cls.views.size());
    for (const auto& text : cls.views) {
        summaries.push_back(sv_summary(encode(text, table, cls.name)));
    }
    Tensor mean_cls = summaries[0].cls;
    for (std::size_t i = 1; i < summaries.size(); ++i) mean_cls = add(mean_cls, summaries[i].cls);
    mean_cls = scale(mean_cls, 1.0 / static_cast<double>(summaries.size()));
    return {mean_cls, mv_summary(summaries)};
}

Tensor Model::score_global(const ImageEmbedding& img, const ClassEmbeddingBundle& cls) const {
    return dot(img.cls, cls.cls);
}

Tensor Model::score_local(const ImageEmbedding& img, const ClassEmbeddingBundle& cls,
                          Index* text_tokens_seen) const {
    const Index r = cfg.r;
    Tensor q = matmul(img.patches, local.w_q);
    Tensor k = matmul(cls.mv, local.w_k);
    Tensor v = matmul(cls.mv, local.w_v);
    if (text_tokens_seen) *text_tokens_seen = k.size(0);

    Tensor attn = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(r))), 1);
    Tensor mv_patches = matmul(attn, v);  // N x r

    Tensor pool_keys = affine(mv_patches, local.pool_k);
    Tensor pool_vals = affine(mv_patches, local.pool_v);
    Tensor pool_query = reshape(local.image_query, {1, r});
    Tensor pool_attn =
        softmax(scale(matmul(pool_query, transpose(pool_keys)), 1.0 / std::sqrt(double(r))), 1);
    Tensor pooled = matmul(pool_attn, pool_vals);  // 1 x r

    Tensor hidden = relu(affine(pooled, local.mlp1));
    Tensor refined = add(pooled, affine(hidden, local.mlp2));
    return dot(reshape(refined, {r}), local.score_w);
}

std::vector<ClassBundle> compute_bundles(const Model& model, const ViewCorpus& corpus,
                                         const EmbeddingTable& table,
                                         std::span<const std::size_t> class_indices) {
    std::vector<ClassBundle> out;
    out.reserve(class_indices.size());
    for (std::size_t idx : class_indices) {
        const ClassViews& c = corpus.classes.at(idx);
        out.push_back({c.name, c.split, model.class_embeddings(c, table)});
    }
    return out;
}

std::size_t infer(const Model& model, const ImageEmbedding& img,
                  std::span<const ClassBundle> bundles, EvalMode mode, double gamma) {
    bool any = false;
    double best = 0.0;
    std::size_t best_idx = 0;
    for (std::size_t i = 0; i < bundles.size(); ++i) {
        const ClassBundle& b = bundles[i];
        const bool candidate =
            mode == EvalMode::zsl ? b.split == Split::unseen : b.split != Split::val;
        if (!candidate) continue;
        double s = model.score_global(img, b.emb).item();
        if (mode == EvalMode::gzsl && b.split == Split::unseen) s += gamma;
        if (!any || s > best) {
            any = true;
            best = s;
            best_idx = i;
        }
    }
    if (!any) throw std::runtime_error("infer: empty candidate set");
    return best_idx;
}

}  // namespace i2mv
