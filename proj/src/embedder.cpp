#include "i2mv/embedder.hpp"

#include <cctype>

namespace i2mv {

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c) && c < 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Tensor ProjectionMlp::apply(const Tensor& x) const {
    Tensor h = relu(add_rowvec(matmul(x, w1), b1));
    Tensor y = add_rowvec(matmul(h, w2), b2);
    return layer_norm(y, ln_gain, ln_bias, ln_eps);
}

ProjectionMlp make_projection_mlp(Index in_dim, Index hidden, Index out_dim,
                                  std::mt19937_64& rng, double ln_eps) {
    auto uniform_init = [&rng](Index in, Index out) {
        Tensor w = Tensor::zeros({in, out}, true);
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Index i = 0; i < w.numel(); ++i) w.values()(i) = u(rng);
        return w;
    };
    ProjectionMlp mlp;
    mlp.w1 = uniform_init(in_dim, hidden);
    mlp.b1 = Tensor::zeros({hidden}, true);
    mlp.w2 = uniform_init(hidden, out_dim);
    mlp.b2 = Tensor::zeros({out_dim}, true);
    mlp.ln_gain = Tensor::constant({out_dim}, 1.0, true);
    mlp.ln_bias = Tensor::zeros({out_dim}, true);
    mlp.ln_eps = ln_eps;
    return mlp;
}

EncodedView encode_view(const std::string& text, const EmbeddingTable& table,
                        const TextProjector& proj, Index m_max, const std::string& context) {
    if (table.size() == 0) throw DataError("encode_view: empty embedding table");
    if (m_max < 1) throw ConfigError("encode_view: m_max must be >= 1");

    EncodedView view;
    for (auto& tok : tokenize(text)) {
        if (static_cast<Index>(view.tokens.size()) == m_max) break;
        if (table.contains(tok)) view.tokens.push_back(std::move(tok));
    }
    if (view.tokens.empty()) {
        throw DataError("view has no in-vocabulary tokens" +
                        (context.empty() ? std::string{} : " (class '" + context + "')"));
    }

    const Index m = static_cast<Index>(view.tokens.size());
    Tensor raw = Tensor::zeros({m, table.dim});
    for (Index i = 0; i < m; ++i) {
        raw.mat().row(i) = table.vector_of(view.tokens[static_cast<std::size_t>(i)]).transpose();
    }
    view.embedded = proj.apply(raw);
    return view;
}

}  // namespace i2mv
