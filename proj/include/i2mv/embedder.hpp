#pragma once

#include <random>
#include <string>
#include <vector>

#include "i2mv/io.hpp"
#include "i2mv/tensor.hpp"

namespace i2mv {

/// Lowercases, replaces every non-alphanumeric byte with a space, splits on
/// whitespace. Total function; an empty result is caught downstream.
std::vector<std::string> tokenize(const std::string& text);

/// Two affine layers with ReLU between and a layer norm on the output,
/// applied row-wise. Shared shape for the text and image projectors.
struct ProjectionMlp {
    Tensor w1, b1;
    Tensor w2, b2;
    Tensor ln_gain, ln_bias;
    double ln_eps = 1e-5;

    Tensor apply(const Tensor& x) const;  // rank-2 in, rank-2 out
};

using TextProjector = ProjectionMlp;

ProjectionMlp make_projection_mlp(Index in_dim, Index hidden, Index out_dim,
                                  std::mt19937_64& rng, double ln_eps = 1e-5);

struct EncodedView {
    std::vector<std::string> tokens;  // in-vocabulary, truncated to m_max
    Tensor embedded;                  // M x r
};

/// Tokenizes, drops out-of-vocabulary tokens, truncates to m_max, then
/// projects the looked-up word vectors. `context` names the class in errors.
EncodedView encode_view(const std::string& text, const EmbeddingTable& table,
                        const TextProjector& proj, Index m_max, const std::string& context = {});

}  // namespace i2mv
