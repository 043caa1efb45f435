#include <cmath>

#include "fpt/model.hpp"

namespace fpt {

namespace {

/// [B*l, n] slice of the fused qkv projection -> [B*H, l, dk].
Tensor split_heads(const Tensor& qkv, std::size_t which, std::size_t batch, std::size_t length, std::size_t heads,
                   std::size_t n) {
    const std::size_t dk = n / heads;
    Tensor part = slice(qkv, 1, which * n, n);
    part = reshape(part, {batch, length, heads, dk});
    part = permute(part, {0, 2, 1, 3});
    return reshape(part, {batch * heads, length, dk});
}

Tensor merge_heads(const Tensor& y, std::size_t batch, std::size_t length, std::size_t heads, std::size_t n) {
    const std::size_t dk = n / heads;
    Tensor t = reshape(y, {batch, heads, length, dk});
    t = permute(t, {0, 2, 1, 3});
    return reshape(t, {batch * length, n});
}

}  // namespace

Tensor Model::transformer_trunk(Tensor x, const Batch& batch, const ForwardOptions& options) const {
    const std::size_t b = batch.size, l = batch.length, n = spec_.n_dim, heads = spec_.n_heads;
    const float temperature = 1.0f / std::sqrt(static_cast<float>(n / heads));
    const bool drop = options.train && spec_.dropout > 0.0f;
    const Mask causal = Mask::causal(l);

    for (std::size_t layer = 0; layer < blocks.size(); ++layer) {
        const auto& blk = blocks[layer];

        Tensor h = layer_norm(x, blk.ln1.gamma, blk.ln1.beta);
        Tensor qkv = linear(h, blk.qkv_w, blk.qkv_b);
        Tensor q = split_heads(qkv, 0, b, l, heads, n);
        Tensor k = split_heads(qkv, 1, b, l, heads, n);
        Tensor v = split_heads(qkv, 2, b, l, heads, n);
        Tensor probs = softmax_rows(scale(bmm(q, k, false, true), temperature), &causal);
        if (options.attention != nullptr) {
            const auto& pd = probs.data();
            for (std::size_t e = 0; e < b; ++e) {
                for (std::size_t hd = 0; hd < heads; ++hd) {
                    const std::size_t off = (e * heads + hd) * l * l;
                    options.attention->push_back(
                        {layer, hd, l, std::vector<float>(pd.begin() + off, pd.begin() + off + l * l)});
                }
            }
        }
        if (drop) {
            probs = dropout(probs, spec_.dropout, true, *options.rng);
        }
        Tensor attn = linear(merge_heads(bmm(probs, v), b, l, heads, n), blk.proj_w, blk.proj_b);
        if (drop) {
            attn = dropout(attn, spec_.dropout, true, *options.rng);
        }
        x = add(x, attn);

        h = layer_norm(x, blk.ln2.gamma, blk.ln2.beta);
        Tensor mlp = linear(gelu(linear(h, blk.fc_w, blk.fc_b)), blk.fc_out_w, blk.fc_out_b);
        if (drop) {
            mlp = dropout(mlp, spec_.dropout, true, *options.rng);
        }
        x = add(x, mlp);
    }
    return x;
}

}  // namespace fpt
