#include "fpt/model.hpp"

namespace fpt {

// Each stacked layer reads LN(x); the residual variant adds its input back.
Tensor Model::lstm_trunk(Tensor x, const Batch& batch, const ForwardOptions& options) const {
    const std::size_t b = batch.size, l = batch.length, n = spec_.n_dim;
    const bool drop = options.train && spec_.dropout > 0.0f;

    std::vector<std::vector<std::size_t>> step_rows(l, std::vector<std::size_t>(b));
    for (std::size_t t = 0; t < l; ++t) {
        for (std::size_t e = 0; e < b; ++e) {
            step_rows[t][e] = e * l + t;
        }
    }
    // time-major row t*B + e  ->  example-major row e*l + t
    std::vector<std::size_t> to_example_major(b * l);
    for (std::size_t e = 0; e < b; ++e) {
        for (std::size_t t = 0; t < l; ++t) {
            to_example_major[e * l + t] = t * b + e;
        }
    }

    for (const auto& layer : lstm_layers) {
        Tensor pre = linear(layer_norm(x, layer.ln.gamma, layer.ln.beta), layer.w_ih, layer.bias);
        Tensor h = Tensor::zeros({b, n});
        Tensor c = Tensor::zeros({b, n});
        std::vector<Tensor> outputs;
        outputs.reserve(l);
        for (std::size_t t = 0; t < l; ++t) {
            Tensor gates = add(index_rows(pre, step_rows[t]), matmul(h, layer.w_hh));
            Tensor hc = lstm_cell(gates, c);
            h = slice(hc, 1, 0, n);
            c = slice(hc, 1, n, n);
            outputs.push_back(h);
        }
        Tensor seq = index_rows(concat(outputs, 0), to_example_major);
        if (drop) {
            seq = dropout(seq, spec_.dropout, true, *options.rng);
        }
        x = spec_.lstm_residual ? add(x, seq) : seq;
    }
    return x;
}

}  // namespace fpt
