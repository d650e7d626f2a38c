#include "omni/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace omni {

Linear Linear::init(size_t in, size_t out, Rng& rng, double weight_scale, bool trainable) {
    Linear l;
    l.w = Tensor::randn({in, out}, rng, weight_scale, trainable);
    l.b = Tensor::zeros({out}, trainable);
    return l;
}

Tensor Linear::forward(const Tensor& x) const { return add_bias_cols(matmul(x, w), b); }

void Linear::collect(std::vector<Tensor>& out) const {
    out.push_back(w);
    out.push_back(b);
}

void Linear::named(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
}

Conv1d Conv1d::init(size_t cin, size_t cout, size_t k, size_t stride, size_t pad, Rng& rng,
                    bool trainable) {
    Conv1d c;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cin * k));
    c.w = Tensor::randn({cout, cin, k}, rng, scale, trainable);
    c.b = Tensor::zeros({cout}, trainable);
    c.stride = stride;
    c.pad = pad;
    return c;
}

Tensor Conv1d::forward(const Tensor& x) const {
    Tensor in = pad == 0 ? x : pad_replicate1d(x, pad, pad);
    return conv1d(in, w, b, stride);
}

void Conv1d::collect(std::vector<Tensor>& out) const {
    out.push_back(w);
    out.push_back(b);
}

void Conv1d::named(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
}

Tensor sinusoidal_pe(size_t len, size_t dim) {
    std::vector<double> data(len * dim, 0.0);
    for (size_t t = 0; t < len; ++t)
        for (size_t i = 0; i < dim / 2; ++i) {
            const double freq =
                std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
            const double ang = static_cast<double>(t) * freq;
            data[t * dim + 2 * i] = std::sin(ang);
            data[t * dim + 2 * i + 1] = std::cos(ang);
        }
    return Tensor::from_data({len, dim}, std::move(data));
}

Transformer::Transformer(const TransformerConfig& cfg, Rng& rng, bool trainable) : cfg_(cfg) {
    if (cfg.dim % cfg.heads != 0)
        throw std::runtime_error("transformer: dim " + std::to_string(cfg.dim) +
                                 " not divisible by " + std::to_string(cfg.heads) + " heads");
    const size_t H = cfg.dim;
    for (size_t l = 0; l < cfg.layers; ++l) {
        Block b;
        b.ln1_g = Tensor::full({H}, 1.0, trainable);
        b.ln1_b = Tensor::zeros({H}, trainable);
        b.q = Linear::init(H, H, rng, cfg.init_scale, trainable);
        b.k = Linear::init(H, H, rng, cfg.init_scale, trainable);
        b.v = Linear::init(H, H, rng, cfg.init_scale, trainable);
        b.o = Linear::init(H, H, rng, cfg.init_scale, trainable);
        b.ln2_g = Tensor::full({H}, 1.0, trainable);
        b.ln2_b = Tensor::zeros({H}, trainable);
        b.fc1 = Linear::init(H, 4 * H, rng, cfg.init_scale, trainable);
        b.fc2 = Linear::init(4 * H, H, rng, cfg.init_scale, trainable);
        blocks_.push_back(std::move(b));
    }
    lnf_g_ = Tensor::full({H}, 1.0, trainable);
    lnf_b_ = Tensor::zeros({H}, trainable);
}

Tensor Transformer::forward(const Tensor& x) const {
    if (x.ndim() != 2 || x.cols() != cfg_.dim)
        throw std::runtime_error("transformer: expected [T, " + std::to_string(cfg_.dim) +
                                 "] input, got " + shape_str(x.shape()));
    const size_t T = x.rows();
    const size_t heads = cfg_.heads;
    const size_t dh = cfg_.dim / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor h = cfg_.add_positions ? add(x, sinusoidal_pe(T, cfg_.dim)) : x;

    Tensor mask;
    if (cfg_.causal) {
        std::vector<double> m(T * T, 0.0);
        for (size_t i = 0; i < T; ++i)
            for (size_t j = i + 1; j < T; ++j) m[i * T + j] = -1e9;
        mask = Tensor::from_data({T, T}, std::move(m));
    }

    for (const Block& b : blocks_) {
        Tensor n = layernorm(h, b.ln1_g, b.ln1_b);
        Tensor q = b.q.forward(n), k = b.k.forward(n), v = b.v.forward(n);
        std::vector<Tensor> ctx;
        for (size_t hd = 0; hd < heads; ++hd) {
            Tensor qh = slice_cols(q, hd * dh, dh);
            Tensor kh = slice_cols(k, hd * dh, dh);
            Tensor vh = slice_cols(v, hd * dh, dh);
            Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
            if (cfg_.causal) scores = add(scores, mask);
            ctx.push_back(matmul(softmax_rows(scores), vh));
        }
        h = add(h, b.o.forward(concat_cols(ctx)));

        Tensor n2 = layernorm(h, b.ln2_g, b.ln2_b);
        h = add(h, b.fc2.forward(gelu(b.fc1.forward(n2))));
    }
    return layernorm(h, lnf_g_, lnf_b_);
}

std::vector<Tensor> Transformer::params() const {
    std::vector<Tensor> out;
    for (const Block& b : blocks_) {
        out.push_back(b.ln1_g);
        out.push_back(b.ln1_b);
        b.q.collect(out);
        b.k.collect(out);
        b.v.collect(out);
        b.o.collect(out);
        out.push_back(b.ln2_g);
        out.push_back(b.ln2_b);
        b.fc1.collect(out);
        b.fc2.collect(out);
    }
    out.push_back(lnf_g_);
    out.push_back(lnf_b_);
    return out;
}

void Transformer::named(const std::string& prefix, NamedTensors& out) const {
    for (size_t l = 0; l < blocks_.size(); ++l) {
        const Block& b = blocks_[l];
        const std::string p = prefix + ".block" + std::to_string(l);
        out.emplace_back(p + ".ln1.g", b.ln1_g);
        out.emplace_back(p + ".ln1.b", b.ln1_b);
        b.q.named(p + ".q", out);
        b.k.named(p + ".k", out);
        b.v.named(p + ".v", out);
        b.o.named(p + ".o", out);
        out.emplace_back(p + ".ln2.g", b.ln2_g);
        out.emplace_back(p + ".ln2.b", b.ln2_b);
        b.fc1.named(p + ".fc1", out);
        b.fc2.named(p + ".fc2", out);
    }
    out.emplace_back(prefix + ".lnf.g", lnf_g_);
    out.emplace_back(prefix + ".lnf.b", lnf_b_);
}

bool Transformer::any_trainable() const {
    for (const Tensor& t : params())
        if (t.requires_grad()) return true;
    return false;
}

void load_named(const NamedTensors& params, const NamedTensors& stored) {
    for (const auto& [name, dst] : params) {
        bool found = false;
        for (const auto& [sname, src] : stored) {
            if (sname != name) continue;
            if (src.shape() != dst.shape())
                throw std::runtime_error("load_named: " + name + " has shape " +
                                         shape_str(src.shape()) + ", expected " +
                                         shape_str(dst.shape()));
            Tensor handle = dst; // shares the node
            handle.data() = src.data();
            found = true;
            break;
        }
        if (!found) throw std::runtime_error("load_named: missing tensor " + name);
    }
}

} // namespace omni
