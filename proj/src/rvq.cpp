#include "omni/rvq.hpp"

#include <cmath>
#include <stdexcept>

namespace omni {

namespace {
constexpr double kCountEps = 1e-5;
}

RvqStack::RvqStack(const RvqConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng.fork(0x5271)) {
    if (cfg.layers == 0 || cfg.entries < 2 || cfg.dim == 0)
        throw std::runtime_error("rvq: need at least 1 layer, 2 entries, dim > 0");
    const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    vectors_.resize(cfg.layers);
    ema_counts_.resize(cfg.layers);
    ema_sums_.resize(cfg.layers);
    unused_streak_.resize(cfg.layers);
    for (size_t l = 0; l < cfg.layers; ++l) {
        vectors_[l].assign(cfg.entries * cfg.dim, 0.0);
        ema_counts_[l].assign(cfg.entries, 0.0);
        ema_sums_[l].assign(cfg.entries * cfg.dim, 0.0);
        unused_streak_[l].assign(cfg.entries, 0);
        for (size_t k = 1; k < cfg.entries; ++k)
            for (size_t d = 0; d < cfg.dim; ++d)
                vectors_[l][k * cfg.dim + d] = rng_.normal() * stddev;
    }
}

size_t RvqStack::nearest(size_t layer, const std::vector<double>& r) const {
    const std::vector<double>& v = vectors_[layer];
    size_t best = 0;
    double best_d2 = 1e300;
    for (size_t k = 0; k < cfg_.entries; ++k) {
        double d2 = 0.0;
        for (size_t d = 0; d < cfg_.dim; ++d) {
            const double diff = r[d] - v[k * cfg_.dim + d];
            d2 += diff * diff;
        }
        if (d2 < best_d2) {
            best_d2 = d2;
            best = k;
        }
    }
    return best;
}

QuantizeResult RvqStack::quantize(const std::vector<double>& x) const {
    if (x.size() != cfg_.dim)
        throw std::runtime_error("rvq: input dimension " + std::to_string(x.size()) +
                                 " does not match codebook dimension " + std::to_string(cfg_.dim));
    QuantizeResult out;
    out.frame.codes.resize(cfg_.layers);
    out.quantized.assign(cfg_.dim, 0.0);
    out.residual_norms.resize(cfg_.layers);

    std::vector<double> r = x;
    for (size_t l = 0; l < cfg_.layers; ++l) {
        const size_t k = nearest(l, r);
        out.frame.codes[l] = static_cast<uint16_t>(k);
        double norm2 = 0.0;
        for (size_t d = 0; d < cfg_.dim; ++d) {
            const double e = vectors_[l][k * cfg_.dim + d];
            out.quantized[d] += e;
            r[d] -= e;
            norm2 += r[d] * r[d];
        }
        out.residual_norms[l] = std::sqrt(norm2);
    }
    return out;
}

std::vector<double> RvqStack::dequantize(const CodeFrame& cf) const {
    if (cf.codes.size() != cfg_.layers)
        throw std::runtime_error("rvq: code frame has " + std::to_string(cf.codes.size()) +
                                 " layers, stack has " + std::to_string(cfg_.layers));
    std::vector<double> out(cfg_.dim, 0.0);
    for (size_t l = 0; l < cfg_.layers; ++l) {
        const size_t k = cf.codes[l];
        if (k >= cfg_.entries)
            throw std::runtime_error("rvq: code " + std::to_string(k) + " out of range for " +
                                     std::to_string(cfg_.entries) + " entries");
        for (size_t d = 0; d < cfg_.dim; ++d) out[d] += vectors_[l][k * cfg_.dim + d];
    }
    return out;
}

std::vector<CodeFrame> RvqStack::encode_rows(const Tensor& x) const {
    if (x.ndim() != 2 || x.cols() != cfg_.dim)
        throw std::runtime_error("rvq: expected [T, " + std::to_string(cfg_.dim) + "] input, got " +
                                 shape_str(x.shape()));
    std::vector<CodeFrame> out;
    out.reserve(x.rows());
    std::vector<double> row(cfg_.dim);
    for (size_t t = 0; t < x.rows(); ++t) {
        for (size_t d = 0; d < cfg_.dim; ++d) row[d] = x.at(t * cfg_.dim + d);
        out.push_back(quantize(row).frame);
    }
    return out;
}

Tensor RvqStack::decode_rows(const std::vector<CodeFrame>& frames) const {
    if (frames.empty()) throw std::runtime_error("rvq: no frames to decode");
    std::vector<double> data;
    data.reserve(frames.size() * cfg_.dim);
    for (const CodeFrame& cf : frames) {
        const std::vector<double> v = dequantize(cf);
        data.insert(data.end(), v.begin(), v.end());
    }
    return Tensor::from_data({frames.size(), cfg_.dim}, std::move(data));
}

Tensor RvqStack::quantize_st(const Tensor& x) const {
    if (x.ndim() != 2 || x.cols() != cfg_.dim)
        throw std::runtime_error("rvq: expected [T, " + std::to_string(cfg_.dim) + "] input, got " +
                                 shape_str(x.shape()));
    std::vector<double> values;
    values.reserve(x.size());
    std::vector<double> row(cfg_.dim);
    for (size_t t = 0; t < x.rows(); ++t) {
        for (size_t d = 0; d < cfg_.dim; ++d) row[d] = x.at(t * cfg_.dim + d);
        const QuantizeResult q = quantize(row);
        values.insert(values.end(), q.quantized.begin(), q.quantized.end());
    }
    return straight_through(x, values);
}

Tensor RvqStack::commitment_loss(const Tensor& x) const {
    Tensor target = detach(quantize_st(x));
    return mse_loss(x, target);
}

void RvqStack::ema_update(const std::vector<std::vector<double>>& batch, double decay) {
    if (batch.empty()) throw std::runtime_error("rvq: ema_update on empty batch");
    if (!(decay > 0.0 && decay < 1.0))
        throw std::runtime_error("rvq: decay must lie strictly inside (0,1), got " +
                                 std::to_string(decay));
    const size_t K = cfg_.entries, D = cfg_.dim;

    // Snapshot pass: residual paths and assignments against the
    // pre-update stack.
    std::vector<std::vector<double>> batch_counts(cfg_.layers,
                                                  std::vector<double>(K, 0.0));
    std::vector<std::vector<double>> batch_sums(cfg_.layers,
                                                std::vector<double>(K * D, 0.0));
    std::vector<std::vector<std::vector<double>>> residuals(cfg_.layers);
    for (const std::vector<double>& x : batch) {
        if (x.size() != D) throw std::runtime_error("rvq: batch vector dimension mismatch");
        std::vector<double> r = x;
        for (size_t l = 0; l < cfg_.layers; ++l) {
            residuals[l].push_back(r);
            const size_t k = nearest(l, r);
            batch_counts[l][k] += 1.0;
            for (size_t d = 0; d < D; ++d) {
                batch_sums[l][k * D + d] += r[d];
                r[d] -= vectors_[l][k * D + d];
            }
        }
    }

    for (size_t l = 0; l < cfg_.layers; ++l) {
        for (size_t k = 1; k < K; ++k) {
            ema_counts_[l][k] = decay * ema_counts_[l][k] + (1.0 - decay) * batch_counts[l][k];
            for (size_t d = 0; d < D; ++d)
                ema_sums_[l][k * D + d] =
                    decay * ema_sums_[l][k * D + d] + (1.0 - decay) * batch_sums[l][k * D + d];

            if (batch_counts[l][k] > 0.0)
                unused_streak_[l][k] = 0;
            else
                ++unused_streak_[l][k];

            if (unused_streak_[l][k] >= cfg_.restart_after) {
                const std::vector<double>& seed =
                    residuals[l][rng_.below(residuals[l].size())];
                for (size_t d = 0; d < D; ++d) {
                    vectors_[l][k * D + d] = seed[d];
                    ema_sums_[l][k * D + d] = seed[d];
                }
                ema_counts_[l][k] = 1.0;
                unused_streak_[l][k] = 0;
            } else if (ema_counts_[l][k] > kCountEps) {
                for (size_t d = 0; d < D; ++d)
                    vectors_[l][k * D + d] =
                        ema_sums_[l][k * D + d] / std::max(ema_counts_[l][k], kCountEps);
            }
        }
    }
}

void RvqStack::ema_update(const Tensor& batch, double decay) {
    if (batch.ndim() != 2 || batch.cols() != cfg_.dim)
        throw std::runtime_error("rvq: expected [T, " + std::to_string(cfg_.dim) +
                                 "] batch, got " + shape_str(batch.shape()));
    std::vector<std::vector<double>> rows(batch.rows(), std::vector<double>(cfg_.dim));
    for (size_t t = 0; t < batch.rows(); ++t)
        for (size_t d = 0; d < cfg_.dim; ++d) rows[t][d] = batch.at(t * cfg_.dim + d);
    ema_update(rows, decay);
}

std::vector<RvqStack::LayerUsage> RvqStack::usage_stats(
    const std::vector<CodeFrame>& history) const {
    if (history.empty()) throw std::runtime_error("rvq: usage_stats on empty history");
    std::vector<LayerUsage> out(cfg_.layers);
    std::vector<double> counts(cfg_.entries);
    for (size_t l = 0; l < cfg_.layers; ++l) {
        std::fill(counts.begin(), counts.end(), 0.0);
        for (const CodeFrame& cf : history) {
            if (cf.codes.size() != cfg_.layers)
                throw std::runtime_error("rvq: history frame depth mismatch");
            counts[cf.codes[l]] += 1.0;
        }
        const double total = static_cast<double>(history.size());
        double h = 0.0;
        for (double c : counts) {
            if (c <= 0.0) continue;
            const double p = c / total;
            h -= p * std::log(p);
        }
        out[l].entropy = h;
        out[l].perplexity = std::exp(h);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> RvqStack::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t l = 0; l < cfg_.layers; ++l)
        out.emplace_back("rvq.layer" + std::to_string(l) + ".vectors",
                         Tensor::from_data({cfg_.entries, cfg_.dim}, vectors_[l]));
    return out;
}

void RvqStack::load_tensors(const std::vector<std::pair<std::string, Tensor>>& named) {
    for (size_t l = 0; l < cfg_.layers; ++l) {
        const std::string want = "rvq.layer" + std::to_string(l) + ".vectors";
        bool found = false;
        for (const auto& [name, t] : named) {
            if (name != want) continue;
            if (t.shape() != std::vector<size_t>{cfg_.entries, cfg_.dim})
                throw std::runtime_error("rvq: " + want + " has shape " + shape_str(t.shape()) +
                                         ", expected [" + std::to_string(cfg_.entries) + ", " +
                                         std::to_string(cfg_.dim) + "]");
            vectors_[l] = t.data();
            found = true;
            break;
        }
        if (!found) throw std::runtime_error("rvq: missing tensor " + want);
    }
    // Pinned entries stay zero regardless of what a checkpoint claims.
    for (size_t l = 0; l < cfg_.layers; ++l)
        for (size_t d = 0; d < cfg_.dim; ++d) vectors_[l][d] = 0.0;
}

void RvqStack::set_entry_for_test(size_t layer, size_t k, const std::vector<double>& v) {
    if (k == 0) throw std::runtime_error("rvq: entry 0 is pinned");
    if (v.size() != cfg_.dim) throw std::runtime_error("rvq: entry dimension mismatch");
    for (size_t d = 0; d < cfg_.dim; ++d) vectors_[layer][k * cfg_.dim + d] = v[d];
}

} // namespace omni
