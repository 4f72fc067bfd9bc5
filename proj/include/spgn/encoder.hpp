#pragma once

#include <random>
#include <string>
#include <vector>

#include "spgn/errors.hpp"
#include "spgn/nn.hpp"
#include "spgn/series.hpp"

namespace spgn::encoder {

using ad::Mode;
using ad::Tape;
using ad::Tensor;
using ad::Var;

struct EncoderConfig {
    std::vector<std::size_t> widths{16, 32, 64, 128};
    std::size_t kernel = 5;
    std::size_t layers_per_block = 2;
    std::size_t embedding = 128;
};

/// ResNet-1D feature extractor: residual blocks of Conv-BN-ReLU layers, each
/// block followed by 2x mean pooling, then global mean pooling and a linear
/// projection to the embedding.
template <class T>
class Encoder {
public:
    Encoder(nn::ParamSet<T>& ps, const std::string& prefix, const EncoderConfig& cfg, std::mt19937_64& rng)
        : cfg_(cfg) {
        if (cfg.widths.empty() || cfg.layers_per_block == 0 || cfg.kernel == 0)
            throw ContractError("encoder: needs at least one block, one layer per block and a kernel");
        std::size_t in = 1;
        for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
            const std::string name = prefix + ".block" + std::to_string(b);
            Block blk;
            std::size_t c = in;
            for (std::size_t l = 0; l < cfg.layers_per_block; ++l) {
                blk.convs.emplace_back(ps, name + ".conv" + std::to_string(l), c, cfg.widths[b], cfg.kernel, rng);
                blk.norms.emplace_back(ps, name + ".bn" + std::to_string(l), cfg.widths[b]);
                c = cfg.widths[b];
            }
            if (in != cfg.widths[b]) {
                blk.skip = nn::Conv1d<T>(ps, name + ".skip", in, cfg.widths[b], 1, rng);
                blk.has_skip_proj = true;
            }
            blocks_.push_back(std::move(blk));
            in = cfg.widths[b];
        }
        head_ = nn::Linear<T>(ps, prefix + ".head", in, cfg.embedding, rng);
    }

    const EncoderConfig& config() const noexcept { return cfg_; }

    /// x: (B, 1, L) -> (B, embedding).
    Var<T> operator()(Tape<T>& tape, const Var<T>& x, Mode mode) const {
        const auto& s = x.shape();
        if (s.size() != 3 || s[1] != 1)
            throw ShapeError("encode: expected (B, 1, L), got " + ad::shape_str(s));
        if (s[2] < kMinSeriesLength)
            throw ShapeError("encode: stream length " + std::to_string(s[2]) + " < " + std::to_string(kMinSeriesLength));
        Var<T> h = x;
        for (const auto& blk : blocks_) {
            Var<T> y = h;
            for (std::size_t l = 0; l < blk.convs.size(); ++l)
                y = ad::relu(blk.norms[l](tape, blk.convs[l](tape, y), mode));
            const Var<T> skip = blk.has_skip_proj ? blk.skip(tape, h) : h;
            h = ad::avg_pool2(ad::add(y, skip));
        }
        return head_(tape, ad::mean(h, 2));
    }

private:
    struct Block {
        std::vector<nn::Conv1d<T>> convs;
        std::vector<nn::BatchNorm<T>> norms;
        nn::Conv1d<T> skip;
        bool has_skip_proj = false;
    };

    EncoderConfig cfg_;
    std::vector<Block> blocks_;
    nn::Linear<T> head_;
};

/// Encodes a single stream in eval mode.
template <class T>
std::vector<T> encode(const Encoder<T>& enc, std::span<const double> stream) {
    Tape<T> tape;
    Tensor<T> in({1, 1, stream.size()});
    for (std::size_t i = 0; i < stream.size(); ++i) in.data[i] = static_cast<T>(stream[i]);
    auto out = enc(tape, tape.constant(std::move(in)), Mode::eval);
    const auto& d = out.value().data;
    return std::vector<T>(d.begin(), d.end());
}

} // namespace spgn::encoder
