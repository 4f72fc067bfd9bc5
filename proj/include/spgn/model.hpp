#pragma once

// Encoder + graph assembled into the episodic classifier, with the reduced
// variants used by the ablation study.

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "spgn/data.hpp"
#include "spgn/encoder.hpp"
#include "spgn/graph.hpp"
#include "spgn/spectral.hpp"

namespace spgn {

/// Which of the two graph stages are active.
///   baseline: whole-series embeddings, softmax over negative distances to
///             class prototypes (weighted nearest neighbour)
///   sra:      spectrum-wise relations, predictions from the initial edges
///   sp:       propagation over a fused (temporal + spectral) feature with a
///             single relation per pair
///   full:     spectrum-wise relations and propagation
enum class Variant { baseline, sra, sp, full };

inline Variant variant_from_flags(bool use_sra, bool use_sp) {
    if (use_sra && use_sp) return Variant::full;
    if (use_sra) return Variant::sra;
    if (use_sp) return Variant::sp;
    return Variant::baseline;
}

inline std::string_view to_string(Variant v) {
    switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::sra: return "sra";
    case Variant::sp: return "sp";
    case Variant::full: return "full";
    }
    return "?";
}

struct ModelConfig {
    encoder::EncoderConfig encoder;
    graph::GraphConfig graph;
    std::size_t bands = 8;
    spectral::SplitStrategy strategy = spectral::SplitStrategy::equal_power;
    Variant variant = Variant::full;
    bool shared_encoder = true;
    /// Baseline head: softmax over negative distances to class prototypes,
    /// or (false) the graph head with one whole-series stream and no
    /// propagation.
    bool prototype_baseline = true;

    /// Streams fed to the encoder: bands + original, or the original alone.
    std::size_t stream_count() const { return variant == Variant::baseline ? 1 : bands + 1; }
};

/// Episode turned into network inputs: the stream batch is stream-major,
/// (streams * n, 1, L) with row k*n + i holding stream k of instance i.
template <class T>
struct EpisodeInput {
    ad::Tensor<T> streams;
    std::size_t stream_count = 0;
    graph::GraphLabels labels;
    std::vector<int> query_labels;
};

/// Expands every instance into `bands` band streams plus the original
/// (or the original only when bands == 0).
template <class T>
EpisodeInput<T> prepare_episode(const Episode& ep, std::size_t bands, spectral::SplitStrategy strategy) {
    const std::size_t n = ep.instance_count();
    if (n == 0) throw EpisodeError("episode has no instances");
    const std::size_t L = ep.instance(0).size();
    const std::size_t S = bands + 1;
    EpisodeInput<T> in;
    in.stream_count = S;
    in.streams = ad::Tensor<T>({S * n, 1, L});
    for (std::size_t i = 0; i < n; ++i) {
        const auto& ts = ep.instance(i);
        if (ts.size() != L) throw ShapeError("episode mixes series lengths");
        if (bands == 0) {
            for (std::size_t t = 0; t < L; ++t) in.streams.data[i * L + t] = static_cast<T>(ts.values[t]);
            continue;
        }
        const auto ex = spectral::expand(ts, bands, strategy);
        for (std::size_t k = 0; k < S; ++k) {
            const auto& st = ex.stream(k);
            T* dst = in.streams.data.data() + (k * n + i) * L;
            for (std::size_t t = 0; t < L; ++t) dst[t] = static_cast<T>(st[t]);
        }
    }
    in.labels.support_labels = ep.support_labels;
    in.labels.query_count = ep.query.size();
    in.labels.way = ep.way;
    in.query_labels = ep.query_labels;
    return in;
}

template <class T>
struct ModelOutput {
    std::vector<ad::Var<T>> edges;        // E^0 .. E^T (empty for the baseline)
    std::vector<ad::Var<T>> layer_probs;  // predictions entering the loss
    ad::Var<T> final_probs;               // predictions used for evaluation
    ad::Var<T> embeddings;                // V^0, (streams, n, D)
};

template <class T>
class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(std::make_unique<nn::ParamSet<T>>()) {
        std::mt19937_64 rng(seed);
        const std::size_t S = cfg.stream_count();
        const std::size_t encoders = cfg.shared_encoder ? 1 : S;
        auto enc_cfg = cfg.encoder;
        enc_cfg.embedding = cfg.graph.embedding;
        for (std::size_t k = 0; k < encoders; ++k)
            encoders_.emplace_back(*params_, encoders == 1 ? "encoder" : "encoder" + std::to_string(k), enc_cfg, rng);
        if (cfg.variant == Variant::sp)
            fuse_ = nn::Linear<T>(*params_, "fuse", S * cfg.graph.embedding, cfg.graph.embedding, rng);
        if (cfg.variant != Variant::baseline || !cfg.prototype_baseline) {
            auto gcfg = cfg.graph;
            if (cfg.variant == Variant::sra || cfg.variant == Variant::baseline) gcfg.layers = 0;
            graph_.emplace(*params_, "graph", gcfg, cfg.variant == Variant::sp ? 1 : S, rng);
        }
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    nn::ParamSet<T>& params() noexcept { return *params_; }
    const nn::ParamSet<T>& params() const noexcept { return *params_; }
    const encoder::Encoder<T>& encoder(std::size_t k = 0) const { return encoders_.at(k); }
    const graph::SpectralGraph<T>& graph() const { return *graph_; }

    EpisodeInput<T> prepare(const Episode& ep) const {
        return prepare_episode<T>(ep, cfg_.variant == Variant::baseline ? 0 : cfg_.bands, cfg_.strategy);
    }

    /// Stream embeddings V^0: (streams, n, D).
    ad::Var<T> embed(ad::Tape<T>& tape, const EpisodeInput<T>& in, ad::Mode mode) const {
        const std::size_t S = in.stream_count, n = in.labels.node_count(), D = cfg_.graph.embedding;
        if (S != cfg_.stream_count())
            throw ShapeError("model expects " + std::to_string(cfg_.stream_count()) + " streams, input has " +
                             std::to_string(S));
        auto x = tape.constant(in.streams);
        if (encoders_.size() == 1) return ad::reshape(encoders_[0](tape, x, mode), ad::Shape{S, n, D});
        std::vector<ad::Var<T>> parts;
        for (std::size_t k = 0; k < S; ++k) parts.push_back(encoders_[k](tape, ad::slice(x, 0, k * n, n), mode));
        return ad::reshape(ad::concat(parts, 0), ad::Shape{S, n, D});
    }

    ModelOutput<T> forward(ad::Tape<T>& tape, const EpisodeInput<T>& in, ad::Mode mode) const {
        ModelOutput<T> out;
        out.embeddings = embed(tape, in, mode);
        const std::size_t n = in.labels.node_count(), D = cfg_.graph.embedding;
        switch (cfg_.variant) {
        case Variant::baseline: {
            if (!cfg_.prototype_baseline)
                return finish(std::move(out), graph_->forward(tape, out.embeddings, in.labels, mode));
            out.final_probs = prototype_probs(tape, ad::reshape(out.embeddings, ad::Shape{n, D}), in.labels);
            out.layer_probs.push_back(out.final_probs);
            return out;
        }
        case Variant::sp: {
            // (S, n, D) -> (n, S*D) -> fused (1, n, D)
            const std::size_t S = in.stream_count;
            std::vector<ad::Var<T>> cols;
            for (std::size_t k = 0; k < S; ++k)
                cols.push_back(ad::reshape(ad::slice(out.embeddings, 0, k, 1), ad::Shape{n, D}));
            auto fused = fuse_(tape, ad::concat(cols, 1));
            auto res = graph_->forward(tape, ad::reshape(fused, ad::Shape{1, n, D}), in.labels, mode);
            return finish(std::move(out), std::move(res));
        }
        case Variant::sra:
        case Variant::full: {
            auto res = graph_->forward(tape, out.embeddings, in.labels, mode);
            return finish(std::move(out), std::move(res));
        }
        }
        return out;
    }

    ad::Var<T> loss(const ModelOutput<T>& out, const EpisodeInput<T>& in) const {
        return graph::loss(out.layer_probs, in.query_labels);
    }

private:
    static ModelOutput<T> finish(ModelOutput<T> out, graph::GraphResult<T> res) {
        out.edges = res.edges;
        if (res.probs.size() == 1) out.layer_probs = res.probs;
        else out.layer_probs.assign(res.probs.begin() + 1, res.probs.end());
        out.final_probs = out.layer_probs.back();
        return out;
    }

    // Softmax over negative Euclidean distances from each query to the mean
    // support embedding of every class.
    static ad::Var<T> prototype_probs(ad::Tape<T>& tape, const ad::Var<T>& V, const graph::GraphLabels& labels) {
        const std::size_t ns = labels.support_count(), nq = labels.query_count, N = labels.way;
        const std::size_t D = V.shape()[1];
        ad::Tensor<T> avg({N, ns});
        std::vector<std::size_t> counts(N, 0);
        for (int c : labels.support_labels) ++counts[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < ns; ++i) {
            const auto c = static_cast<std::size_t>(labels.support_labels[i]);
            avg.data[c * ns + i] = T(1) / static_cast<T>(counts[c]);
        }
        auto protos = ad::matmul(tape.constant(std::move(avg)), ad::slice(V, 0, 0, ns));
        auto q = ad::slice(V, 0, ns, nq);
        auto diff = ad::sub(ad::reshape(q, ad::Shape{nq, 1, D}), ad::reshape(protos, ad::Shape{1, N, D}));
        auto dist = ad::sqrt(ad::sum(ad::square(diff), 2), T(1e-12));
        return ad::softmax(ad::neg(dist), 1);
    }

    ModelConfig cfg_;
    std::unique_ptr<nn::ParamSet<T>> params_;
    std::vector<encoder::Encoder<T>> encoders_;
    nn::Linear<T> fuse_;
    std::optional<graph::SpectralGraph<T>> graph_;
};

} // namespace spgn
