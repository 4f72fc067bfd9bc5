#pragma once

// The spectral propagation graph: spectrum-wise relations between every pair
// of instances, label-masked edges, edge-weighted propagation of per-stream
// node features, and edge-based class prediction.
//
// Node features are laid out stream-major: V has shape (streams, n, D) where
// n counts supports first, then queries.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "spgn/errors.hpp"
#include "spgn/nn.hpp"

namespace spgn::graph {

using ad::Mode;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

struct GraphConfig {
    std::size_t embedding = 128;
    std::size_t relation_hidden = 64;
    std::size_t edge_hidden = 16;
    std::size_t layers = 3;  // T
    bool share_relation_across_streams = true;
};

/// Which instances carry labels: the first `support_labels.size()` nodes are
/// supports, the remaining `query_count` nodes are queries.
struct GraphLabels {
    std::vector<int> support_labels;
    std::size_t query_count = 0;
    std::size_t way = 0;

    std::size_t support_count() const noexcept { return support_labels.size(); }
    std::size_t node_count() const noexcept { return support_labels.size() + query_count; }
};

/// Relation network: squared feature difference -> similarity in (0, 1).
/// Conv-BN-ReLU (D -> hidden), Conv-BN (hidden -> 1), sigmoid; the
/// convolutions act on a length-1 axis and reduce to linear maps.
template <class T>
struct RelationNet {
    nn::Linear<T> fc1, fc2;
    nn::BatchNorm<T> bn1, bn2;

    RelationNet() = default;
    RelationNet(nn::ParamSet<T>& ps, const std::string& name, std::size_t dim, std::size_t hidden, std::mt19937_64& rng)
        : fc1(ps, name + ".fc1", dim, hidden, rng), fc2(ps, name + ".fc2", hidden, 1, rng),
          bn1(ps, name + ".bn1", hidden), bn2(ps, name + ".bn2", 1) {}

    /// (P, D) -> (P, 1)
    Var<T> operator()(Tape<T>& tape, const Var<T>& sqdiff, Mode mode) const {
        auto h = ad::relu(bn1(tape, fc1(tape, sqdiff), mode));
        return ad::sigmoid(bn2(tape, fc2(tape, h), mode));
    }
};

/// Edge combiner: stream relations (P, S) -> one edge weight (P, 1) in (0, 1).
template <class T>
struct EdgeNet {
    nn::Linear<T> fc1, fc2;

    EdgeNet() = default;
    EdgeNet(nn::ParamSet<T>& ps, const std::string& name, std::size_t streams, std::size_t hidden, std::mt19937_64& rng)
        : fc1(ps, name + ".fc1", streams, hidden, rng), fc2(ps, name + ".fc2", hidden, 1, rng) {}

    Var<T> operator()(Tape<T>& tape, const Var<T>& relations) const {
        return ad::sigmoid(fc2(tape, ad::relu(fc1(tape, relations))));
    }
};

/// Node updater: concat(aggregate, self) (R, 2D) -> (R, D), two Conv-BN-ReLU.
template <class T>
struct NodeNet {
    nn::Linear<T> fc1, fc2;
    nn::BatchNorm<T> bn1, bn2;

    NodeNet() = default;
    NodeNet(nn::ParamSet<T>& ps, const std::string& name, std::size_t dim, std::mt19937_64& rng)
        : fc1(ps, name + ".fc1", 2 * dim, dim, rng), fc2(ps, name + ".fc2", dim, dim, rng),
          bn1(ps, name + ".bn1", dim), bn2(ps, name + ".bn2", dim) {}

    Var<T> operator()(Tape<T>& tape, const Var<T>& x, Mode mode) const {
        auto h = ad::relu(bn1(tape, fc1(tape, x), mode));
        return ad::relu(bn2(tape, fc2(tape, h), mode));
    }
};

/// Similarity of two embeddings through a relation network.
template <class T>
Var<T> relation(Tape<T>& tape, const Var<T>& vi, const Var<T>& vj, const RelationNet<T>& rel, Mode mode) {
    if (vi.shape() != vj.shape())
        throw ShapeError("relation: " + ad::shape_str(vi.shape()) + " vs " + ad::shape_str(vj.shape()));
    const Shape row{1, vi.size()};
    auto d = ad::square(ad::sub(ad::reshape(vi, row), ad::reshape(vj, row)));
    return ad::reshape(rel(tape, d, mode), Shape{});
}

/// Relations of every ordered node pair in every stream: V (S, n, D) -> (n*n, S).
/// `rels` holds one shared network or one per stream.
template <class T>
Var<T> pair_relations(Tape<T>& tape, const Var<T>& V, const std::vector<RelationNet<T>>& rels, Mode mode) {
    const auto& s = V.shape();
    if (s.size() != 3) throw ShapeError("pair_relations: expected (S, n, D), got " + ad::shape_str(s));
    const std::size_t S = s[0], n = s[1], D = s[2];
    if (rels.size() != 1 && rels.size() != S)
        throw ShapeError("pair_relations: " + std::to_string(rels.size()) + " relation nets for " + std::to_string(S) +
                         " streams");
    auto diff = ad::sub(ad::reshape(V, Shape{S, n, 1, D}), ad::reshape(V, Shape{S, 1, n, D}));
    auto sq = ad::reshape(ad::square(diff), Shape{S * n * n, D});
    Var<T> r;
    if (rels.size() == 1) {
        r = rels[0](tape, sq, mode);
    } else {
        std::vector<Var<T>> parts;
        for (std::size_t k = 0; k < S; ++k) parts.push_back(rels[k](tape, ad::slice(sq, 0, k * n * n, n * n), mode));
        r = ad::concat(parts, 0);
    }
    return ad::transpose(ad::reshape(r, Shape{S, n * n}));
}

/// Label factor of the initial edges: 1 for same-label supports, 0 for
/// differing-label supports, 0.5 whenever a query is involved, 0 on the
/// diagonal (self edges are added separately).
template <class T>
Tensor<T> edge_label_factor(const GraphLabels& labels) {
    const std::size_t n = labels.node_count(), ns = labels.support_count();
    Tensor<T> f({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            if (i >= ns || j >= ns) f.data[i * n + j] = T(0.5);
            else f.data[i * n + j] = labels.support_labels[i] == labels.support_labels[j] ? T(1) : T(0);
        }
    return f;
}

template <class T>
Tensor<T> identity(std::size_t n) {
    Tensor<T> e({n, n});
    for (std::size_t i = 0; i < n; ++i) e.data[i * n + i] = T(1);
    return e;
}

/// Divides every row by its sum.
template <class T>
Var<T> normalize_rows(const Var<T>& E) {
    return ad::div(E, ad::sum(E, 1, true));
}

/// Initial edges: factor * F_e(relations) off the diagonal, 1 on it, then
/// row-normalized.
template <class T>
Var<T> init_edges(Tape<T>& tape, const Var<T>& V0, const GraphLabels& labels, const std::vector<RelationNet<T>>& rels,
                  const EdgeNet<T>& combiner, Mode mode) {
    const std::size_t n = labels.node_count();
    if (V0.shape().size() != 3 || V0.shape()[1] != n)
        throw ShapeError("init_edges: features " + ad::shape_str(V0.shape()) + " for " + std::to_string(n) + " nodes");
    auto w = ad::reshape(combiner(tape, pair_relations(tape, V0, rels, mode)), Shape{n, n});
    auto raw = ad::add(ad::mul(w, tape.constant(edge_label_factor<T>(labels))), tape.constant(identity<T>(n)));
    return normalize_rows(raw);
}

/// Propagation step: for every stream, aggregate neighbours through E and
/// transform concat(aggregate, self) with the stream-shared node network.
template <class T>
Var<T> update_nodes(Tape<T>& tape, const Var<T>& V, const Var<T>& E, const NodeNet<T>& node_net, Mode mode) {
    const auto& s = V.shape();
    if (s.size() != 3 || E.shape() != Shape{s[1], s[1]})
        throw ShapeError("update_nodes: features " + ad::shape_str(s) + ", edges " + ad::shape_str(E.shape()));
    const std::size_t S = s[0], n = s[1], D = s[2];
    std::vector<Var<T>> agg;
    agg.reserve(S);
    for (std::size_t k = 0; k < S; ++k)
        agg.push_back(ad::matmul(E, ad::reshape(ad::slice(V, 0, k, 1), Shape{n, D})));
    auto stacked = ad::concat(agg, 0);
    auto self = ad::reshape(V, Shape{S * n, D});
    auto out = node_net(tape, ad::concat(std::vector<Var<T>>{stacked, self}, 1), mode);
    return ad::reshape(out, Shape{S, n, D});
}

/// Edge refresh: E_prev * F_e(relations of V), row-normalized. A null
/// combiner stands for F_e == 1.
template <class T>
Var<T> update_edges(Tape<T>& tape, const Var<T>& V, const Var<T>& E_prev, const std::vector<RelationNet<T>>& rels,
                    const EdgeNet<T>* combiner, Mode mode) {
    const std::size_t n = E_prev.shape().at(0);
    if (!combiner) return normalize_rows(ad::mul(E_prev, tape.constant(Tensor<T>({n, n}, T(1)))));
    auto w = ad::reshape((*combiner)(tape, pair_relations(tape, V, rels, mode)), Shape{n, n});
    return normalize_rows(ad::mul(E_prev, w));
}

/// One-hot support labels as an (n, way) matrix with zero rows for queries.
template <class T>
Tensor<T> support_onehot(const GraphLabels& labels) {
    const std::size_t n = labels.node_count();
    Tensor<T> y({n, labels.way});
    for (std::size_t i = 0; i < labels.support_count(); ++i) {
        const int c = labels.support_labels[i];
        if (c < 0 || static_cast<std::size_t>(c) >= labels.way) throw ShapeError("support label outside way");
        y.data[i * labels.way + static_cast<std::size_t>(c)] = T(1);
    }
    return y;
}

/// Class distribution per query: softmax of the query's edge mass to each
/// support class. Returns (query_count, way).
template <class T>
Var<T> predict(Tape<T>& tape, const Var<T>& E, const GraphLabels& labels) {
    const std::size_t n = labels.node_count();
    if (E.shape() != Shape{n, n}) throw ShapeError("predict: edges " + ad::shape_str(E.shape()));
    auto rows = ad::slice(E, 0, labels.support_count(), labels.query_count);
    auto scores = ad::matmul(rows, tape.constant(support_onehot<T>(labels)));
    return ad::softmax(scores, 1);
}

/// Sum over layers of the mean query cross-entropy.
template <class T>
Var<T> loss(const std::vector<Var<T>>& layer_probs, const std::vector<int>& query_labels) {
    if (layer_probs.empty()) throw ContractError("loss: needs at least one layer of predictions");
    Var<T> total = ad::cross_entropy(layer_probs[0], query_labels);
    for (std::size_t l = 1; l < layer_probs.size(); ++l)
        total = ad::add(total, ad::cross_entropy(layer_probs[l], query_labels));
    return total;
}

template <class T>
struct GraphResult {
    std::vector<Var<T>> edges;  // E^0 .. E^T
    std::vector<Var<T>> probs;  // prediction from each E^l
    std::vector<Var<T>> nodes;  // V^0 .. V^T
};

/// Parameters of all graph layers. Layer 0 holds the initial relation and
/// edge networks; layers 1..T add a node network.
template <class T>
class SpectralGraph {
public:
    SpectralGraph(nn::ParamSet<T>& ps, const std::string& prefix, const GraphConfig& cfg, std::size_t streams,
                  std::mt19937_64& rng)
        : cfg_(cfg), streams_(streams) {
        if (streams == 0) throw ContractError("graph: needs at least one stream");
        const std::size_t rel_count = cfg.share_relation_across_streams ? 1 : streams;
        for (std::size_t l = 0; l <= cfg.layers; ++l) {
            const std::string name = prefix + ".layer" + std::to_string(l);
            Layer layer;
            if (l > 0) layer.node = NodeNet<T>(ps, name + ".node", cfg.embedding, rng);
            for (std::size_t r = 0; r < rel_count; ++r)
                layer.rels.emplace_back(ps, name + ".rel" + (rel_count > 1 ? std::to_string(r) : std::string()),
                                        cfg.embedding, cfg.relation_hidden, rng);
            layer.edge = EdgeNet<T>(ps, name + ".edge", streams, cfg.edge_hidden, rng);
            layers_.push_back(std::move(layer));
        }
    }

    const GraphConfig& config() const noexcept { return cfg_; }
    std::size_t streams() const noexcept { return streams_; }

    const std::vector<RelationNet<T>>& relations(std::size_t layer) const { return layers_.at(layer).rels; }
    const EdgeNet<T>& combiner(std::size_t layer) const { return layers_.at(layer).edge; }
    const NodeNet<T>& node_net(std::size_t layer) const { return layers_.at(layer).node; }

    /// Runs relation acquisition on V0, then `layers` rounds of propagation
    /// followed by edge refresh. `depth` overrides the configured layer count
    /// (0 stops after the initial edges).
    GraphResult<T> forward(Tape<T>& tape, const Var<T>& V0, const GraphLabels& labels, Mode mode,
                           std::optional<std::size_t> depth = std::nullopt) const {
        const std::size_t T_layers = depth.value_or(cfg_.layers);
        if (T_layers > cfg_.layers) throw ContractError("graph: depth exceeds configured layers");
        if (V0.shape().size() != 3 || V0.shape()[0] != streams_)
            throw ShapeError("graph: features " + ad::shape_str(V0.shape()) + " for " + std::to_string(streams_) +
                             " streams");
        GraphResult<T> out;
        out.nodes.push_back(V0);
        out.edges.push_back(init_edges(tape, V0, labels, layers_[0].rels, layers_[0].edge, mode));
        out.probs.push_back(predict(tape, out.edges.back(), labels));
        for (std::size_t l = 1; l <= T_layers; ++l) {
            const auto& layer = layers_[l];
            out.nodes.push_back(update_nodes(tape, out.nodes.back(), out.edges.back(), layer.node, mode));
            out.edges.push_back(update_edges(tape, out.nodes.back(), out.edges.back(), layer.rels, &layer.edge, mode));
            out.probs.push_back(predict(tape, out.edges.back(), labels));
        }
        return out;
    }

private:
    struct Layer {
        NodeNet<T> node;
        std::vector<RelationNet<T>> rels;
        EdgeNet<T> edge;
    };

    GraphConfig cfg_;
    std::size_t streams_;
    std::vector<Layer> layers_;
};

} // namespace spgn::graph
