#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bdae/adam.hpp"
#include "bdae/container.hpp"
#include "bdae/graph.hpp"

namespace bdae {

struct AdamSnapshot {
    AdamConfig config;
    uint64_t t = 0;
    std::vector<std::vector<double>> m, v;
};

// Everything needed to rebuild a trained model: architecture, parameters
// (stored 64-bit), batchnorm running stats, optional optimizer state, and
// the seed the run was launched with.
struct CheckpointData {
    uint64_t run_seed = 0;
    std::string model_name;
    Shape input_shape;
    std::vector<LayerSpec> specs;
    std::vector<std::pair<std::string, Tensor<double>>> params;
    std::vector<std::vector<double>> aux;
    std::optional<AdamSnapshot> adam;
};

namespace detail {

inline void write_layer_spec(BinWriter& w, const LayerSpec& s) {
    w.put<uint8_t>(static_cast<uint8_t>(s.kind));
    w.put_str(s.name);
    w.put<uint8_t>(static_cast<uint8_t>(s.act));
    auto put_ivec = [&](const std::vector<int>& v) {
        w.put<uint32_t>(static_cast<uint32_t>(v.size()));
        for (int x : v) w.put<int32_t>(x);
    };
    put_ivec(s.kernel);
    put_ivec(s.stride);
    put_ivec(s.padding);
    w.put<int32_t>(s.in_channels);
    w.put<int32_t>(s.out_channels);
    w.put<int32_t>(s.in_features);
    w.put<int32_t>(s.out_features);
    w.put<int32_t>(s.channels);
    w.put<double>(s.rate);
}

inline LayerSpec read_layer_spec(BinReader& r) {
    LayerSpec s;
    s.kind = static_cast<LayerKind>(r.get<uint8_t>());
    s.name = r.get_str();
    s.act = static_cast<Activation>(r.get<uint8_t>());
    auto get_ivec = [&]() {
        uint32_t n = r.get<uint32_t>();
        std::vector<int> v(n);
        for (uint32_t i = 0; i < n; ++i) v[i] = r.get<int32_t>();
        return v;
    };
    s.kernel = get_ivec();
    s.stride = get_ivec();
    s.padding = get_ivec();
    s.in_channels = r.get<int32_t>();
    s.out_channels = r.get<int32_t>();
    s.in_features = r.get<int32_t>();
    s.out_features = r.get<int32_t>();
    s.channels = r.get<int32_t>();
    s.rate = r.get<double>();
    return s;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, ModelGraph<T>& graph, uint64_t run_seed,
                     Adam<T>* adam = nullptr) {
    BinWriter w(path);
    write_preamble(w, kPayloadCheckpoint);
    w.put<uint64_t>(run_seed);
    w.put_str(graph.name());
    w.put_shape(graph.input_shape());

    auto specs = graph.specs();
    w.put<uint32_t>(static_cast<uint32_t>(specs.size()));
    for (const auto& s : specs) detail::write_layer_spec(w, s);

    auto params = graph.params();
    w.put<uint32_t>(static_cast<uint32_t>(params.size()));
    std::vector<double> buf;
    for (const auto& p : params) {
        w.put_str(p.name);
        w.put_shape(p.value->shape);
        buf.resize(static_cast<size_t>(p.value->numel()));
        for (int64_t i = 0; i < p.value->numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<double>((*p.value)[i]);
        w.put_array(buf.data(), buf.size());
    }

    auto aux = graph.aux_state();
    w.put<uint32_t>(static_cast<uint32_t>(aux.size()));
    for (const auto& a : aux) w.put_f64_vec(a);

    w.put<uint8_t>(adam ? 1 : 0);
    if (adam) {
        w.put<double>(adam->config().lr);
        w.put<double>(adam->config().beta1);
        w.put<double>(adam->config().beta2);
        w.put<double>(adam->config().eps);
        w.put<uint64_t>(adam->t());
        w.put<uint32_t>(static_cast<uint32_t>(adam->first_moments().size()));
        for (const auto& m : adam->first_moments()) w.put_f64_vec(m);
        for (const auto& v : adam->second_moments()) w.put_f64_vec(v);
    }
    w.finish();
}

inline CheckpointData load_checkpoint(const std::string& path) {
    BinReader r(path);
    read_preamble(r, kPayloadCheckpoint);
    CheckpointData c;
    c.run_seed = r.get<uint64_t>();
    c.model_name = r.get_str();
    c.input_shape = r.get_shape();

    uint32_t n_layers = r.get<uint32_t>();
    for (uint32_t i = 0; i < n_layers; ++i) c.specs.push_back(detail::read_layer_spec(r));

    uint32_t n_params = r.get<uint32_t>();
    for (uint32_t i = 0; i < n_params; ++i) {
        std::string name = r.get_str();
        Shape sh = r.get_shape();
        Tensor<double> t(sh);
        r.get_array(t.ptr(), static_cast<size_t>(t.numel()));
        c.params.emplace_back(std::move(name), std::move(t));
    }

    uint32_t n_aux = r.get<uint32_t>();
    for (uint32_t i = 0; i < n_aux; ++i) c.aux.push_back(r.get_f64_vec());

    if (r.get<uint8_t>() != 0) {
        AdamSnapshot a;
        a.config.lr = r.get<double>();
        a.config.beta1 = r.get<double>();
        a.config.beta2 = r.get<double>();
        a.config.eps = r.get<double>();
        a.t = r.get<uint64_t>();
        uint32_t n = r.get<uint32_t>();
        for (uint32_t i = 0; i < n; ++i) a.m.push_back(r.get_f64_vec());
        for (uint32_t i = 0; i < n; ++i) a.v.push_back(r.get_f64_vec());
        c.adam = std::move(a);
    }
    return c;
}

// Rebuilds the graph and restores parameters + running stats.
template <typename T>
ModelGraph<T> graph_from_checkpoint(const CheckpointData& c) {
    ModelGraph<T> g(c.model_name, c.input_shape, c.specs);
    auto params = g.params();
    if (params.size() != c.params.size())
        throw IoError("checkpoint '" + c.model_name + "': parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != c.params[i].first || !same_shape(*params[i].value, c.params[i].second))
            throw IoError("checkpoint: parameter '" + c.params[i].first + "' does not match graph");
        for (int64_t j = 0; j < params[i].value->numel(); ++j)
            (*params[i].value)[j] = static_cast<T>(c.params[i].second[j]);
    }
    g.set_aux_state(c.aux);
    return g;
}

template <typename T>
Adam<T> adam_from_checkpoint(const CheckpointData& c) {
    if (!c.adam) throw IoError("checkpoint has no optimizer state");
    Adam<T> a(c.adam->config);
    a.first_moments() = c.adam->m;
    a.second_moments() = c.adam->v;
    a.set_t(c.adam->t);
    return a;
}

}  // namespace bdae
