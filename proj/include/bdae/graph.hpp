#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bdae/layers.hpp"

namespace bdae {

// Snapshot of everything a graph needs to reproduce an epoch's state:
// parameter tensors plus non-trainable layer state (batchnorm running stats).
template <typename T>
struct ParamSnapshot {
    std::vector<std::vector<T>> params;
    std::vector<std::vector<double>> aux;
};

// A fixed sequential stack of layers. Shapes are threaded at build time, so
// an invalid architecture fails on construction naming the offending layer.
template <typename T>
class ModelGraph {
public:
    ModelGraph(std::string name, Shape input_shape, std::vector<LayerSpec> specs)
        : name_(std::move(name)), input_shape_(std::move(input_shape)) {
        if (input_shape_.empty()) throw ValueError("model '" + name_ + "': empty input shape");
        Shape cur = input_shape_;
        per_layer_out_.reserve(specs.size());
        for (size_t i = 0; i < specs.size(); ++i) {
            cur = infer_output_shape(specs[i], cur);  // throws naming the layer
            per_layer_out_.push_back(cur);
            layers_.push_back(make_layer<T>(specs[i]));
            layers_.back()->set_layer_index(static_cast<int>(i));
        }
        if (layers_.empty()) throw ValueError("model '" + name_ + "': no layers");
    }

    const std::string& name() const { return name_; }
    const Shape& input_shape() const { return input_shape_; }
    const Shape& output_shape() const { return per_layer_out_.back(); }
    int n_layers() const { return static_cast<int>(layers_.size()); }
    Layer<T>* layer(int i) { return layers_[static_cast<size_t>(i)].get(); }
    const Layer<T>* layer(int i) const { return layers_[static_cast<size_t>(i)].get(); }

    std::vector<LayerSpec> specs() const {
        std::vector<LayerSpec> out;
        for (const auto& l : layers_) out.push_back(l->spec());
        return out;
    }

    Tensor<T> forward(const Tensor<T>& batch, const ForwardCtx& ctx) {
        check_input(batch);
        Tensor<T> cur = batch;
        for (auto& l : layers_) cur = l->forward(cur, ctx);
        return cur;
    }

    // Forward keeping every activation for a subsequent backward().
    Tensor<T> forward_cached(const Tensor<T>& batch, const ForwardCtx& ctx) {
        check_input(batch);
        acts_.clear();
        acts_.reserve(layers_.size() + 1);
        acts_.push_back(batch);
        for (auto& l : layers_) acts_.push_back(l->forward(acts_.back(), ctx));
        return acts_.back();
    }

    // Accumulates parameter gradients; returns the gradient w.r.t. the input
    // batch. Requires a preceding forward_cached().
    Tensor<T> backward(const Tensor<T>& grad_logits) {
        if (acts_.size() != layers_.size() + 1)
            throw ValueError("model '" + name_ + "': backward without cached forward");
        Tensor<T> grad = grad_logits;
        for (int i = n_layers() - 1; i >= 0; --i) {
            if (i == fault_layer_)  // test hook: corrupt the gradient stream
                for (auto& v : grad.data) v = -v;
            grad = layers_[static_cast<size_t>(i)]->backward(grad, acts_[static_cast<size_t>(i)],
                                                             acts_[static_cast<size_t>(i) + 1]);
        }
        return grad;
    }

    void drop_cache() {
        acts_.clear();
        acts_.shrink_to_fit();
    }

    std::vector<ParamView<T>> params() {
        std::vector<ParamView<T>> out;
        for (auto& l : layers_) l->collect_params(out);
        return out;
    }

    void zero_grads() {
        for (auto p : params()) p.grad->zero();
    }

    void init_params(uint64_t seed) {
        for (size_t i = 0; i < layers_.size(); ++i) {
            RngStream rng(mix_seed(seed, fnv1a(layers_[i]->name())));
            layers_[i]->init_params(rng);
        }
    }

    int64_t param_count() {
        int64_t total = 0;
        for (auto p : params()) total += p.value->numel();
        return total;
    }

    std::vector<std::pair<std::string, int64_t>> param_count_per_layer() {
        std::vector<std::pair<std::string, int64_t>> out;
        for (auto& l : layers_) {
            std::vector<ParamView<T>> ps;
            l->collect_params(ps);
            int64_t n = 0;
            for (auto& p : ps) n += p.value->numel();
            out.emplace_back(l->name(), n);
        }
        return out;
    }

    // Negative-control hook: negates the upstream gradient entering the named
    // layer, which must make gradient checking fail.
    void set_grad_fault(const std::string& layer_name) {
        for (int i = 0; i < n_layers(); ++i)
            if (layers_[static_cast<size_t>(i)]->name() == layer_name) {
                fault_layer_ = i;
                return;
            }
        throw ValueError("model '" + name_ + "': no layer named '" + layer_name + "'");
    }

    std::vector<std::vector<double>> aux_state() const {
        std::vector<std::vector<double>> out;
        for (const auto& l : layers_)
            if (auto* bn = dynamic_cast<const BatchNormLayer<T>*>(l.get())) {
                out.push_back(const_cast<BatchNormLayer<T>*>(bn)->running_mean());
                out.push_back(const_cast<BatchNormLayer<T>*>(bn)->running_var());
            }
        return out;
    }

    void set_aux_state(const std::vector<std::vector<double>>& aux) {
        size_t k = 0;
        for (auto& l : layers_)
            if (auto* bn = dynamic_cast<BatchNormLayer<T>*>(l.get())) {
                if (k + 2 > aux.size())
                    throw ValueError("model '" + name_ + "': running-stat state count mismatch");
                bn->running_mean() = aux[k++];
                bn->running_var() = aux[k++];
            }
        if (k != aux.size())
            throw ValueError("model '" + name_ + "': running-stat state count mismatch");
    }

    ParamSnapshot<T> snapshot() {
        ParamSnapshot<T> s;
        for (auto p : params()) s.params.push_back(p.value->data);
        s.aux = aux_state();
        return s;
    }

    void restore(const ParamSnapshot<T>& s) {
        auto ps = params();
        if (ps.size() != s.params.size())
            throw ValueError("model '" + name_ + "': snapshot parameter count mismatch");
        for (size_t i = 0; i < ps.size(); ++i) {
            if (ps[i].value->data.size() != s.params[i].size())
                throw ValueError("model '" + name_ + "': snapshot size mismatch for '" + ps[i].name + "'");
            ps[i].value->data = s.params[i];
        }
        set_aux_state(s.aux);
    }

    // Same architecture and state at a different precision (e.g. float
    // training graph -> double graph for finite-difference checks).
    template <typename U>
    ModelGraph<U> clone_as() {
        ModelGraph<U> other(name_, input_shape_, specs());
        auto src = params();
        auto dst = other.params();
        for (size_t i = 0; i < src.size(); ++i)
            for (int64_t j = 0; j < src[i].value->numel(); ++j)
                (*dst[i].value)[j] = static_cast<U>((*src[i].value)[j]);
        other.set_aux_state(aux_state());
        return other;
    }

private:
    void check_input(const Tensor<T>& batch) const {
        bool ok = batch.ndim() == static_cast<int>(input_shape_.size()) + 1 && batch.extent(0) >= 1;
        if (ok)
            for (size_t a = 0; a < input_shape_.size(); ++a)
                ok = ok && batch.shape[a + 1] == input_shape_[a];
        if (!ok)
            throw ValueError("model '" + name_ + "': expected input [batch, " +
                             shape_str(input_shape_).substr(1) + ", got " + shape_str(batch.shape));
    }

    std::string name_;
    Shape input_shape_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    std::vector<Shape> per_layer_out_;
    std::vector<Tensor<T>> acts_;
    int fault_layer_ = -1;
};

}  // namespace bdae
