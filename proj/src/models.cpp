#include "bdae/models.hpp"

#include "bdae/loss.hpp"

namespace bdae {

ModelConfig default_model_config(FuseMode kind) {
    ModelConfig config;  // 2d defaults
    config.kind = kind;
    switch (kind) {
        case FuseMode::Mode2d:
            break;
        case FuseMode::Mode25d:
            config.in_channels = 15;
            break;
        case FuseMode::Mode3d:
            config.in_channels = 3;
            config.blocks = {{32, 32}, {64, 64}, {96, 96}, {128}};
            config.kernel = {3, 3, 3};
            config.padding = 1;
            config.pool_after = {true, true, true, false};
            config.pool_kernel = {2, 2, 2};
            config.fc_widths = {64, 32};
            config.fc_dropout = {0.0, 0.0};
            config.batchnorm = true;
            break;
    }
    return config;
}

void validate_model_config(const ModelConfig& config) {
    const size_t want_dims = config.kind == FuseMode::Mode3d ? 3 : 2;
    if (config.kernel.size() != want_dims || config.pool_kernel.size() != want_dims)
        throw ValueError("model: kernel rank " + std::to_string(config.kernel.size()) +
                         " does not match a " + std::string(fuse_mode_name(config.kind)) +
                         " model (want " + std::to_string(want_dims) + ")");
    if (config.in_channels < 1) throw ValueError("model: input channels must be >= 1");
    if (config.blocks.empty()) throw ValueError("model: at least one conv block required");
    for (const auto& block : config.blocks) {
        if (block.empty()) throw ValueError("model: empty conv block");
        for (int ch : block)
            if (ch < 1) throw ValueError("model: conv channel count must be >= 1");
    }
    if (config.pool_after.size() != config.blocks.size())
        throw ValueError("model: pool_after must list one entry per block");
    for (int k : config.kernel)
        if (k < 1) throw ValueError("model: conv kernel extent must be >= 1");
    for (int k : config.pool_kernel)
        if (k < 1) throw ValueError("model: pool kernel extent must be >= 1");
    if (config.padding < 0) throw ValueError("model: padding must be >= 0");
    if (config.fc_dropout.size() != config.fc_widths.size())
        throw ValueError("model: fc_dropout must list one rate per hidden FC layer");
    for (int w : config.fc_widths)
        if (w < 1) throw ValueError("model: FC width must be >= 1");
    for (double r : config.fc_dropout)
        if (r < 0.0 || r >= 1.0)
            throw ValueError("model: dropout rate " + std::to_string(r) + " outside [0, 1)");
}

std::vector<LayerSpec> model_layer_specs(const ModelConfig& config) {
    validate_model_config(config);
    const bool is3d = config.kind == FuseMode::Mode3d;
    std::vector<LayerSpec> specs;

    int conv_n = 0, pool_n = 0;
    int channels = config.in_channels;
    for (size_t b = 0; b < config.blocks.size(); ++b) {
        for (int out_ch : config.blocks[b]) {
            LayerSpec conv;
            conv.kind = is3d ? LayerKind::Conv3d : LayerKind::Conv2d;
            conv.name = "conv" + std::to_string(++conv_n);
            conv.kernel = config.kernel;
            conv.stride.assign(config.kernel.size(), 1);
            conv.padding.assign(config.kernel.size(), config.padding);
            conv.in_channels = channels;
            conv.out_channels = out_ch;
            conv.act = Activation::Relu;
            specs.push_back(conv);
            if (config.batchnorm) {
                LayerSpec bn;
                bn.kind = LayerKind::BatchNorm;
                bn.name = "bn" + std::to_string(conv_n);
                bn.channels = out_ch;
                specs.push_back(bn);
            }
            channels = out_ch;
        }
        if (config.pool_after[b]) {
            LayerSpec pool;
            pool.kind = is3d ? LayerKind::MaxPool3d : LayerKind::MaxPool2d;
            pool.name = "pool" + std::to_string(++pool_n);
            pool.kernel = config.pool_kernel;
            pool.stride = config.pool_kernel;
            pool.padding.assign(config.pool_kernel.size(), 0);
            specs.push_back(pool);
        }
    }

    LayerSpec gap;
    gap.kind = LayerKind::GlobalAvgPool;
    gap.name = "gap";
    specs.push_back(gap);

    int width = channels;
    for (size_t i = 0; i < config.fc_widths.size(); ++i) {
        LayerSpec fc;
        fc.kind = LayerKind::Dense;
        fc.name = "fc" + std::to_string(i + 1);
        fc.in_features = width;
        fc.out_features = config.fc_widths[i];
        fc.act = Activation::Relu;
        specs.push_back(fc);
        width = config.fc_widths[i];
        if (config.fc_dropout[i] > 0.0) {
            LayerSpec drop;
            drop.kind = LayerKind::Dropout;
            drop.name = "drop" + std::to_string(i + 1);
            drop.rate = config.fc_dropout[i];
            specs.push_back(drop);
        }
    }

    LayerSpec out;
    out.kind = LayerKind::Dense;
    out.name = "out";
    out.in_features = width;
    out.out_features = kNumClasses;
    out.act = Activation::None;
    specs.push_back(out);
    return specs;
}

Shape default_input_shape(FuseMode kind) {
    switch (kind) {
        case FuseMode::Mode2d: return Shape{3, 150, 150};
        case FuseMode::Mode25d: return Shape{15, 150, 150};
        case FuseMode::Mode3d: return Shape{3, 20, 150, 150};
    }
    throw ValueError("unknown model kind");
}

Tensor<float> batch_of(const std::vector<Sample>& samples) {
    if (samples.empty()) throw ValueError("batch_of: no samples");
    const Shape& per = samples[0].tensor.shape;
    Shape batched;
    batched.push_back(static_cast<int64_t>(samples.size()));
    batched.insert(batched.end(), per.begin(), per.end());
    Tensor<float> batch(batched);
    int64_t stride = samples[0].tensor.numel();
    for (size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].tensor.shape != per)
            throw ValueError("batch_of: sample " + std::to_string(i) + " shape " +
                             shape_str(samples[i].tensor.shape) + " != " + shape_str(per));
        std::copy(samples[i].tensor.ptr(), samples[i].tensor.ptr() + stride,
                  batch.ptr() + static_cast<int64_t>(i) * stride);
    }
    return batch;
}

Predictions predict(ModelGraph<float>& graph, const std::vector<Sample>& samples) {
    Tensor<float> batch = batch_of(samples);
    ForwardCtx ctx{Mode::Infer, 0, 0};
    Tensor<float> logits = graph.forward(batch, ctx);

    const int64_t n = logits.shape[0], k = logits.shape[1];
    Predictions pred;
    pred.probs = softmax_rows(logits);
    pred.classes.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int best = 0;
        for (int64_t j = 1; j < k; ++j)
            if (pred.probs.at(i, j) > pred.probs.at(i, best)) best = static_cast<int>(j);
        pred.classes[static_cast<size_t>(i)] = best;
    }
    return pred;
}

}  // namespace bdae
