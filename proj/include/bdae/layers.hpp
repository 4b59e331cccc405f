#pragma once

#include <Eigen/Core>

#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "bdae/rng.hpp"
#include "bdae/tensor.hpp"

namespace bdae {

enum class LayerKind {
    Conv2d,
    Conv3d,
    MaxPool2d,
    MaxPool3d,
    GlobalAvgPool,
    Dense,
    BatchNorm,
    Dropout,
    SoftmaxOutput,
};

enum class Activation { None, Relu };

enum class Mode { Train, Infer };

// Per-call context. Dropout masks are a pure function of
// (seed, step, layer index), so forward passes are replayable.
struct ForwardCtx {
    Mode mode = Mode::Infer;
    uint64_t seed = 0;
    int64_t step = 0;
};

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Conv3d: return "conv3d";
        case LayerKind::MaxPool2d: return "maxpool2d";
        case LayerKind::MaxPool3d: return "maxpool3d";
        case LayerKind::GlobalAvgPool: return "global-avg-pool";
        case LayerKind::Dense: return "dense";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::SoftmaxOutput: return "softmax-output";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind;
    std::string name;
    std::vector<int> kernel;   // conv / pool window extents
    std::vector<int> stride;   // conv / pool strides
    std::vector<int> padding;  // conv zero padding per axis
    int in_channels = 0;
    int out_channels = 0;
    int in_features = 0;
    int out_features = 0;
    int channels = 0;     // batchnorm
    double rate = 0.0;    // dropout
    Activation act = Activation::None;
};

inline void validate_spec(const LayerSpec& s) {
    auto bad = [&](const std::string& what) {
        throw ValueError(std::string(layer_kind_name(s.kind)) + " '" + s.name + "': " + what);
    };
    switch (s.kind) {
        case LayerKind::Conv2d:
        case LayerKind::Conv3d: {
            size_t nd = s.kind == LayerKind::Conv2d ? 2 : 3;
            if (s.kernel.size() != nd || s.stride.size() != nd || s.padding.size() != nd)
                bad("kernel/stride/padding must have " + std::to_string(nd) + " extents");
            for (int k : s.kernel)
                if (k < 1) bad("kernel extent < 1");
            for (int v : s.stride)
                if (v < 1) bad("stride < 1");
            for (int p : s.padding)
                if (p < 0) bad("negative padding");
            if (s.in_channels < 1 || s.out_channels < 1) bad("channel count < 1");
            break;
        }
        case LayerKind::MaxPool2d:
        case LayerKind::MaxPool3d: {
            size_t nd = s.kind == LayerKind::MaxPool2d ? 2 : 3;
            if (s.kernel.size() != nd || s.stride.size() != nd)
                bad("window/stride must have " + std::to_string(nd) + " extents");
            for (int k : s.kernel)
                if (k < 1) bad("window extent < 1");
            for (int v : s.stride)
                if (v < 1) bad("stride < 1");
            break;
        }
        case LayerKind::Dense:
        case LayerKind::SoftmaxOutput:
            if (s.in_features < 1 || s.out_features < 1) bad("feature width < 1");
            break;
        case LayerKind::BatchNorm:
            if (s.channels < 1) bad("channel count < 1");
            break;
        case LayerKind::Dropout:
            if (!(s.rate >= 0.0 && s.rate < 1.0)) bad("rate must be in [0,1)");
            break;
        case LayerKind::GlobalAvgPool:
            break;
    }
}

// Output shape of a layer for one sample (no batch axis). Throws a
// diagnostic naming the layer on spatial underflow.
inline Shape infer_output_shape(const LayerSpec& s, const Shape& in) {
    auto bad = [&](const std::string& what) {
        throw ValueError(std::string(layer_kind_name(s.kind)) + " '" + s.name + "': " + what +
                         " (input " + shape_str(in) + ")");
    };
    static const char* axis_names[3] = {"depth", "height", "width"};
    switch (s.kind) {
        case LayerKind::Conv2d:
        case LayerKind::Conv3d: {
            size_t nd = s.kernel.size();
            if (in.size() != nd + 1) bad("expected channels + " + std::to_string(nd) + " spatial axes");
            if (in[0] != s.in_channels)
                bad("channel axis: expected " + std::to_string(s.in_channels) + ", got " +
                    std::to_string(in[0]));
            Shape out{s.out_channels};
            for (size_t a = 0; a < nd; ++a) {
                int64_t padded = in[a + 1] + 2 * s.padding[a];
                if (padded < s.kernel[a])
                    bad(std::string(axis_names[a + 3 - nd]) + " axis: extent " +
                        std::to_string(in[a + 1]) + " + 2*pad " + std::to_string(s.padding[a]) +
                        " < kernel " + std::to_string(s.kernel[a]));
                out.push_back((padded - s.kernel[a]) / s.stride[a] + 1);
            }
            return out;
        }
        case LayerKind::MaxPool2d:
        case LayerKind::MaxPool3d: {
            size_t nd = s.kernel.size();
            if (in.size() != nd + 1) bad("expected channels + " + std::to_string(nd) + " spatial axes");
            Shape out{in[0]};
            for (size_t a = 0; a < nd; ++a) {
                if (in[a + 1] < s.kernel[a])
                    bad(std::string(axis_names[a + 3 - nd]) + " axis: window " +
                        std::to_string(s.kernel[a]) + " larger than extent " +
                        std::to_string(in[a + 1]));
                out.push_back((in[a + 1] - s.kernel[a]) / s.stride[a] + 1);
            }
            return out;
        }
        case LayerKind::GlobalAvgPool:
            if (in.size() < 2) bad("needs channels + spatial axes");
            return Shape{in[0]};
        case LayerKind::Dense:
        case LayerKind::SoftmaxOutput: {
            if (in.size() != 1 || in[0] != s.in_features)
                bad("expected flat width " + std::to_string(s.in_features) + ", got " +
                    shape_str(in));
            return Shape{s.out_features};
        }
        case LayerKind::BatchNorm:
            if (in.empty() || in[0] != s.channels)
                bad("channel axis: expected " + std::to_string(s.channels));
            return in;
        case LayerKind::Dropout:
            return in;
    }
    bad("unknown layer kind");
    return {};
}

template <typename T>
struct ParamView {
    std::string name;
    Tensor<T>* value;
    Tensor<T>* grad;
};

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
class Layer {
public:
    explicit Layer(LayerSpec spec) : spec_(std::move(spec)) { validate_spec(spec_); }
    virtual ~Layer() = default;

    // `in` is batched: [N, ...per-sample shape].
    virtual Tensor<T> forward(const Tensor<T>& in, const ForwardCtx& ctx) = 0;

    // `in`/`out` are the cached forward operands for this layer, supplied
    // by the graph driver. Returns the gradient w.r.t. `in`.
    virtual Tensor<T> backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                               const Tensor<T>& out) = 0;

    virtual void collect_params(std::vector<ParamView<T>>& sink) { (void)sink; }
    virtual void init_params(RngStream& rng) { (void)rng; }

    const LayerSpec& spec() const { return spec_; }
    const std::string& name() const { return spec_.name; }
    void set_layer_index(int idx) { layer_index_ = idx; }
    int layer_index() const { return layer_index_; }

protected:
    void check_batched(const Tensor<T>& in, const Shape& expect_per_sample) const {
        if (in.ndim() != static_cast<int>(expect_per_sample.size()) + 1 || in.extent(0) < 1)
            throw ValueError(std::string(layer_kind_name(spec_.kind)) + " '" + spec_.name +
                             "': expected batched input of rank " +
                             std::to_string(expect_per_sample.size() + 1) + ", got " +
                             shape_str(in.shape));
    }

    LayerSpec spec_;
    int layer_index_ = -1;
};

namespace detail {

// Applies y = max(y, 0) in place.
template <typename T>
inline void relu_inplace(Tensor<T>& t) {
    for (auto& v : t.data)
        if (v < T(0)) v = T(0);
}

// g *= (out > 0), elementwise.
template <typename T>
inline void relu_mask(std::vector<T>& g, const std::vector<T>& out) {
    for (size_t i = 0; i < g.size(); ++i)
        if (out[i] <= T(0)) g[i] = T(0);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip) via im2col + GEMM. The
// nested-loop reference this is tested against lives with the tests.
// ---------------------------------------------------------------------------
template <typename T>
class ConvLayer : public Layer<T> {
public:
    explicit ConvLayer(LayerSpec spec) : Layer<T>(std::move(spec)) {
        const auto& s = this->spec_;
        nd_ = static_cast<int>(s.kernel.size());
        int64_t k_prod = 1;
        for (int k : s.kernel) k_prod *= k;
        weight_ = Tensor<T>(conv_weight_shape(s));
        bias_ = Tensor<T>(Shape{s.out_channels});
        weight_grad_ = Tensor<T>(weight_.shape);
        bias_grad_ = Tensor<T>(bias_.shape);
        patch_len_ = s.in_channels * k_prod;
    }

    static Shape conv_weight_shape(const LayerSpec& s) {
        Shape w{s.out_channels, s.in_channels};
        for (int k : s.kernel) w.push_back(k);
        return w;
    }

    Tensor<T> forward(const Tensor<T>& in, const ForwardCtx&) override {
        const auto& s = this->spec_;
        this->check_batched(in, Shape(static_cast<size_t>(nd_) + 1, 1));
        Shape per_sample(in.shape.begin() + 1, in.shape.end());
        Shape out_ps = infer_output_shape(s, per_sample);
        int64_t batch = in.extent(0);

        Shape out_shape{batch};
        out_shape.insert(out_shape.end(), out_ps.begin(), out_ps.end());
        Tensor<T> out(out_shape);

        const int64_t positions = shape_numel(out_ps) / s.out_channels;
        col_.resize(static_cast<size_t>(patch_len_ * positions));
        const int64_t in_stride = shape_numel(per_sample);
        const int64_t out_stride = shape_numel(out_ps);

        Eigen::Map<const MatRM<T>> wmat(weight_.ptr(), s.out_channels, patch_len_);
        Eigen::Map<const VecX<T>> bvec(bias_.ptr(), s.out_channels);
        for (int64_t n = 0; n < batch; ++n) {
            im2col(in.ptr() + n * in_stride, per_sample, out_ps);
            Eigen::Map<const MatRM<T>> cmat(col_.data(), patch_len_, positions);
            Eigen::Map<MatRM<T>> ymat(out.ptr() + n * out_stride, s.out_channels, positions);
            ymat.noalias() = wmat * cmat;
            ymat.colwise() += bvec;
        }
        if (s.act == Activation::Relu) detail::relu_inplace(out);
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                       const Tensor<T>& out) override {
        const auto& s = this->spec_;
        if (!same_shape(grad_out, out))
            throw ValueError("conv '" + s.name + "': upstream gradient shape " +
                             shape_str(grad_out.shape) + " != forward output " +
                             shape_str(out.shape));
        Shape per_sample(in.shape.begin() + 1, in.shape.end());
        Shape out_ps(out.shape.begin() + 1, out.shape.end());
        int64_t batch = in.extent(0);
        const int64_t positions = shape_numel(out_ps) / s.out_channels;
        const int64_t in_stride = shape_numel(per_sample);
        const int64_t out_stride = shape_numel(out_ps);

        Tensor<T> grad_in(in.shape);
        gy_.assign(grad_out.data.begin(), grad_out.data.end());
        if (s.act == Activation::Relu) detail::relu_mask(gy_, out.data);

        col_.resize(static_cast<size_t>(patch_len_ * positions));
        dcol_.resize(col_.size());
        Eigen::Map<const MatRM<T>> wmat(weight_.ptr(), s.out_channels, patch_len_);
        Eigen::Map<MatRM<T>> dwmat(weight_grad_.ptr(), s.out_channels, patch_len_);
        for (int64_t n = 0; n < batch; ++n) {
            Eigen::Map<const MatRM<T>> gmat(gy_.data() + n * out_stride, s.out_channels, positions);
            im2col(in.ptr() + n * in_stride, per_sample, out_ps);
            Eigen::Map<const MatRM<T>> cmat(col_.data(), patch_len_, positions);
            dwmat.noalias() += gmat * cmat.transpose();
            // Serial bias reduction: Eigen's vectorized sum orders the
            // accumulation by buffer alignment, which breaks run-to-run bit
            // reproducibility.
            for (int64_t c = 0; c < s.out_channels; ++c) {
                const T* gp = gy_.data() + n * out_stride + c * positions;
                T acc = T(0);
                for (int64_t p = 0; p < positions; ++p) acc += gp[p];
                bias_grad_[c] += acc;
            }
            Eigen::Map<MatRM<T>> dcmat(dcol_.data(), patch_len_, positions);
            dcmat.noalias() = wmat.transpose() * gmat;
            col2im(grad_in.ptr() + n * in_stride, per_sample, out_ps);
        }
        return grad_in;
    }

    void collect_params(std::vector<ParamView<T>>& sink) override {
        sink.push_back({this->spec_.name + ".weight", &weight_, &weight_grad_});
        sink.push_back({this->spec_.name + ".bias", &bias_, &bias_grad_});
    }

    void init_params(RngStream& rng) override {
        // Fan-in scaled uniform.
        double bound = std::sqrt(6.0 / static_cast<double>(patch_len_));
        for (auto& v : weight_.data) v = static_cast<T>(rng.uniform(-bound, bound));
        bias_.zero();
    }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }

private:
    // Gather kernel-sized patches into col_[patch_len, positions]; out-of-
    // bounds (padding) reads become zeros.
    void im2col(const T* src, const Shape& in_ps, const Shape& out_ps) {
        if (nd_ == 2)
            im2col_2d(src, in_ps, out_ps);
        else
            im2col_3d(src, in_ps, out_ps);
    }

    void im2col_2d(const T* src, const Shape& in_ps, const Shape& out_ps) {
        const auto& s = this->spec_;
        const int64_t H = in_ps[1], W = in_ps[2];
        const int64_t oh = out_ps[1], ow = out_ps[2];
        const int kh = s.kernel[0], kw = s.kernel[1];
        const int sh = s.stride[0], sw = s.stride[1];
        const int ph = s.padding[0], pw = s.padding[1];
        T* dst = col_.data();
        for (int64_t c = 0; c < s.in_channels; ++c) {
            const T* plane = src + c * H * W;
            for (int di = 0; di < kh; ++di) {
                for (int dj = 0; dj < kw; ++dj) {
                    for (int64_t oy = 0; oy < oh; ++oy) {
                        int64_t iy = oy * sh + di - ph;
                        T* row = dst + oy * ow;
                        if (iy < 0 || iy >= H) {
                            std::memset(row, 0, sizeof(T) * static_cast<size_t>(ow));
                            continue;
                        }
                        const T* sp = plane + iy * W;
                        if (sw == 1) {
                            int64_t x0 = static_cast<int64_t>(dj) - pw;       // ix at ox=0
                            int64_t lo = std::max<int64_t>(0, -x0);           // first valid ox
                            int64_t hi = std::min<int64_t>(ow, W - x0);       // one past last
                            if (lo > 0) std::memset(row, 0, sizeof(T) * static_cast<size_t>(lo));
                            if (hi > lo)
                                std::memcpy(row + lo, sp + x0 + lo,
                                            sizeof(T) * static_cast<size_t>(hi - lo));
                            if (hi < ow)
                                std::memset(row + std::max<int64_t>(hi, 0), 0,
                                            sizeof(T) * static_cast<size_t>(ow - std::max<int64_t>(hi, 0)));
                        } else {
                            for (int64_t ox = 0; ox < ow; ++ox) {
                                int64_t ix = ox * sw + dj - pw;
                                row[ox] = (ix >= 0 && ix < W) ? sp[ix] : T(0);
                            }
                        }
                    }
                    dst += oh * ow;
                }
            }
        }
    }

    void im2col_3d(const T* src, const Shape& in_ps, const Shape& out_ps) {
        const auto& s = this->spec_;
        const int64_t D = in_ps[1], H = in_ps[2], W = in_ps[3];
        const int64_t od = out_ps[1], oh = out_ps[2], ow = out_ps[3];
        const int kd = s.kernel[0], kh = s.kernel[1], kw = s.kernel[2];
        const int sd = s.stride[0], sh = s.stride[1], sw = s.stride[2];
        const int pd = s.padding[0], ph = s.padding[1], pw = s.padding[2];
        T* dst = col_.data();
        for (int64_t c = 0; c < s.in_channels; ++c) {
            const T* vol = src + c * D * H * W;
            for (int dz = 0; dz < kd; ++dz)
                for (int di = 0; di < kh; ++di)
                    for (int dj = 0; dj < kw; ++dj) {
                        for (int64_t oz = 0; oz < od; ++oz) {
                            int64_t iz = oz * sd + dz - pd;
                            for (int64_t oy = 0; oy < oh; ++oy) {
                                int64_t iy = oy * sh + di - ph;
                                T* row = dst + (oz * oh + oy) * ow;
                                if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                                    std::memset(row, 0, sizeof(T) * static_cast<size_t>(ow));
                                    continue;
                                }
                                const T* sp = vol + (iz * H + iy) * W;
                                for (int64_t ox = 0; ox < ow; ++ox) {
                                    int64_t ix = ox * sw + dj - pw;
                                    row[ox] = (ix >= 0 && ix < W) ? sp[ix] : T(0);
                                }
                            }
                        }
                        dst += od * oh * ow;
                    }
        }
    }

    // Scatter-add of dcol_ back onto the input gradient (adjoint of im2col).
    void col2im(T* dst, const Shape& in_ps, const Shape& out_ps) {
        const auto& s = this->spec_;
        const T* src = dcol_.data();
        if (nd_ == 2) {
            const int64_t H = in_ps[1], W = in_ps[2];
            const int64_t oh = out_ps[1], ow = out_ps[2];
            for (int64_t c = 0; c < s.in_channels; ++c) {
                T* plane = dst + c * H * W;
                for (int di = 0; di < s.kernel[0]; ++di)
                    for (int dj = 0; dj < s.kernel[1]; ++dj) {
                        for (int64_t oy = 0; oy < oh; ++oy) {
                            int64_t iy = oy * s.stride[0] + di - s.padding[0];
                            if (iy < 0 || iy >= H) {
                                src += ow;
                                continue;
                            }
                            T* sp = plane + iy * W;
                            for (int64_t ox = 0; ox < ow; ++ox) {
                                int64_t ix = ox * s.stride[1] + dj - s.padding[1];
                                if (ix >= 0 && ix < W) sp[ix] += src[ox];
                            }
                            src += ow;
                        }
                    }
            }
        } else {
            const int64_t D = in_ps[1], H = in_ps[2], W = in_ps[3];
            const int64_t od = out_ps[1], oh = out_ps[2], ow = out_ps[3];
            for (int64_t c = 0; c < s.in_channels; ++c) {
                T* vol = dst + c * D * H * W;
                for (int dz = 0; dz < s.kernel[0]; ++dz)
                    for (int di = 0; di < s.kernel[1]; ++di)
                        for (int dj = 0; dj < s.kernel[2]; ++dj) {
                            for (int64_t oz = 0; oz < od; ++oz) {
                                int64_t iz = oz * s.stride[0] + dz - s.padding[0];
                                for (int64_t oy = 0; oy < oh; ++oy) {
                                    int64_t iy = oy * s.stride[1] + di - s.padding[1];
                                    if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                                        src += ow;
                                        continue;
                                    }
                                    T* sp = vol + (iz * H + iy) * W;
                                    for (int64_t ox = 0; ox < ow; ++ox) {
                                        int64_t ix = ox * s.stride[2] + dj - s.padding[2];
                                        if (ix >= 0 && ix < W) sp[ix] += src[ox];
                                    }
                                    src += ow;
                                }
                            }
                        }
            }
        }
    }

    int nd_;
    int64_t patch_len_;
    Tensor<T> weight_, bias_, weight_grad_, bias_grad_;
    std::vector<T> col_, dcol_, gy_;
};

// ---------------------------------------------------------------------------
// Max pooling; backward routes gradient only to the argmax positions.
// ---------------------------------------------------------------------------
template <typename T>
class MaxPoolLayer : public Layer<T> {
public:
    explicit MaxPoolLayer(LayerSpec spec) : Layer<T>(std::move(spec)) {
        nd_ = static_cast<int>(this->spec_.kernel.size());
    }

    Tensor<T> forward(const Tensor<T>& in, const ForwardCtx&) override {
        const auto& s = this->spec_;
        this->check_batched(in, Shape(static_cast<size_t>(nd_) + 1, 1));
        Shape per_sample(in.shape.begin() + 1, in.shape.end());
        Shape out_ps = infer_output_shape(s, per_sample);
        int64_t batch = in.extent(0);
        Shape out_shape{batch};
        out_shape.insert(out_shape.end(), out_ps.begin(), out_ps.end());
        Tensor<T> out(out_shape);
        argmax_.assign(static_cast<size_t>(out.numel()), 0);

        // Treat 2d as 3d with a singleton leading spatial axis.
        int64_t D = nd_ == 3 ? per_sample[1] : 1;
        int64_t H = per_sample[static_cast<size_t>(nd_ == 3 ? 2 : 1)];
        int64_t W = per_sample[static_cast<size_t>(nd_ == 3 ? 3 : 2)];
        int64_t od = nd_ == 3 ? out_ps[1] : 1;
        int64_t oh = out_ps[static_cast<size_t>(nd_ == 3 ? 2 : 1)];
        int64_t ow = out_ps[static_cast<size_t>(nd_ == 3 ? 3 : 2)];
        int kd = nd_ == 3 ? s.kernel[0] : 1, kh = s.kernel[nd_ == 3 ? 1 : 0],
            kw = s.kernel[nd_ == 3 ? 2 : 1];
        int sd = nd_ == 3 ? s.stride[0] : 1, sh = s.stride[nd_ == 3 ? 1 : 0],
            sw = s.stride[nd_ == 3 ? 2 : 1];

        int64_t channels = per_sample[0];
        const int64_t plane = D * H * W;
        const int64_t oplane = od * oh * ow;
        int64_t oi = 0;
        for (int64_t n = 0; n < batch; ++n)
            for (int64_t c = 0; c < channels; ++c) {
                const T* src = in.ptr() + (n * channels + c) * plane;
                T* dst = out.ptr() + (n * channels + c) * oplane;
                for (int64_t oz = 0; oz < od; ++oz)
                    for (int64_t oy = 0; oy < oh; ++oy)
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            int64_t z0 = oz * sd, y0 = oy * sh, x0 = ox * sw;
                            int64_t best = (z0 * H + y0) * W + x0;
                            T bv = src[best];
                            for (int dz = 0; dz < kd; ++dz)
                                for (int dy = 0; dy < kh; ++dy)
                                    for (int dx = 0; dx < kw; ++dx) {
                                        int64_t idx = ((z0 + dz) * H + y0 + dy) * W + x0 + dx;
                                        if (src[idx] > bv) {
                                            bv = src[idx];
                                            best = idx;
                                        }
                                    }
                            dst[(oz * oh + oy) * ow + ox] = bv;
                            argmax_[static_cast<size_t>(oi++)] = (n * channels + c) * plane + best;
                        }
            }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                       const Tensor<T>& out) override {
        if (!same_shape(grad_out, out))
            throw ValueError("maxpool '" + this->spec_.name + "': upstream gradient shape " +
                             shape_str(grad_out.shape) + " != forward output " +
                             shape_str(out.shape));
        if (argmax_.size() != static_cast<size_t>(out.numel()))
            throw ValueError("maxpool '" + this->spec_.name + "': missing forward cache");
        Tensor<T> grad_in(in.shape);
        for (size_t i = 0; i < argmax_.size(); ++i)
            grad_in[argmax_[i]] += grad_out[static_cast<int64_t>(i)];
        return grad_in;
    }

private:
    int nd_;
    std::vector<int64_t> argmax_;
};

// ---------------------------------------------------------------------------
// Global average pooling: [N,C,spatial...] -> [N,C].
// ---------------------------------------------------------------------------
template <typename T>
class GlobalAvgPoolLayer : public Layer<T> {
public:
    explicit GlobalAvgPoolLayer(LayerSpec spec) : Layer<T>(std::move(spec)) {}

    Tensor<T> forward(const Tensor<T>& in, const ForwardCtx&) override {
        if (in.ndim() < 3)
            throw ValueError("global-avg-pool '" + this->spec_.name +
                             "': needs batch, channel and spatial axes, got " +
                             shape_str(in.shape));
        int64_t batch = in.extent(0), channels = in.extent(1);
        int64_t spatial = in.numel() / (batch * channels);
        Tensor<T> out(Shape{batch, channels});
        const T inv = T(1) / static_cast<T>(spatial);
        for (int64_t nc = 0; nc < batch * channels; ++nc) {
            const T* src = in.ptr() + nc * spatial;
            T acc = T(0);
            for (int64_t i = 0; i < spatial; ++i) acc += src[i];
            out[nc] = acc * inv;
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                       const Tensor<T>& out) override {
        if (!same_shape(grad_out, out))
            throw ValueError("global-avg-pool '" + this->spec_.name + "': gradient shape mismatch");
        int64_t batch = in.extent(0), channels = in.extent(1);
        int64_t spatial = in.numel() / (batch * channels);
        Tensor<T> grad_in(in.shape);
        const T inv = T(1) / static_cast<T>(spatial);
        for (int64_t nc = 0; nc < batch * channels; ++nc) {
            T g = grad_out[nc] * inv;
            T* dst = grad_in.ptr() + nc * spatial;
            for (int64_t i = 0; i < spatial; ++i) dst[i] = g;
        }
        return grad_in;
    }
};

// ---------------------------------------------------------------------------
// Dense affine map [N,in] -> [N,out]. SoftmaxOutput uses the same layer with
// no activation; the softmax itself is fused into the loss / predict path.
// ---------------------------------------------------------------------------
template <typename T>
class DenseLayer : public Layer<T> {
public:
    explicit DenseLayer(LayerSpec spec) : Layer<T>(std::move(spec)) {
        weight_ = Tensor<T>(Shape{this->spec_.in_features, this->spec_.out_features});
        bias_ = Tensor<T>(Shape{this->spec_.out_features});
        weight_grad_ = Tensor<T>(weight_.shape);
        bias_grad_ = Tensor<T>(bias_.shape);
    }

    Tensor<T> forward(const Tensor<T>& in, const ForwardCtx&) override {
        const auto& s = this->spec_;
        if (in.ndim() != 2 || in.extent(1) != s.in_features)
            throw ValueError(std::string(layer_kind_name(s.kind)) + " '" + s.name +
                             "': width axis: expected " + std::to_string(s.in_features) +
                             " features, got " + shape_str(in.shape));
        int64_t batch = in.extent(0);
        Tensor<T> out(Shape{batch, s.out_features});
        Eigen::Map<const MatRM<T>> x(in.ptr(), batch, s.in_features);
        Eigen::Map<const MatRM<T>> w(weight_.ptr(), s.in_features, s.out_features);
        Eigen::Map<MatRM<T>> y(out.ptr(), batch, s.out_features);
        y.noalias() = x * w;
        Eigen::Map<const VecX<T>> b(bias_.ptr(), s.out_features);
        y.rowwise() += b.transpose();
        if (s.act == Activation::Relu) detail::relu_inplace(out);
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                       const Tensor<T>& out) override {
        const auto& s = this->spec_;
        if (!same_shape(grad_out, out))
            throw ValueError("dense '" + s.name + "': gradient shape mismatch");
        int64_t batch = in.extent(0);
        gy_.assign(grad_out.data.begin(), grad_out.data.end());
        if (s.act == Activation::Relu) detail::relu_mask(gy_, out.data);

        Tensor<T> grad_in(in.shape);
        Eigen::Map<const MatRM<T>> x(in.ptr(), batch, s.in_features);
        Eigen::Map<const MatRM<T>> g(gy_.data(), batch, s.out_features);
        Eigen::Map<const MatRM<T>> w(weight_.ptr(), s.in_features, s.out_features);
        Eigen::Map<MatRM<T>> dw(weight_grad_.ptr(), s.in_features, s.out_features);
        Eigen::Map<MatRM<T>> dx(grad_in.ptr(), batch, s.in_features);
        dw.noalias() += x.transpose() * g;
        // Serial bias reduction: Eigen's vectorized sum orders the
        // accumulation by buffer alignment, which breaks run-to-run bit
        // reproducibility.
        for (int64_t j = 0; j < s.out_features; ++j) {
            T acc = T(0);
            for (int64_t r = 0; r < batch; ++r) acc += gy_[static_cast<size_t>(r * s.out_features + j)];
            bias_grad_[j] += acc;
        }
        dx.noalias() = g * w.transpose();
        return grad_in;
    }

    void collect_params(std::vector<ParamView<T>>& sink) override {
        sink.push_back({this->spec_.name + ".weight", &weight_, &weight_grad_});
        sink.push_back({this->spec_.name + ".bias", &bias_, &bias_grad_});
    }

    void init_params(RngStream& rng) override {
        // Symmetric uniform scaled by average fan.
        double bound =
            std::sqrt(6.0 / static_cast<double>(this->spec_.in_features + this->spec_.out_features));
        for (auto& v : weight_.data) v = static_cast<T>(rng.uniform(-bound, bound));
        bias_.zero();
    }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }

private:
    Tensor<T> weight_, bias_, weight_grad_, bias_grad_;
    std::vector<T> gy_;
};

// ---------------------------------------------------------------------------
// Batch normalization over batch + spatial axes per channel.
// Train mode requires batch >= 2 and updates running stats (momentum 0.9);
// infer mode uses running stats only.
// ---------------------------------------------------------------------------
template <typename T>
class BatchNormLayer : public Layer<T> {
public:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.9;

    explicit BatchNormLayer(LayerSpec spec) : Layer<T>(std::move(spec)) {
        int c = this->spec_.channels;
        gamma_ = Tensor<T>(Shape{c}, std::vector<T>(static_cast<size_t>(c), T(1)));
        beta_ = Tensor<T>(Shape{c});
        gamma_grad_ = Tensor<T>(Shape{c});
        beta_grad_ = Tensor<T>(Shape{c});
        running_mean_.assign(static_cast<size_t>(c), 0.0);
        running_var_.assign(static_cast<size_t>(c), 1.0);
    }

    Tensor<T> forward(const Tensor<T>& in, const ForwardCtx& ctx) override {
        const auto& s = this->spec_;
        if (in.ndim() < 2 || in.extent(1) != s.channels)
            throw ValueError("batchnorm '" + s.name + "': channel axis: expected " +
                             std::to_string(s.channels) + ", got " + shape_str(in.shape));
        int64_t batch = in.extent(0);
        int64_t spatial = in.numel() / (batch * s.channels);
        Tensor<T> out(in.shape);
        train_mode_ = ctx.mode == Mode::Train;
        if (train_mode_) {
            if (batch < 2)
                throw ValueError("batchnorm '" + s.name + "': train mode requires batch >= 2");
            const double n = static_cast<double>(batch * spatial);
            mean_.assign(static_cast<size_t>(s.channels), 0.0);
            invstd_.assign(static_cast<size_t>(s.channels), 0.0);
            for (int64_t c = 0; c < s.channels; ++c) {
                double acc = 0.0, acc2 = 0.0;
                for (int64_t b = 0; b < batch; ++b) {
                    const T* src = in.ptr() + (b * s.channels + c) * spatial;
                    for (int64_t i = 0; i < spatial; ++i) {
                        acc += src[i];
                        acc2 += static_cast<double>(src[i]) * src[i];
                    }
                }
                double mu = acc / n;
                double var = acc2 / n - mu * mu;
                if (var < 0) var = 0;
                mean_[static_cast<size_t>(c)] = mu;
                invstd_[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + kEps);
                running_mean_[static_cast<size_t>(c)] =
                    kMomentum * running_mean_[static_cast<size_t>(c)] + (1 - kMomentum) * mu;
                double var_unbiased = var * n / (n - 1.0);
                running_var_[static_cast<size_t>(c)] =
                    kMomentum * running_var_[static_cast<size_t>(c)] + (1 - kMomentum) * var_unbiased;
            }
        } else {
            mean_ = running_mean_;
            invstd_.resize(static_cast<size_t>(s.channels));
            for (int64_t c = 0; c < s.channels; ++c)
                invstd_[static_cast<size_t>(c)] =
                    1.0 / std::sqrt(running_var_[static_cast<size_t>(c)] + kEps);
        }
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t c = 0; c < s.channels; ++c) {
                const T* src = in.ptr() + (b * s.channels + c) * spatial;
                T* dst = out.ptr() + (b * s.channels + c) * spatial;
                const T g = gamma_[c], bt = beta_[c];
                const T mu = static_cast<T>(mean_[static_cast<size_t>(c)]);
                const T is = static_cast<T>(invstd_[static_cast<size_t>(c)]);
                for (int64_t i = 0; i < spatial; ++i) dst[i] = g * (src[i] - mu) * is + bt;
            }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                       const Tensor<T>& out) override {
        const auto& s = this->spec_;
        if (!same_shape(grad_out, out))
            throw ValueError("batchnorm '" + s.name + "': gradient shape mismatch");
        int64_t batch = in.extent(0);
        int64_t spatial = in.numel() / (batch * s.channels);
        Tensor<T> grad_in(in.shape);
        const double n = static_cast<double>(batch * spatial);
        for (int64_t c = 0; c < s.channels; ++c) {
            const double mu = mean_[static_cast<size_t>(c)];
            const double is = invstd_[static_cast<size_t>(c)];
            double dgamma = 0.0, dbeta = 0.0, dot = 0.0;
            for (int64_t b = 0; b < batch; ++b) {
                const T* x = in.ptr() + (b * s.channels + c) * spatial;
                const T* g = grad_out.ptr() + (b * s.channels + c) * spatial;
                for (int64_t i = 0; i < spatial; ++i) {
                    double xh = (x[i] - mu) * is;
                    dgamma += g[i] * xh;
                    dbeta += g[i];
                    dot += g[i] * xh;
                }
            }
            gamma_grad_[c] += static_cast<T>(dgamma);
            beta_grad_[c] += static_cast<T>(dbeta);
            const double gm = gamma_[c];
            if (train_mode_) {
                // dx = gamma*invstd/n * (n*dy - sum(dy) - xhat * sum(dy*xhat))
                for (int64_t b = 0; b < batch; ++b) {
                    const T* x = in.ptr() + (b * s.channels + c) * spatial;
                    const T* g = grad_out.ptr() + (b * s.channels + c) * spatial;
                    T* dx = grad_in.ptr() + (b * s.channels + c) * spatial;
                    for (int64_t i = 0; i < spatial; ++i) {
                        double xh = (x[i] - mu) * is;
                        dx[i] = static_cast<T>(gm * is / n * (n * g[i] - dbeta - xh * dot));
                    }
                }
            } else {
                const double scale = gm * is;
                for (int64_t b = 0; b < batch; ++b) {
                    const T* g = grad_out.ptr() + (b * s.channels + c) * spatial;
                    T* dx = grad_in.ptr() + (b * s.channels + c) * spatial;
                    for (int64_t i = 0; i < spatial; ++i) dx[i] = static_cast<T>(scale * g[i]);
                }
            }
        }
        return grad_in;
    }

    void collect_params(std::vector<ParamView<T>>& sink) override {
        sink.push_back({this->spec_.name + ".gamma", &gamma_, &gamma_grad_});
        sink.push_back({this->spec_.name + ".beta", &beta_, &beta_grad_});
    }

    std::vector<double>& running_mean() { return running_mean_; }
    std::vector<double>& running_var() { return running_var_; }

private:
    Tensor<T> gamma_, beta_, gamma_grad_, beta_grad_;
    std::vector<double> running_mean_, running_var_;
    std::vector<double> mean_, invstd_;
    bool train_mode_ = false;
};

// ---------------------------------------------------------------------------
// Inverted dropout. The mask is a pure function of (seed, step, layer index).
// ---------------------------------------------------------------------------
template <typename T>
class DropoutLayer : public Layer<T> {
public:
    explicit DropoutLayer(LayerSpec spec) : Layer<T>(std::move(spec)) {}

    Tensor<T> forward(const Tensor<T>& in, const ForwardCtx& ctx) override {
        const double rate = this->spec_.rate;
        if (ctx.mode == Mode::Infer || rate == 0.0) {
            active_ = false;
            return in;
        }
        active_ = true;
        RngStream rng(mask_seed(ctx));
        mask_.assign(static_cast<size_t>(in.numel()), 1);
        Tensor<T> out(in.shape);
        const T scale = static_cast<T>(1.0 / (1.0 - rate));
        for (int64_t i = 0; i < in.numel(); ++i) {
            if (rng.uniform() < rate) {
                mask_[static_cast<size_t>(i)] = 0;
                out[i] = T(0);
            } else {
                out[i] = in[i] * scale;
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                       const Tensor<T>& out) override {
        if (!same_shape(grad_out, out))
            throw ValueError("dropout '" + this->spec_.name + "': gradient shape mismatch");
        if (!active_) return grad_out;
        Tensor<T> grad_in(in.shape);
        const T scale = static_cast<T>(1.0 / (1.0 - this->spec_.rate));
        for (int64_t i = 0; i < grad_out.numel(); ++i)
            grad_in[i] = mask_[static_cast<size_t>(i)] ? grad_out[i] * scale : T(0);
        return grad_in;
    }

    uint64_t mask_seed(const ForwardCtx& ctx) const {
        return mix_seed(mix_seed(ctx.seed, static_cast<uint64_t>(ctx.step)),
                        static_cast<uint64_t>(this->layer_index()) + 0x51edULL);
    }

private:
    std::vector<uint8_t> mask_;
    bool active_ = false;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec) {
    switch (spec.kind) {
        case LayerKind::Conv2d:
        case LayerKind::Conv3d: return std::make_unique<ConvLayer<T>>(spec);
        case LayerKind::MaxPool2d:
        case LayerKind::MaxPool3d: return std::make_unique<MaxPoolLayer<T>>(spec);
        case LayerKind::GlobalAvgPool: return std::make_unique<GlobalAvgPoolLayer<T>>(spec);
        case LayerKind::Dense:
        case LayerKind::SoftmaxOutput: return std::make_unique<DenseLayer<T>>(spec);
        case LayerKind::BatchNorm: return std::make_unique<BatchNormLayer<T>>(spec);
        case LayerKind::Dropout: return std::make_unique<DropoutLayer<T>>(spec);
    }
    throw ValueError("unknown layer kind");
}

}  // namespace bdae
