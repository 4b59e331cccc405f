#include "bdae/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "bdae/container.hpp"
#include "bdae/rng.hpp"

namespace bdae {

FuseMode parse_fuse_mode(const std::string& name) {
    if (name == "2d") return FuseMode::Mode2d;
    if (name == "2.5d") return FuseMode::Mode25d;
    if (name == "3d") return FuseMode::Mode3d;
    throw ValueError("unknown model mode '" + name + "' (expected 2d, 2.5d or 3d)");
}

const char* fuse_mode_name(FuseMode m) {
    switch (m) {
        case FuseMode::Mode2d: return "2d";
        case FuseMode::Mode25d: return "2.5d";
        case FuseMode::Mode3d: return "3d";
    }
    return "?";
}

Volume resample(const Volume& v, const std::array<int64_t, 3>& target_xyz) {
    const int64_t ix = v.nx(), iy = v.ny(), iz = v.nz();
    const int64_t ox = target_xyz[0], oy = target_xyz[1], oz = target_xyz[2];
    for (auto [have, want, axis] : {std::tuple{ix, ox, 'x'}, {iy, oy, 'y'}, {iz, oz, 'z'}})
        if (have < 2 || want < 2)
            throw ValueError(std::string("resample: degenerate ") + axis + " axis (" +
                             std::to_string(have) + " -> " + std::to_string(want) + ")");

    Volume out;
    out.sequence = v.sequence;
    out.source = v.source;
    // Corner-aligned index mapping; physical spacing scales by the extent
    // ratio so the field of view is preserved.
    for (int a = 0; a < 3; ++a) {
        double in_n = static_cast<double>((a == 0 ? ix : a == 1 ? iy : iz) - 1);
        double out_n = static_cast<double>(target_xyz[static_cast<size_t>(a)] - 1);
        out.spacing[static_cast<size_t>(a)] = v.spacing[static_cast<size_t>(a)] * in_n / out_n;
    }
    if (ix == ox && iy == oy && iz == oz) {
        out.data = v.data;
        return out;
    }

    out.data = Tensor<float>(Shape{oz, oy, ox});
    const double fx = static_cast<double>(ix - 1) / static_cast<double>(ox - 1);
    const double fy = static_cast<double>(iy - 1) / static_cast<double>(oy - 1);
    const double fz = static_cast<double>(iz - 1) / static_cast<double>(oz - 1);
    for (int64_t z = 0; z < oz; ++z) {
        double sz = static_cast<double>(z) * fz;
        int64_t z0 = std::min<int64_t>(static_cast<int64_t>(sz), iz - 2);
        double wz = sz - static_cast<double>(z0);
        for (int64_t y = 0; y < oy; ++y) {
            double sy = static_cast<double>(y) * fy;
            int64_t y0 = std::min<int64_t>(static_cast<int64_t>(sy), iy - 2);
            double wy = sy - static_cast<double>(y0);
            for (int64_t x = 0; x < ox; ++x) {
                double sx = static_cast<double>(x) * fx;
                int64_t x0 = std::min<int64_t>(static_cast<int64_t>(sx), ix - 2);
                double wx = sx - static_cast<double>(x0);
                double c00 = v.at(z0, y0, x0) * (1 - wx) + v.at(z0, y0, x0 + 1) * wx;
                double c01 = v.at(z0, y0 + 1, x0) * (1 - wx) + v.at(z0, y0 + 1, x0 + 1) * wx;
                double c10 = v.at(z0 + 1, y0, x0) * (1 - wx) + v.at(z0 + 1, y0, x0 + 1) * wx;
                double c11 = v.at(z0 + 1, y0 + 1, x0) * (1 - wx) + v.at(z0 + 1, y0 + 1, x0 + 1) * wx;
                double c0 = c00 * (1 - wy) + c01 * wy;
                double c1 = c10 * (1 - wy) + c11 * wy;
                out.data.at(z, y, x) = static_cast<float>(c0 * (1 - wz) + c1 * wz);
            }
        }
    }
    return out;
}

Tensor<float> center_crop(const Tensor<float>& t, const Shape& target) {
    if (target.size() != static_cast<size_t>(t.ndim()))
        throw ValueError("center_crop: target rank " + std::to_string(target.size()) +
                         " != input rank " + std::to_string(t.ndim()));
    std::vector<int64_t> offset(target.size());
    for (size_t a = 0; a < target.size(); ++a) {
        if (target[a] < 1 || target[a] > t.shape[a])
            throw ValueError("center_crop: target " + shape_str(target) + " exceeds input " +
                             shape_str(t.shape) + " on axis " + std::to_string(a));
        offset[a] = (t.shape[a] - target[a]) / 2;
    }
    Tensor<float> out(target);
    // Generic strided copy over up to 4 axes (all current uses).
    Shape in = t.shape;
    auto index_of = [&](const std::vector<int64_t>& ix) {
        int64_t flat = 0;
        for (size_t a = 0; a < in.size(); ++a) flat = flat * in[a] + ix[a] + offset[a];
        return flat;
    };
    std::vector<int64_t> ix(target.size(), 0);
    for (int64_t o = 0; o < out.numel(); ++o) {
        out[o] = t[index_of(ix)];
        for (int a = static_cast<int>(target.size()) - 1; a >= 0; --a) {
            if (++ix[static_cast<size_t>(a)] < target[static_cast<size_t>(a)]) break;
            ix[static_cast<size_t>(a)] = 0;
        }
    }
    return out;
}

void normalize_volume(Volume& v) {
    double sum = 0.0, sum2 = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < v.data.numel(); ++i) {
        float x = v.data[i];
        if (x != 0.0f) {
            sum += x;
            sum2 += static_cast<double>(x) * x;
            ++count;
        }
    }
    if (count == 0) return;  // all-zero volume is already normalized
    double mean = sum / static_cast<double>(count);
    double var = sum2 / static_cast<double>(count) - mean * mean;
    if (var < 1e-12) {
        v.data.zero();
        return;
    }
    double inv_sd = 1.0 / std::sqrt(var);
    for (int64_t i = 0; i < v.data.numel(); ++i) {
        float x = v.data[i];
        if (x == 0.0f) continue;  // background stays neutral
        double z = (x - mean) * inv_sd;
        v.data[i] = static_cast<float>(std::clamp(z, -5.0, 5.0));
    }
}

Sample fuse(const Volume& t1, const Volume& t2, const Volume& pd, FuseMode mode, int slab,
            int label, const std::string& subject_id, const std::string& session_id) {
    for (const Volume* v : {&t2, &pd})
        if (v->data.shape != t1.data.shape)
            throw ValueError("fuse: " + std::string(sequence_name(v->sequence)) + " grid " +
                             shape_str(v->data.shape) + " != T1w grid " + shape_str(t1.data.shape));
    const int64_t D = t1.nz(), H = t1.ny(), W = t1.nx();
    Sample s;
    s.label = label;
    s.subject_id = subject_id;
    s.session_id = session_id;
    const Volume* seq[3] = {&t1, &t2, &pd};

    if (mode == FuseMode::Mode3d) {
        s.tensor = Tensor<float>(Shape{3, D, H, W});
        for (int c = 0; c < 3; ++c)
            std::copy(seq[c]->data.ptr(), seq[c]->data.ptr() + D * H * W,
                      s.tensor.ptr() + c * D * H * W);
        return s;
    }

    if (slab < 1 || slab > static_cast<int>(D))
        throw ValueError("fuse: slab thickness " + std::to_string(slab) +
                         " outside 1.." + std::to_string(D));
    const int64_t z0 = D / 2 - slab / 2;  // central slice(s)
    s.tensor = Tensor<float>(Shape{3 * slab, H, W});
    int64_t c = 0;
    for (int q = 0; q < 3; ++q)
        for (int dz = 0; dz < slab; ++dz, ++c)
            std::copy(seq[q]->data.ptr() + (z0 + dz) * H * W,
                      seq[q]->data.ptr() + (z0 + dz + 1) * H * W, s.tensor.ptr() + c * H * W);
    return s;
}

Sample select_sequence(const Sample& s, int seq) {
    if (seq < 0 || seq > 2)
        throw ValueError("select_sequence: sequence index " + std::to_string(seq) +
                         " outside 0..2");
    const int64_t channels = s.tensor.extent(0);
    if (channels % 3 != 0)
        throw ValueError("select_sequence: " + std::to_string(channels) +
                         " channels do not split into three sequence blocks");
    const int64_t block = channels / 3;
    const int64_t per_channel = s.tensor.numel() / channels;
    Shape shape = s.tensor.shape;
    shape[0] = block;
    Sample out = s;
    out.tensor = Tensor<float>(shape);
    std::copy(s.tensor.ptr() + seq * block * per_channel,
              s.tensor.ptr() + (seq + 1) * block * per_channel, out.tensor.ptr());
    return out;
}

Sample flip_lr(const Sample& s) {
    Sample out = s;
    const int64_t W = s.tensor.shape.back();
    const int64_t rows = s.tensor.numel() / W;
    for (int64_t r = 0; r < rows; ++r) {
        const float* src = s.tensor.ptr() + r * W;
        float* dst = out.tensor.ptr() + r * W;
        for (int64_t x = 0; x < W; ++x) dst[x] = src[W - 1 - x];
    }
    out.provenance = s.provenance == "orig" ? "flip" : s.provenance + "+flip";
    return out;
}

Sample rotate_z(const Sample& s, double angle_degrees) {
    if (!(std::abs(angle_degrees) <= 90.0))
        throw ValueError("rotate_z: |angle| must be <= 90 degrees");
    Sample out = s;
    if (angle_degrees == 0.0) return out;
    const int64_t W = s.tensor.shape.back();
    const int64_t H = s.tensor.shape[s.tensor.shape.size() - 2];
    if (H < 2 || W < 2) throw ValueError("rotate_z: plane too small: " + shape_str(s.tensor.shape));
    const int64_t planes = s.tensor.numel() / (H * W);
    const double th = angle_degrees * 3.14159265358979323846 / 180.0;
    const double c = std::cos(th), sn = std::sin(th);
    const double cy = static_cast<double>(H - 1) / 2.0, cx = static_cast<double>(W - 1) / 2.0;

    for (int64_t p = 0; p < planes; ++p) {
        const float* src = s.tensor.ptr() + p * H * W;
        float* dst = out.tensor.ptr() + p * H * W;
        for (int64_t y = 0; y < H; ++y) {
            double dy = static_cast<double>(y) - cy;
            for (int64_t x = 0; x < W; ++x) {
                double dx = static_cast<double>(x) - cx;
                double sy = cy + c * dy + sn * dx;  // inverse rotation
                double sx = cx - sn * dy + c * dx;
                double val = 0.0;
                if (sy >= 0.0 && sy <= static_cast<double>(H - 1) && sx >= 0.0 &&
                    sx <= static_cast<double>(W - 1)) {
                    int64_t y0 = std::min<int64_t>(static_cast<int64_t>(sy), H - 2);
                    int64_t x0 = std::min<int64_t>(static_cast<int64_t>(sx), W - 2);
                    double wy = sy - static_cast<double>(y0), wx = sx - static_cast<double>(x0);
                    const float* r0 = src + y0 * W + x0;
                    val = r0[0] * (1 - wy) * (1 - wx) + r0[1] * (1 - wy) * wx +
                          r0[W] * wy * (1 - wx) + r0[W + 1] * wy * wx;
                }
                dst[y * W + x] = static_cast<float>(val);
            }
        }
    }
    char tag[32];
    std::snprintf(tag, sizeof(tag), "rot%+.1f", angle_degrees);
    out.provenance = s.provenance == "orig" ? tag : s.provenance + "+" + tag;
    return out;
}

std::vector<Sample> augment_expand(const std::vector<Sample>& train_samples,
                                   const AugmentPolicy& policy, uint64_t run_seed, int64_t epoch) {
    for (const auto& s : train_samples)
        if (s.from_validation)
            throw ValueError("augment: sample " + s.subject_id + "/" + s.session_id +
                             " belongs to the validation split");
    if (!policy.enabled) return train_samples;

    std::vector<Sample> out;
    out.reserve(train_samples.size() * 5);
    for (const auto& s : train_samples) {
        out.push_back(s);
        out.push_back(flip_lr(s));
        out.push_back(rotate_z(s, policy.static_angle));
        out.push_back(rotate_z(s, -policy.static_angle));
        uint64_t key = mix_seed(mix_seed(mix_seed(run_seed, fnv1a(s.subject_id)),
                                         fnv1a(s.session_id)),
                                static_cast<uint64_t>(epoch));
        RngStream rng(key);
        double mag = rng.uniform(policy.random_min, policy.random_max);
        double angle = rng.uniform() < 0.5 ? -mag : mag;
        out.push_back(rotate_z(s, angle));
    }
    return out;
}

Sample preprocess_volumes(const Volume& t1, const Volume& t2, const Volume& pd,
                          const PreprocessOptions& opt, FuseMode mode, int label,
                          const std::string& subject_id, const std::string& session_id) {
    const int slab = mode == FuseMode::Mode25d ? 5 : opt.slab;
    Volume seq[3] = {t1, t2, pd};
    for (auto& v : seq) {
        v = resample(v, opt.resample_to);
        if (opt.normalize) normalize_volume(v);
        v.data = center_crop(v.data, Shape{opt.crop_to[2], opt.crop_to[1], opt.crop_to[0]});
    }
    return fuse(seq[0], seq[1], seq[2], mode, slab, label, subject_id, session_id);
}

namespace {

std::string cache_key(const StudyRecord& rec, const PreprocessOptions& opt, FuseMode mode) {
    std::string desc = rec.subject_id + "|" + rec.session_id + "|" + fuse_mode_name(mode) + "|" +
                       std::to_string(mode == FuseMode::Mode25d ? 5 : opt.slab) + "|" +
                       std::to_string(opt.normalize);
    for (auto v : opt.resample_to) desc += "|" + std::to_string(v);
    for (auto v : opt.crop_to) desc += "|" + std::to_string(v);
    char hex[20];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a(desc)));
    return hex;
}

}  // namespace

Sample preprocess_study(const StudyRecord& rec, const PreprocessOptions& opt, FuseMode mode,
                        const std::string& cache_dir) {
    std::string cache_path;
    if (!cache_dir.empty()) {
        std::filesystem::create_directories(cache_dir);
        cache_path = (std::filesystem::path(cache_dir) / (cache_key(rec, opt, mode) + ".bin")).string();
        if (std::filesystem::exists(cache_path)) {
            auto tensors = load_tensor_archive(cache_path);
            if (tensors.size() == 1 && tensors[0].first == "fused") {
                Sample s;
                s.tensor = std::move(tensors[0].second);
                s.label = rec.age_class;
                s.subject_id = rec.subject_id;
                s.session_id = rec.session_id;
                return s;
            }
        }
    }

    Volume t1 = read_nifti(rec.t1w_path);
    t1.sequence = Sequence::T1w;
    Volume t2 = read_nifti(rec.t2w_path);
    t2.sequence = Sequence::T2w;
    Volume pd = read_nifti(rec.pdw_path);
    pd.sequence = Sequence::PDw;
    Sample s = preprocess_volumes(t1, t2, pd, opt, mode, rec.age_class, rec.subject_id,
                                  rec.session_id);
    if (!cache_path.empty()) save_tensor_archive(cache_path, {{"fused", &s.tensor}});
    return s;
}

}  // namespace bdae
