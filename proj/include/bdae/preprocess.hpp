#pragma once

#include <array>
#include <string>
#include <vector>

#include "bdae/dataset.hpp"
#include "bdae/nifti_io.hpp"
#include "bdae/tensor.hpp"

namespace bdae {

enum class FuseMode { Mode2d, Mode25d, Mode3d };

FuseMode parse_fuse_mode(const std::string& name);  // "2d" | "2.5d" | "3d"
const char* fuse_mode_name(FuseMode m);

// A model-ready input: fused channels plus label and provenance.
struct Sample {
    Tensor<float> tensor{Shape{1}};  // [C,H,W] for 2d/2.5d, [C,D,H,W] for 3d
    int label = 0;
    std::string subject_id;
    std::string session_id;
    std::string provenance = "orig";  // augmentation applied, if any
    bool from_validation = false;
};

struct PreprocessOptions {
    std::array<int64_t, 3> resample_to{250, 250, 40};  // x, y, z
    std::array<int64_t, 3> crop_to{150, 150, 20};      // x, y, z
    bool normalize = true;
    int slab = 1;  // central slices per sequence in 2d mode (2.5d forces 5)
};

struct AugmentPolicy {
    bool enabled = true;
    double static_angle = 15.0;   // the two fixed rotations, +/- this angle
    double random_min = 15.0;     // random rotation magnitude range
    double random_max = 65.0;
};

// Trilinear resampling in index space; grid corners map to grid corners.
Volume resample(const Volume& v, const std::array<int64_t, 3>& target_xyz);

// Center crop with offsets floor((in - target)/2) on every axis.
Tensor<float> center_crop(const Tensor<float>& t, const Shape& target);

// In-place z-score over the |value| > 0 mask, clamped to [-5, 5]. Exact
// zeros (background) stay zero; a zero-variance volume becomes all zeros.
void normalize_volume(Volume& v);

// Stacks three same-grid volumes into the channel axis. 3d keeps the full
// slab [3,D,H,W]; 2d/2.5d takes `slab` central slices per sequence,
// channels ordered T1w block, T2w block, PDw block.
Sample fuse(const Volume& t1, const Volume& t2, const Volume& pd, FuseMode mode, int slab,
            int label, const std::string& subject_id, const std::string& session_id);

// Restricts a fused sample to one sequence's contiguous channel block
// (0 = T1w, 1 = T2w, 2 = PDw) for single-sequence experiments.
Sample select_sequence(const Sample& s, int seq);

// Reverses the left-right (fastest-varying in-plane) axis of every channel.
Sample flip_lr(const Sample& s);

// In-plane rotation about the slice center, bilinear, zero fill. |angle|<=90.
Sample rotate_z(const Sample& s, double angle_degrees);

// Per input emits: original, L/R flip, the two static rotations, and one
// random rotation with magnitude uniform in [random_min, random_max]. The
// random angle derives from (run seed, subject, session, epoch) only.
std::vector<Sample> augment_expand(const std::vector<Sample>& train_samples,
                                   const AugmentPolicy& policy, uint64_t run_seed, int64_t epoch);

// Full chain for one study: read -> resample -> normalize -> crop -> fuse.
// With a cache directory, the fused tensor is stored/reused on disk keyed by
// a hash of the study identity and the preprocessing options.
Sample preprocess_study(const StudyRecord& rec, const PreprocessOptions& opt, FuseMode mode,
                        const std::string& cache_dir = "");

// Applies the validation chain to already-loaded volumes (no augmentation).
Sample preprocess_volumes(const Volume& t1, const Volume& t2, const Volume& pd,
                          const PreprocessOptions& opt, FuseMode mode, int label,
                          const std::string& subject_id, const std::string& session_id);

}  // namespace bdae
