#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "bdae/nifti_io.hpp"

namespace bdae {

// Synthetic "developmental phantom": a head ellipsoid with a concentric
// myelination core whose size and contrast encode the age class. The class
// signal is split across the three sequences with per-sequence polarity
// (T1w core bright, T2w core dark, PDw midway), so single-sequence and
// fused inputs carry measurably different amounts of information.
struct PhantomSpec {
    std::array<int64_t, 3> extents{250, 250, 40};   // grid, x/y/z voxels
    std::array<double, 3> head_radii{95.0, 105.0, 30.0};  // ellipsoid semi-axes, voxels

    // Core radius for age class k: core_radius_base + core_radius_step * k.
    double core_radius_base = 10.0;
    double core_radius_step = 6.0;

    double base_intensity = 2.0;   // head tissue level (background stays 0)
    double core_contrast = 0.3;    // class-0 core offset magnitude
    double class_amplitude = 0.4;  // extra contrast per class step, scaled per sequence

    std::array<double, 3> sequence_weights{1.0, 1.0, 1.0};    // T1w, T2w, PDw signal share
    std::array<double, 3> sequence_polarity{1.0, -1.0, 0.5};  // core bright / dark / midway

    double contrast_jitter = 0.0;  // per-study, per-sequence multiplicative contrast noise (sd)
    double noise_sigma = 0.05;     // additive voxel noise inside the head
    double center_jitter = 5.0;    // max per-axis head-center shift, voxels
    double radius_jitter = 0.10;   // fractional core-radius variation per subject
};

// Rejects non-physical specs (negative noise, jitter outside [0,1), largest
// core not strictly inside the head ellipsoid, degenerate grid).
void validate_phantom_spec(const PhantomSpec& spec);

// Serializes a spec in run-config (INI) form, one [phantom] section.
std::string phantom_spec_ini(const PhantomSpec& spec);

// One study = the three sequence volumes (T1w, T2w, PDw in order).
// Head geometry (center shift, radius factor) derives from subject_seed, so
// one subject keeps the same anatomy across sessions; noise and contrast
// jitter derive from (subject_seed, session_seed). Fully deterministic.
std::array<Volume, 3> generate_study(int age_class, uint64_t subject_seed, uint64_t session_seed,
                                     const PhantomSpec& spec);

struct PhantomDatasetOptions {
    int subjects_per_class = 30;
    int sessions_per_subject = 1;
    bool mirror_paper = false;  // reproduce the reference cohort layout instead
    bool gzip = false;          // .nii.gz instead of .nii
    uint64_t seed = 1;
};

// Writes volumes under <out_dir>/images/, a manifest.csv with paths relative
// to the manifest, and the spec as phantom_spec.ini. Returns the manifest
// path. Subject ids encode class and index ("sub-c2n007"). In mirror mode
// the cohort has 84 subjects / 184 studies with class images 47/60/26/51.
std::string generate_dataset(const PhantomSpec& spec, const PhantomDatasetOptions& opt,
                             const std::string& out_dir);

}  // namespace bdae
