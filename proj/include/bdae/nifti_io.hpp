#pragma once

#include <array>
#include <string>

#include "bdae/tensor.hpp"

namespace bdae {

enum class Sequence { T1w, T2w, PDw };

inline const char* sequence_name(Sequence s) {
    switch (s) {
        case Sequence::T1w: return "T1w";
        case Sequence::T2w: return "T2w";
        case Sequence::PDw: return "PDw";
    }
    return "?";
}

Sequence parse_sequence(const std::string& name);

// One scalar MRI volume. Data is stored in on-disk index order, i.e.
// shape [Z, Y, X] with X varying fastest.
struct Volume {
    Tensor<float> data{Shape{1, 1, 1}};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel along x, y, z
    Sequence sequence = Sequence::T1w;
    std::string source;

    int64_t nx() const { return data.extent(2); }
    int64_t ny() const { return data.extent(1); }
    int64_t nz() const { return data.extent(0); }
    float& at(int64_t z, int64_t y, int64_t x) { return data.at(z, y, x); }
    float at(int64_t z, int64_t y, int64_t x) const { return data.at(z, y, x); }
};

// Reads a NIfTI-1 volume (.nii, .nii.gz, or .hdr/.img pair). Handles byte
// swapping, voxel scaling (scl_slope/scl_inter), and the five datatypes
// uint8/int16/int32/float32/float64. Throws IoError naming the offending
// header field on malformed input.
Volume read_nifti(const std::string& path);

// Writes a single-file float32 NIfTI-1 volume; gzip-compresses when the
// path ends in .gz.
void write_nifti(const Volume& v, const std::string& path);

}  // namespace bdae
