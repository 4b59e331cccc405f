#include "bdae/nifti_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "bdae/errors.hpp"

namespace bdae {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;     // offset 0: must be 348
    char data_type[10];     // 4
    char db_name[18];       // 14
    int32_t extents;        // 32
    int16_t session_error;  // 36
    char regular;           // 38
    char dim_info;          // 39
    int16_t dim[8];         // 40: dim[0] = rank, dim[1..7] = extents
    float intent_p1;        // 56
    float intent_p2;        // 60
    float intent_p3;        // 64
    int16_t intent_code;    // 68
    int16_t datatype;       // 70
    int16_t bitpix;         // 72
    int16_t slice_start;    // 74
    float pixdim[8];        // 76: pixdim[1..3] = voxel size
    float vox_offset;       // 108
    float scl_slope;        // 112
    float scl_inter;        // 116
    int16_t slice_end;      // 120
    char slice_code;        // 122
    char xyzt_units;        // 123
    float cal_max;          // 124
    float cal_min;          // 128
    float slice_duration;   // 132
    float toffset;          // 136
    int32_t glmax;          // 140
    int32_t glmin;          // 144
    char descrip[80];       // 148
    char aux_file[24];      // 228
    int16_t qform_code;     // 252
    int16_t sform_code;     // 254
    float quatern_b;        // 256
    float quatern_c;        // 260
    float quatern_d;        // 264
    float qoffset_x;        // 268
    float qoffset_y;        // 272
    float qoffset_z;        // 276
    float srow_x[4];        // 280
    float srow_y[4];        // 296
    float srow_z[4];        // 312
    char intent_name[16];   // 328
    char magic[4];          // 344: "n+1\0" or "ni1\0"
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must pack to 348 bytes");

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtInt32 = 8;
constexpr int16_t kDtFloat32 = 16;
constexpr int16_t kDtFloat64 = 64;

void swap_bytes(void* p, size_t width) {
    auto* b = static_cast<uint8_t*>(p);
    for (size_t i = 0; i < width / 2; ++i) std::swap(b[i], b[width - 1 - i]);
}

template <typename T>
void swap_value(T& v) {
    swap_bytes(&v, sizeof(T));
}

void swap_header(Nifti1Header& h) {
    swap_value(h.sizeof_hdr);
    swap_value(h.extents);
    swap_value(h.session_error);
    for (auto& d : h.dim) swap_value(d);
    swap_value(h.intent_p1);
    swap_value(h.intent_p2);
    swap_value(h.intent_p3);
    swap_value(h.intent_code);
    swap_value(h.datatype);
    swap_value(h.bitpix);
    swap_value(h.slice_start);
    for (auto& p : h.pixdim) swap_value(p);
    swap_value(h.vox_offset);
    swap_value(h.scl_slope);
    swap_value(h.scl_inter);
    swap_value(h.slice_end);
    swap_value(h.cal_max);
    swap_value(h.cal_min);
    swap_value(h.slice_duration);
    swap_value(h.toffset);
    swap_value(h.glmax);
    swap_value(h.glmin);
    swap_value(h.qform_code);
    swap_value(h.sform_code);
    swap_value(h.quatern_b);
    swap_value(h.quatern_c);
    swap_value(h.quatern_d);
    swap_value(h.qoffset_x);
    swap_value(h.qoffset_y);
    swap_value(h.qoffset_z);
    for (auto& v : h.srow_x) swap_value(v);
    for (auto& v : h.srow_y) swap_value(v);
    for (auto& v : h.srow_z) swap_value(v);
}

class GzFile {
public:
    GzFile(const std::string& path, const char* mode) : path_(path), f_(gzopen(path.c_str(), mode)) {
        if (!f_) throw IoError("cannot open '" + path + "'");
    }
    ~GzFile() {
        if (f_) gzclose(f_);
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;

    void read_exact(void* dst, size_t n, const std::string& what) {
        size_t got = 0;
        auto* p = static_cast<uint8_t*>(dst);
        while (got < n) {
            unsigned chunk = static_cast<unsigned>(std::min<size_t>(n - got, 1u << 28));
            int r = gzread(f_, p + got, chunk);
            if (r <= 0) throw IoError("'" + path_ + "': " + what + " truncated");
            got += static_cast<size_t>(r);
        }
    }

    void skip(size_t n, const std::string& what) {
        std::vector<uint8_t> scratch(std::min<size_t>(n, 1 << 16));
        size_t left = n;
        while (left > 0) {
            size_t chunk = std::min(left, scratch.size());
            read_exact(scratch.data(), chunk, what);
            left -= chunk;
        }
    }

    void write_all(const void* src, size_t n) {
        if (gzwrite(f_, src, static_cast<unsigned>(n)) != static_cast<int>(n))
            throw IoError("write failed for '" + path_ + "'");
    }

private:
    std::string path_;
    gzFile f_;
};

// For a header-pair file ("ni1" magic) the payload lives in a sibling .img.
std::string sibling_img_path(const std::string& path) {
    std::string p = path;
    bool gz = p.size() > 3 && p.compare(p.size() - 3, 3, ".gz") == 0;
    if (gz) p.resize(p.size() - 3);
    size_t dot = p.rfind('.');
    if (dot != std::string::npos) p.resize(dot);
    p += ".img";
    if (gz) p += ".gz";
    return p;
}

template <typename Raw>
void decode_voxels(GzFile& f, Tensor<float>& out, bool swap, double slope, double inter,
                   const std::string& path) {
    const int64_t n = out.numel();
    std::vector<Raw> raw(static_cast<size_t>(n));
    f.read_exact(raw.data(), raw.size() * sizeof(Raw), "voxel payload");
    if (swap && sizeof(Raw) > 1)
        for (auto& v : raw) swap_bytes(&v, sizeof(Raw));
    const bool scale = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    for (int64_t i = 0; i < n; ++i) {
        double v = static_cast<double>(raw[static_cast<size_t>(i)]);
        if (scale) v = v * slope + inter;
        if (!std::isfinite(v))
            throw IoError("'" + path + "': non-finite voxel value at index " + std::to_string(i));
        out[i] = static_cast<float>(v);
    }
}

}  // namespace

Sequence parse_sequence(const std::string& name) {
    if (name == "T1w" || name == "t1w" || name == "T1") return Sequence::T1w;
    if (name == "T2w" || name == "t2w" || name == "T2") return Sequence::T2w;
    if (name == "PDw" || name == "pdw" || name == "PD") return Sequence::PDw;
    throw ValueError("unknown MRI sequence '" + name + "' (expected T1w, T2w or PDw)");
}

Volume read_nifti(const std::string& path) {
    GzFile f(path, "rb");
    Nifti1Header h{};
    f.read_exact(&h, sizeof(h), "header");

    // Files written on a big-endian host have dim[0] outside 1..7 when read
    // natively; everything 2- and 4-byte wide must then be swapped.
    bool swapped = h.dim[0] < 1 || h.dim[0] > 7;
    if (swapped) swap_header(h);
    if (h.sizeof_hdr != 348)
        throw IoError("'" + path + "': sizeof_hdr is " + std::to_string(h.sizeof_hdr) +
                      ", expected 348");
    if (h.dim[0] < 1 || h.dim[0] > 7)
        throw IoError("'" + path + "': dim[0] = " + std::to_string(h.dim[0]) +
                      " out of range in either byte order");

    bool single_file;
    if (std::memcmp(h.magic, "n+1", 4) == 0)
        single_file = true;
    else if (std::memcmp(h.magic, "ni1", 4) == 0)
        single_file = false;
    else
        throw IoError("'" + path + "': magic is not 'n+1' or 'ni1'");

    switch (h.datatype) {
        case kDtUint8:
        case kDtInt16:
        case kDtInt32:
        case kDtFloat32:
        case kDtFloat64: break;
        default:
            throw IoError("'" + path + "': unsupported datatype code " + std::to_string(h.datatype));
    }

    // Only 3D grids; a singleton fourth axis (common for scanner exports) is
    // squeezed away.
    int rank = h.dim[0];
    if (rank == 4 && h.dim[4] == 1) rank = 3;
    if (rank != 3)
        throw IoError("'" + path + "': dim describes a " + std::to_string(h.dim[0]) +
                      "D volume; only 3D (or 4D with a singleton fourth axis) is supported");
    int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
    if (nx < 1 || ny < 1 || nz < 1)
        throw IoError("'" + path + "': dim has non-positive extent " + std::to_string(nx) + "x" +
                      std::to_string(ny) + "x" + std::to_string(nz));

    Volume vol;
    vol.source = path;
    vol.data = Tensor<float>(Shape{nz, ny, nx});
    for (int a = 0; a < 3; ++a) {
        float pd = h.pixdim[a + 1];
        if (std::isnan(pd) || pd < 0.0f)
            throw IoError("'" + path + "': pixdim[" + std::to_string(a + 1) + "] is negative or NaN");
        vol.spacing[static_cast<size_t>(a)] = pd > 0.0f ? static_cast<double>(pd) : 1.0;
    }

    double slope = h.scl_slope, inter = h.scl_inter;
    auto read_payload = [&](GzFile& src, int64_t offset) {
        if (offset > 0) src.skip(static_cast<size_t>(offset), "pre-data gap");
        switch (h.datatype) {
            case kDtUint8: decode_voxels<uint8_t>(src, vol.data, swapped, slope, inter, path); break;
            case kDtInt16: decode_voxels<int16_t>(src, vol.data, swapped, slope, inter, path); break;
            case kDtInt32: decode_voxels<int32_t>(src, vol.data, swapped, slope, inter, path); break;
            case kDtFloat32: decode_voxels<float>(src, vol.data, swapped, slope, inter, path); break;
            case kDtFloat64: decode_voxels<double>(src, vol.data, swapped, slope, inter, path); break;
            default: break;
        }
    };

    if (single_file) {
        int64_t off = static_cast<int64_t>(h.vox_offset);
        if (off < 348)
            throw IoError("'" + path + "': vox_offset " + std::to_string(off) +
                          " < 348 in a single-file volume");
        read_payload(f, off - static_cast<int64_t>(sizeof(h)));
    } else {
        GzFile img(sibling_img_path(path), "rb");
        read_payload(img, static_cast<int64_t>(h.vox_offset));
    }
    return vol;
}

void write_nifti(const Volume& v, const std::string& path) {
    if (v.data.ndim() != 3) throw ValueError("write: volume data must be 3D");
    for (double s : v.spacing)
        if (!(s > 0.0)) throw ValueError("write: non-positive voxel spacing");
    if (!v.data.all_finite()) throw ValueError("write: volume contains non-finite voxels");
    if (v.nx() > 0x7fff || v.ny() > 0x7fff || v.nz() > 0x7fff)
        throw ValueError("write: extent exceeds the NIfTI-1 16-bit dim limit");

    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<int16_t>(v.nx());
    h.dim[2] = static_cast<int16_t>(v.ny());
    h.dim[3] = static_cast<int16_t>(v.nz());
    for (int a = 4; a < 8; ++a) h.dim[a] = 1;
    h.datatype = kDtFloat32;
    h.bitpix = 32;
    h.pixdim[0] = 1.0f;
    for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(v.spacing[static_cast<size_t>(a)]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    std::snprintf(h.descrip, sizeof(h.descrip), "bdae %s volume", sequence_name(v.sequence));
    std::memcpy(h.magic, "n+1", 4);

    bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
    GzFile f(path, gz ? "wb6" : "wbT");  // "T" stores raw bytes for plain .nii
    f.write_all(&h, sizeof(h));
    const char pad[4] = {0, 0, 0, 0};  // no header extensions
    f.write_all(pad, sizeof(pad));
    f.write_all(v.data.ptr(), sizeof(float) * static_cast<size_t>(v.data.numel()));
}

}  // namespace bdae
