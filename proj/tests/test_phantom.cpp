// Phantom generator: determinism, contrast polarity, class recoverability by
// hand-written oracles, and dataset/manifest emission.

#include "bdae/phantom.hpp"

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bdae/dataset.hpp"
#include "bdae/rng.hpp"
#include "harness.hpp"

using namespace bdae;
namespace fs = std::filesystem;

namespace {

// Desk-sized spec: same structure as the default, shrunk in-plane.
PhantomSpec small_spec() {
    PhantomSpec spec;
    spec.extents = {120, 120, 40};
    spec.head_radii = {45.0, 50.0, 30.0};
    return spec;
}

double region_mean(const Volume& v, double cx, double cy, double cz, double radius) {
    double sum = 0.0;
    int64_t n = 0;
    double r2 = radius * radius;
    for (int64_t z = 0; z < v.nz(); ++z)
        for (int64_t y = 0; y < v.ny(); ++y)
            for (int64_t x = 0; x < v.nx(); ++x) {
                double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz);
                if (d2 <= r2) {
                    sum += v.at(z, y, x);
                    ++n;
                }
            }
    return sum / static_cast<double>(n);
}

// Radius oracle: threshold the T1w volume at base + half the class-0
// contrast, take the slice with the largest core cross-section, and invert
// the disc area. Independent of the generator's geometry bookkeeping.
double estimate_core_radius(const Volume& t1, const PhantomSpec& spec) {
    float thresh = static_cast<float>(spec.base_intensity + spec.core_contrast / 2.0);
    int64_t best = 0;
    for (int64_t z = 0; z < t1.nz(); ++z) {
        int64_t count = 0;
        for (int64_t y = 0; y < t1.ny(); ++y)
            for (int64_t x = 0; x < t1.nx(); ++x)
                if (t1.at(z, y, x) > thresh) ++count;
        best = std::max(best, count);
    }
    return std::sqrt(static_cast<double>(best) / 3.14159265358979323846);
}

int classify_by_radius(double r_hat, const PhantomSpec& spec) {
    int best = 0;
    double best_d = 1e30;
    for (int k = 0; k < 4; ++k) {
        double d = std::abs(r_hat - (spec.core_radius_base + spec.core_radius_step * k));
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

bool same_voxels(const Volume& a, const Volume& b) {
    if (a.data.shape != b.data.shape) return false;
    for (int64_t i = 0; i < a.data.numel(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("bdae_ph_" + tag + "_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("generate_study: deterministic, subject-keyed anatomy") {
    PhantomSpec spec = small_spec();
    auto a = generate_study(2, 111, 5, spec);
    auto b = generate_study(2, 111, 5, spec);
    for (int q = 0; q < 3; ++q) CHECK(same_voxels(a[q], b[q]));
    CHECK(a[0].sequence == Sequence::T1w);
    CHECK(a[1].sequence == Sequence::T2w);
    CHECK(a[2].sequence == Sequence::PDw);

    // Same subject, new session: identical head mask, different noise.
    auto c = generate_study(2, 111, 6, spec);
    bool mask_equal = true, values_equal = true;
    for (int64_t i = 0; i < a[0].data.numel(); ++i) {
        mask_equal &= (a[0].data[i] == 0.0f) == (c[0].data[i] == 0.0f);
        values_equal &= a[0].data[i] == c[0].data[i];
    }
    CHECK(mask_equal);
    CHECK(!values_equal);

    // New subject: the anatomy itself moves.
    auto d = generate_study(2, 112, 5, spec);
    bool mask_same = true;
    for (int64_t i = 0; i < a[0].data.numel(); ++i)
        mask_same &= (a[0].data[i] == 0.0f) == (d[0].data[i] == 0.0f);
    CHECK(!mask_same);

    CHECK_THROWS(generate_study(4, 1, 1, spec), ValueError);
    CHECK_THROWS(generate_study(-1, 1, 1, spec), ValueError);
}

TEST_CASE("sequence polarity and class contrast, noise off") {
    PhantomSpec spec = small_spec();
    spec.noise_sigma = 0.0;

    // Region probes at the known (unjittered) center are refined with the
    // subject's actual center via the head bounding box.
    auto center_of = [](const Volume& v) {
        double sx = 0, sy = 0, sz = 0, n = 0;
        for (int64_t z = 0; z < v.nz(); ++z)
            for (int64_t y = 0; y < v.ny(); ++y)
                for (int64_t x = 0; x < v.nx(); ++x)
                    if (v.at(z, y, x) != 0.0f) {
                        sx += x;
                        sy += y;
                        sz += z;
                        n += 1;
                    }
        return std::array<double, 3>{sx / n, sy / n, sz / n};
    };

    for (int k : {0, 3}) {
        auto vols = generate_study(k, 400 + static_cast<uint64_t>(k), 1, spec);
        auto c = center_of(vols[0]);
        double r_core = spec.core_radius_base * 0.5;  // deep inside every core
        double t1_core = region_mean(vols[0], c[0], c[1], c[2], r_core);
        double t2_core = region_mean(vols[1], c[0], c[1], c[2], r_core);
        double pd_core = region_mean(vols[2], c[0], c[1], c[2], r_core);
        // Shell probe: offset left of the core but inside the head.
        double shell_x = c[0] - spec.head_radii[0] * 0.75;
        double t1_shell = region_mean(vols[0], shell_x, c[1], c[2], 3.0);
        double t2_shell = region_mean(vols[1], shell_x, c[1], c[2], 3.0);

        CHECK(t1_core > t1_shell);  // T1w: core bright
        CHECK(t2_core < t2_shell);  // T2w: core dark
        // PDw sits midway: positive contrast, half the T1w magnitude.
        CHECK(pd_core > spec.base_intensity);
        CHECK_CLOSE(pd_core - spec.base_intensity, (t1_core - spec.base_intensity) * 0.5, 1e-4);
    }

    // Myelination grows with class: the class-3 core is brighter in T1w than
    // the same region of a class-0 subject (identical anatomy seed).
    auto a0 = generate_study(0, 500, 1, spec);
    auto a3 = generate_study(3, 500, 1, spec);
    auto c = center_of(a3[0]);
    double r3 = spec.core_radius_base + 3 * spec.core_radius_step;
    CHECK(region_mean(a3[0], c[0], c[1], c[2], r3 * 0.85) >
          region_mean(a0[0], c[0], c[1], c[2], r3 * 0.85));
}

TEST_CASE("radius oracle recovers every class exactly, noise off") {
    PhantomSpec spec = small_spec();
    spec.noise_sigma = 0.0;
    for (int k = 0; k < 4; ++k)
        for (uint64_t subject = 0; subject < 5; ++subject) {
            auto vols = generate_study(k, 900 + subject * 17, 1, spec);
            double r_hat = estimate_core_radius(vols[0], spec);
            CHECK(classify_by_radius(r_hat, spec) == k);

            // The core reaches the central slice (the 2D slab keeps signal).
            float thresh = static_cast<float>(spec.base_intensity + spec.core_contrast / 2.0);
            int64_t central = 0;
            const Volume& t1 = vols[0];
            for (int64_t y = 0; y < t1.ny(); ++y)
                for (int64_t x = 0; x < t1.nx(); ++x)
                    if (t1.at(t1.nz() / 2, y, x) > thresh) ++central;
            CHECK(central > 0);
        }
}

TEST_CASE("nearest-centroid baseline beats 0.8 accuracy at default noise") {
    PhantomSpec spec = small_spec();  // default noise sigma and jitter
    const double probe_r = spec.core_radius_base + spec.core_radius_step;

    auto feature = [&](const std::array<Volume, 3>& vols) {
        std::array<double, 3> f{};
        double cx = (spec.extents[0] - 1) / 2.0, cy = (spec.extents[1] - 1) / 2.0,
               cz = (spec.extents[2] - 1) / 2.0;
        for (int q = 0; q < 3; ++q) f[static_cast<size_t>(q)] = region_mean(vols[static_cast<size_t>(q)], cx, cy, cz, probe_r);
        return f;
    };

    std::array<std::array<double, 3>, 4> centroid{};
    const int n_train = 6, n_test = 6;
    for (int k = 0; k < 4; ++k) {
        for (int i = 0; i < n_train; ++i) {
            auto f = feature(generate_study(k, mix_seed(7000, static_cast<uint64_t>(k * 100 + i)), 1, spec));
            for (int q = 0; q < 3; ++q) centroid[static_cast<size_t>(k)][static_cast<size_t>(q)] += f[static_cast<size_t>(q)] / n_train;
        }
    }
    int correct = 0, total = 0;
    for (int k = 0; k < 4; ++k)
        for (int i = 0; i < n_test; ++i) {
            auto f = feature(generate_study(k, mix_seed(9000, static_cast<uint64_t>(k * 100 + i)), 1, spec));
            int best = 0;
            double best_d = 1e30;
            for (int j = 0; j < 4; ++j) {
                double d = 0;
                for (int q = 0; q < 3; ++q) {
                    double diff = f[static_cast<size_t>(q)] - centroid[static_cast<size_t>(j)][static_cast<size_t>(q)];
                    d += diff * diff;
                }
                if (d < best_d) {
                    best_d = d;
                    best = j;
                }
            }
            correct += best == k;
            ++total;
        }
    CHECK(static_cast<double>(correct) / total >= 0.8);
}

TEST_CASE("generate_dataset: cardinality and manifest loading") {
    TempDir dir("cards");
    PhantomSpec spec;
    spec.extents = {64, 64, 16};
    spec.head_radii = {24.0, 26.0, 12.0};
    spec.core_radius_base = 4.0;
    spec.core_radius_step = 2.0;
    spec.center_jitter = 2.0;

    PhantomDatasetOptions opt;
    opt.subjects_per_class = 2;
    opt.sessions_per_subject = 2;
    opt.seed = 3;
    std::string manifest = generate_dataset(spec, opt, (dir.path / "ds").string());

    StudyTable table = load_manifest(manifest);  // verifies all files exist
    CHECK(table.n_studies() == 16);              // 4 classes x 2 subjects x 2 sessions
    CHECK(table.n_subjects() == 8);
    size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path / "ds" / "images"))
        ++files;
    CHECK(files == 48);
    CHECK(fs::exists(dir.path / "ds" / "phantom_spec.ini"));
    CHECK(table.studies[0].subject_id == "sub-c0n001");

    std::string ini = slurp(dir.path / "ds" / "phantom_spec.ini");
    CHECK(ini.rfind("[phantom]", 0) == 0);
    CHECK(ini.find("noise_sigma = 0.05") != std::string::npos);
}

TEST_CASE("generate_dataset: paper-mirror cohort and byte determinism") {
    TempDir dir("mirror");
    PhantomSpec spec;
    spec.extents = {64, 64, 16};
    spec.head_radii = {24.0, 26.0, 12.0};
    spec.core_radius_base = 4.0;
    spec.core_radius_step = 2.0;
    spec.center_jitter = 2.0;

    PhantomDatasetOptions opt;
    opt.mirror_paper = true;
    opt.seed = 11;
    std::string m1 = generate_dataset(spec, opt, (dir.path / "a").string());

    StudyTable table = load_manifest(m1);
    CohortSummary sum = cohort_summary(table);
    CHECK(sum.total_studies == 184);
    CHECK(sum.total_subjects == 84);
    CHECK(sum.study_counts[0] == 47);
    CHECK(sum.study_counts[1] == 60);
    CHECK(sum.study_counts[2] == 26);
    CHECK(sum.study_counts[3] == 51);

    std::string m2 = generate_dataset(spec, opt, (dir.path / "b").string());
    CHECK(slurp(m1) == slurp(m2));
    CHECK(slurp(dir.path / "a" / "images" / "sub-c1n004_ses-2_T2w.nii") ==
          slurp(dir.path / "b" / "images" / "sub-c1n004_ses-2_T2w.nii"));

    PhantomDatasetOptions other = opt;
    other.seed = 12;
    std::string m3 = generate_dataset(spec, other, (dir.path / "c").string());
    CHECK(slurp(dir.path / "a" / "images" / "sub-c1n004_ses-2_T2w.nii") !=
          slurp(dir.path / "c" / "images" / "sub-c1n004_ses-2_T2w.nii"));
}

TEST_CASE("phantom spec validation") {
    PhantomSpec ok = small_spec();
    validate_phantom_spec(ok);

    PhantomSpec bad = ok;
    bad.noise_sigma = -0.1;
    CHECK_THROWS(validate_phantom_spec(bad), ValueError);

    bad = ok;
    bad.head_radii = {20.0, 20.0, 20.0};  // class-3 core (28) no longer fits
    CHECK_THROWS(validate_phantom_spec(bad), ValueError);

    bad = ok;
    bad.radius_jitter = 1.0;
    CHECK_THROWS(validate_phantom_spec(bad), ValueError);

    bad = ok;
    bad.extents = {4, 120, 40};
    CHECK_THROWS(validate_phantom_spec(bad), ValueError);

    bad = ok;
    bad.sequence_weights = {1.0, -0.5, 1.0};
    CHECK_THROWS(validate_phantom_spec(bad), ValueError);

    PhantomDatasetOptions opt;
    opt.subjects_per_class = 0;
    CHECK_THROWS(generate_dataset(ok, opt, "/tmp/unused"), ValueError);
}

HARNESS_MAIN
