#include "bdae/phantom.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "bdae/errors.hpp"
#include "bdae/rng.hpp"

namespace bdae {

void validate_phantom_spec(const PhantomSpec& spec) {
    for (auto e : spec.extents)
        if (e < 8) throw ValueError("phantom: grid extent " + std::to_string(e) + " < 8");
    for (auto r : spec.head_radii)
        if (r < 4.0) throw ValueError("phantom: head radius must be >= 4 voxels");
    if (spec.core_radius_base <= 0.0 || spec.core_radius_step < 0.0)
        throw ValueError("phantom: core radius base must be > 0 and step >= 0");
    double r3 = spec.core_radius_base + 3.0 * spec.core_radius_step;
    double head_min = *std::min_element(spec.head_radii.begin(), spec.head_radii.end());
    if (r3 >= head_min)
        throw ValueError("phantom: class-3 core radius " + std::to_string(r3) +
                         " must be smaller than the minimal head radius " +
                         std::to_string(head_min));
    if (spec.base_intensity <= 0.0) throw ValueError("phantom: base intensity must be > 0");
    if (spec.noise_sigma < 0.0) throw ValueError("phantom: noise sigma must be >= 0");
    if (spec.contrast_jitter < 0.0) throw ValueError("phantom: contrast jitter must be >= 0");
    if (spec.center_jitter < 0.0) throw ValueError("phantom: center jitter must be >= 0");
    if (spec.radius_jitter < 0.0 || spec.radius_jitter >= 1.0)
        throw ValueError("phantom: radius jitter must be in [0, 1)");
    for (auto w : spec.sequence_weights)
        if (w < 0.0) throw ValueError("phantom: sequence weights must be >= 0");
}

std::string phantom_spec_ini(const PhantomSpec& spec) {
    char buf[1024];
    std::snprintf(buf, sizeof(buf),
                  "[phantom]\n"
                  "extents = %lld %lld %lld\n"
                  "head_radii = %g %g %g\n"
                  "core_radius_base = %g\n"
                  "core_radius_step = %g\n"
                  "base_intensity = %g\n"
                  "core_contrast = %g\n"
                  "class_amplitude = %g\n"
                  "sequence_weights = %g %g %g\n"
                  "sequence_polarity = %g %g %g\n"
                  "contrast_jitter = %g\n"
                  "noise_sigma = %g\n"
                  "center_jitter = %g\n"
                  "radius_jitter = %g\n",
                  static_cast<long long>(spec.extents[0]), static_cast<long long>(spec.extents[1]),
                  static_cast<long long>(spec.extents[2]), spec.head_radii[0], spec.head_radii[1],
                  spec.head_radii[2], spec.core_radius_base, spec.core_radius_step,
                  spec.base_intensity, spec.core_contrast, spec.class_amplitude,
                  spec.sequence_weights[0], spec.sequence_weights[1], spec.sequence_weights[2],
                  spec.sequence_polarity[0], spec.sequence_polarity[1], spec.sequence_polarity[2],
                  spec.contrast_jitter, spec.noise_sigma, spec.center_jitter, spec.radius_jitter);
    return buf;
}

std::array<Volume, 3> generate_study(int age_class, uint64_t subject_seed, uint64_t session_seed,
                                     const PhantomSpec& spec) {
    validate_phantom_spec(spec);
    if (age_class < 0 || age_class > 3)
        throw ValueError("phantom: age class " + std::to_string(age_class) + " outside 0..3");

    const int64_t nx = spec.extents[0], ny = spec.extents[1], nz = spec.extents[2];

    // Anatomy is a property of the subject: center shift and radius factor
    // come from subject_seed alone.
    RngStream geom(mix_seed(subject_seed, 0x67656f6dULL));
    double cx = (nx - 1) / 2.0 + geom.uniform(-spec.center_jitter, spec.center_jitter);
    double cy = (ny - 1) / 2.0 + geom.uniform(-spec.center_jitter, spec.center_jitter);
    double cz = (nz - 1) / 2.0 + geom.uniform(-spec.center_jitter, spec.center_jitter);
    double rfac = geom.uniform(1.0 - spec.radius_jitter, 1.0 + spec.radius_jitter);
    double core_r = (spec.core_radius_base + spec.core_radius_step * age_class) * rfac;
    double core_r2 = core_r * core_r;

    std::array<Volume, 3> study;
    const Sequence seqs[3] = {Sequence::T1w, Sequence::T2w, Sequence::PDw};
    for (int q = 0; q < 3; ++q) {
        RngStream noise(mix_seed(mix_seed(subject_seed, session_seed),
                                 0x7365712dULL + static_cast<uint64_t>(q)));
        double gamma = noise.normal() * spec.contrast_jitter;
        double contrast = spec.sequence_polarity[static_cast<size_t>(q)] *
                          (spec.core_contrast +
                           spec.sequence_weights[static_cast<size_t>(q)] * spec.class_amplitude *
                               age_class) *
                          (1.0 + gamma);

        Volume& v = study[static_cast<size_t>(q)];
        v.sequence = seqs[q];
        v.spacing = {1.0, 1.0, 3.0};
        v.data = Tensor<float>(Shape{nz, ny, nx});
        float* out = v.data.ptr();
        for (int64_t z = 0; z < nz; ++z) {
            double dz = z - cz;
            double ez = dz / spec.head_radii[2];
            for (int64_t y = 0; y < ny; ++y) {
                double dy = y - cy;
                double ey = dy / spec.head_radii[1];
                double plane = ez * ez + ey * ey;
                double d2_yz = dz * dz + dy * dy;
                for (int64_t x = 0; x < nx; ++x, ++out) {
                    double dx = x - cx;
                    double ex = dx / spec.head_radii[0];
                    if (plane + ex * ex > 1.0) {
                        *out = 0.0f;  // background
                        continue;
                    }
                    double val = spec.base_intensity;
                    if (d2_yz + dx * dx <= core_r2) val += contrast;
                    if (spec.noise_sigma > 0.0) val += spec.noise_sigma * noise.normal();
                    *out = static_cast<float>(val);
                }
            }
        }
    }
    return study;
}

namespace {

struct SessionPlan {
    int subjects;
    int sessions;
};

// Session layout reproducing the reference cohort: per class, (subjects x
// sessions) groups summing to image counts 47/60/26/51 over 84 subjects.
const std::array<std::vector<SessionPlan>, 4> kMirrorPlan{{
    {{13, 2}, {7, 3}},   // class 0: 20 subjects, 47 studies
    {{15, 2}, {10, 3}},  // class 1: 25 subjects, 60 studies
    {{12, 2}, {2, 1}},   // class 2: 14 subjects, 26 studies
    {{24, 2}, {1, 3}},   // class 3: 25 subjects, 51 studies
}};

void write_study(const std::array<Volume, 3>& vols, const std::filesystem::path& images,
                 const std::string& subject_id, const std::string& session_id, bool gzip,
                 std::string rel[3]) {
    const char* tags[3] = {"T1w", "T2w", "PDw"};
    for (int q = 0; q < 3; ++q) {
        std::string name =
            subject_id + "_" + session_id + "_" + tags[q] + (gzip ? ".nii.gz" : ".nii");
        write_nifti(vols[static_cast<size_t>(q)], (images / name).string());
        rel[q] = "images/" + name;
    }
}

}  // namespace

std::string generate_dataset(const PhantomSpec& spec, const PhantomDatasetOptions& opt,
                             const std::string& out_dir) {
    validate_phantom_spec(spec);
    if (!opt.mirror_paper && (opt.subjects_per_class < 1 || opt.sessions_per_subject < 1))
        throw ValueError("phantom: subjects per class and sessions per subject must be >= 1");

    const std::filesystem::path root(out_dir);
    const std::filesystem::path images = root / "images";
    std::error_code ec;
    std::filesystem::create_directories(images, ec);
    if (ec) throw IoError("phantom: cannot create '" + images.string() + "': " + ec.message());

    std::string manifest_path = (root / "manifest.csv").string();
    std::ofstream csv(manifest_path);
    if (!csv) throw IoError("phantom: cannot write '" + manifest_path + "'");
    csv << "subject_id,session_id,age_class,t1w,t2w,pdw\n";

    for (int k = 0; k < 4; ++k) {
        std::vector<SessionPlan> plan;
        if (opt.mirror_paper)
            plan = kMirrorPlan[static_cast<size_t>(k)];
        else
            plan = {{opt.subjects_per_class, opt.sessions_per_subject}};

        int index = 0;
        for (const auto& group : plan) {
            for (int i = 0; i < group.subjects; ++i) {
                char sid[32];
                std::snprintf(sid, sizeof(sid), "sub-c%dn%03d", k, ++index);
                std::string subject_id(sid);
                uint64_t subject_seed = mix_seed(opt.seed, fnv1a(subject_id));
                for (int s = 1; s <= group.sessions; ++s) {
                    std::string session_id = "ses-" + std::to_string(s);
                    uint64_t session_seed = mix_seed(opt.seed, fnv1a(subject_id + "/" + session_id));
                    auto vols = generate_study(k, subject_seed, session_seed, spec);
                    std::string rel[3];
                    write_study(vols, images, subject_id, session_id, opt.gzip, rel);
                    csv << subject_id << ',' << session_id << ',' << k << ',' << rel[0] << ','
                        << rel[1] << ',' << rel[2] << '\n';
                }
            }
        }
    }
    csv.close();
    if (!csv) throw IoError("phantom: failed writing '" + manifest_path + "'");

    std::ofstream ini(root / "phantom_spec.ini");
    ini << phantom_spec_ini(spec);
    return manifest_path;
}

}  // namespace bdae
