#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "diffnaf/errors.hpp"
#include "diffnaf/io.hpp"
#include "diffnaf/metrics.hpp"
#include "test_helpers.hpp"

using namespace diffnaf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("diffnaf_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

VolumeGrid random_volume(std::array<int, 3> dims, uint64_t seed) {
    VolumeGrid v = VolumeGrid::centered(dims, 4.0);
    Rng rng(seed);
    for (auto& x : v.values)
        x = static_cast<float>(rng.next_uniform(0.0, 0.05));  // f32-exact payload
    return v;
}

// Reference SSIM: direct evaluation of the windowed formula, kept
// independent of the library implementation.
double ssim_reference(const VolumeGrid& a, const VolumeGrid& b, int w, double range) {
    double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
    double total = 0.0;
    int count = 0;
    for (int z = 0; z + w <= a.dims[2]; ++z)
        for (int y = 0; y + w <= a.dims[1]; ++y)
            for (int x = 0; x + w <= a.dims[0]; ++x) {
                double ma = 0, mb = 0;
                for (int dz = 0; dz < w; ++dz)
                    for (int dy = 0; dy < w; ++dy)
                        for (int dx = 0; dx < w; ++dx) {
                            ma += a.at(x + dx, y + dy, z + dz);
                            mb += b.at(x + dx, y + dy, z + dz);
                        }
                double n = w * w * w;
                ma /= n;
                mb /= n;
                double va = 0, vb = 0, cov = 0;
                for (int dz = 0; dz < w; ++dz)
                    for (int dy = 0; dy < w; ++dy)
                        for (int dx = 0; dx < w; ++dx) {
                            double da = a.at(x + dx, y + dy, z + dz) - ma;
                            double db = b.at(x + dx, y + dy, z + dz) - mb;
                            va += da * da;
                            vb += db * db;
                            cov += da * db;
                        }
                va /= n;
                vb /= n;
                cov /= n;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / count;
}

}  // namespace

TEST_CASE("psnr basics") {
    VolumeGrid a = random_volume({8, 8, 8}, 3);
    CHECK(std::isinf(psnr(a, a)));

    VolumeGrid b = a;
    for (auto& v : b.values) v += 0.1;
    CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(1e-9));

    VolumeGrid c = random_volume({8, 8, 4}, 3);
    CHECK_THROWS_AS(psnr(a, c), MismatchError);

    // symmetry under swap at fixed range
    VolumeGrid d = random_volume({8, 8, 8}, 4);
    CHECK(psnr(a, d, 0.05) == psnr(d, a, 0.05));
}

TEST_CASE("ssim basics and brute-force oracle") {
    VolumeGrid a = random_volume({10, 10, 10}, 7);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

    VolumeGrid shifted = a;
    for (auto& v : shifted.values) v += 0.01;
    double s = ssim(a, shifted, 7, 0.01, 0.03, 0.05);
    CHECK(s < 1.0);
    CHECK(s == doctest::Approx(ssim_reference(a, shifted, 7, 0.05)).epsilon(1e-9));
    CHECK(ssim(a, shifted, 7, 0.01, 0.03, 0.05) ==
          doctest::Approx(ssim(shifted, a, 7, 0.01, 0.03, 0.05)).epsilon(1e-12));

    VolumeGrid tiny = random_volume({4, 4, 4}, 9);
    CHECK_THROWS_AS(ssim(tiny, tiny), InvalidArgumentError);
}

TEST_CASE("volume files round trip bitwise") {
    TempDir tmp;
    VolumeGrid v = random_volume({6, 5, 4}, 11);
    write_volume(tmp.file("v.dnvol"), v);
    VolumeGrid r = read_volume(tmp.file("v.dnvol"));
    CHECK(r.dims == v.dims);
    CHECK(r.voxel_mm == v.voxel_mm);
    CHECK(r.origin_mm.x == v.origin_mm.x);
    REQUIRE(r.values.size() == v.values.size());
    for (size_t i = 0; i < v.values.size(); ++i) CHECK(r.values[i] == v.values[i]);
}

TEST_CASE("truncated and malformed files are typed errors") {
    TempDir tmp;
    VolumeGrid v = random_volume({6, 5, 4}, 13);
    std::string path = tmp.file("v.dnvol");
    write_volume(path, v);

    auto size = fs::file_size(path);
    fs::resize_file(path, size - 17);
    CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains("expected"), IoError);

    std::ofstream bad(tmp.file("bad.dnvol"), std::ios::binary);
    bad << "NOTAVOLUME___________";
    bad.close();
    CHECK_THROWS_AS(read_volume(tmp.file("bad.dnvol")), IoError);

    VolumeGrid nan_vol = v;
    nan_vol.values[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(write_volume(tmp.file("nan.dnvol"), nan_vol),
                         doctest::Contains("non-finite"), IoError);
}

TEST_CASE("projection sets round trip") {
    TempDir tmp;
    ScanGeometry g = test::tiny_geometry(3);
    VolumeGrid vol = make_phantom(test::two_sphere_specs(), {16, 16, 16}, 16.0);
    ProjectionSet set = forward_project(vol, g, g.angles_deg, 32);
    set.images[1].provenance = Provenance::pseudo;
    set.images[1].weight = 0.5f;

    write_projection_set(tmp.file("p.dnps"), set);
    ProjectionSet r = read_projection_set(tmp.file("p.dnps"));
    CHECK(r.geometry.n_views == g.n_views);
    CHECK(r.geometry.sod_mm == g.sod_mm);
    REQUIRE(r.images.size() == set.images.size());
    for (size_t k = 0; k < set.images.size(); ++k) {
        CHECK(r.images[k].angle_deg == set.images[k].angle_deg);
        CHECK(r.images[k].provenance == set.images[k].provenance);
        for (size_t i = 0; i < set.images[k].pixels.size(); ++i)
            CHECK(static_cast<float>(r.images[k].pixels[i]) ==
                  static_cast<float>(set.images[k].pixels[i]));
    }
}

TEST_CASE("field checkpoints round trip") {
    TempDir tmp;
    FieldConfig cfg = test::tiny_field_config();
    FieldParams p = init_field_params<float>(cfg, 5);
    write_field_checkpoint(tmp.file("f.dnfld"), cfg, p);
    auto [rc, rp] = read_field_checkpoint(tmp.file("f.dnfld"));
    CHECK(rc.encoding.n_levels == cfg.encoding.n_levels);
    CHECK(rc.encoding.table_size == cfg.encoding.table_size);
    CHECK(rc.hidden_widths == cfg.hidden_widths);
    CHECK(test::params_bitwise_equal(rp, p));
}

TEST_CASE("denoiser checkpoints round trip") {
    TempDir tmp;
    DenoiserConfig cfg;
    cfg.base_channels = 4;
    cfg.time_embed_dim = 4;
    DenoiserParams p = init_denoiser<float>(cfg, 21);
    write_denoiser_checkpoint(tmp.file("d.dndk"), p);
    DenoiserParams r = read_denoiser_checkpoint(tmp.file("d.dndk"));
    CHECK(r.config.base_channels == cfg.base_channels);
    CHECK(r.data == p.data);
}

TEST_CASE("manifest validates against the bundled schema") {
    PipelineResult fake;
    fake.reports.resize(2);
    fake.reports[0].k = 0;
    fake.reports[0].psnr_db = 21.5;
    fake.reports[0].ssim = 0.8;
    fake.reports[0].n_projections = 20;
    fake.reports[1].k = 1;
    fake.reports[1].psnr_db = std::numeric_limits<double>::infinity();  // -> null
    fake.reports[1].ssim = 0.9;
    fake.reports[1].n_projections = 40;
    fake.reports[1].added_angles = {9.0, 27.0};

    json manifest = manifest_from_run(default_config_json(), fake);
    json schema = read_json_file("share/manifest.schema.json");
    CHECK_NOTHROW(validate_against_schema(manifest, schema));
    CHECK_NOTHROW(validate_against_schema(manifest, manifest_schema()));

    json broken = manifest;
    broken.erase("reports");
    CHECK_THROWS_WITH_AS(validate_against_schema(broken, schema),
                         doctest::Contains("reports"), IoError);
    json wrong_type = manifest;
    wrong_type["version"] = "one";
    CHECK_THROWS_AS(validate_against_schema(wrong_type, schema), IoError);
}

TEST_CASE("metric records round-trip through JSON exactly") {
    TempDir tmp;
    json rec;
    rec["psnr_db"] = 37.21;
    rec["ssim"] = 0.9780;
    write_json_file(tmp.file("r.json"), rec);
    json back = read_json_file(tmp.file("r.json"));
    CHECK(back["psnr_db"].get<double>() == 37.21);
    CHECK(back["ssim"].get<double>() == 0.9780);
}

TEST_CASE("config parsing applies defaults and validates") {
    json j;
    j["geometry"]["n_views"] = 10;
    AppConfig cfg = app_config_from_json(j);
    CHECK(cfg.geometry.n_views == 10);
    CHECK(cfg.geometry.sod_mm == 1000.0);
    CHECK(cfg.pipeline.train.steps_per_outer_iter == 1500);
    CHECK(cfg.pipeline.train.w2 == 0.5);
    CHECK(cfg.pipeline.selection.interval_divisor_a == 4.0);
    CHECK(cfg.phantom.size() == 4);

    json bad;
    bad["geometry"]["sdd_mm"] = 500.0;  // < sod
    CHECK_THROWS_AS(app_config_from_json(bad), InvalidArgumentError);
}

TEST_CASE("export-plots writes csv and svg") {
    TempDir tmp;
    PipelineResult fake;
    for (int k = 0; k < 3; ++k) {
        IterationReport r;
        r.k = k;
        r.psnr_db = 20.0 + k;
        r.ssim = 0.8 + 0.02 * k;
        r.n_projections = 20 << k;
        fake.reports.push_back(r);
    }
    json manifest = manifest_from_run(json::object(), fake);
    export_metric_curves(manifest, tmp.path.string());
    CHECK(fs::exists(tmp.file("metrics.csv")));
    CHECK(fs::exists(tmp.file("psnr.svg")));
    CHECK(fs::exists(tmp.file("ssim.svg")));
    std::ifstream csv(tmp.file("metrics.csv"));
    std::string header;
    std::getline(csv, header);
    CHECK(header == "k,psnr_db,ssim,n_projections");
}
