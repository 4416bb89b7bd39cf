#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diffnaf/errors.hpp"
#include "diffnaf/geometry.hpp"
#include "diffnaf/rng.hpp"
#include "test_helpers.hpp"

using namespace diffnaf;

TEST_CASE("uniform circular geometry") {
    ScanGeometry g = make_circular_geometry(20, 1000, 1500, 64, 64, 4.0, 128);
    REQUIRE(g.n_views == 20);
    for (int k = 0; k < 20; ++k) CHECK(g.angles_deg[k] == k * 18.0);

    ScanGeometry g50 = make_circular_geometry(50, 1000, 1500, 512, 512, 1.0, 128);
    CHECK(g50.angles_deg[1] == doctest::Approx(7.2).epsilon(1e-12));
    CHECK(g50.sod_mm == 1000.0);
    CHECK(g50.sdd_mm == 1500.0);
}

TEST_CASE("geometry constraint violations") {
    CHECK_THROWS_AS(make_circular_geometry(1, 1000, 900, 64, 64, 4.0, 128),
                    InvalidArgumentError);
    CHECK_THROWS_WITH_AS(make_circular_geometry(1, 1000, 900, 64, 64, 4.0, 128),
                         doctest::Contains("sod_mm < sdd_mm"), InvalidArgumentError);
    CHECK_THROWS_AS(make_circular_geometry(0, 1000, 1500, 64, 64, 4.0, 128),
                    InvalidArgumentError);
    CHECK_THROWS_AS(make_circular_geometry(4, 1000, 1500, 64, 64, -1.0, 128),
                    InvalidArgumentError);
}

TEST_CASE("center ray runs along the source-isocenter axis") {
    // odd detector so pixel (32,32) sits exactly on the detector center
    ScanGeometry g = make_circular_geometry(8, 1000, 1500, 65, 65, 4.0, 128);
    Ray r = ray_for_pixel(g, 0, 32, 32);
    CHECK(r.origin_mm.x == doctest::Approx(1000.0));
    CHECK(r.origin_mm.norm() == doctest::Approx(1000.0));
    CHECK(r.direction.x == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(std::abs(r.direction.y) < 1e-12);
    CHECK(std::abs(r.direction.z) < 1e-12);
}

TEST_CASE("opposite views are antipodal with negated directions") {
    ScanGeometry g = make_circular_geometry(2, 1000, 1500, 65, 65, 4.0, 128);
    Ray a = ray_for_pixel(g, 0, 32, 32);
    Ray b = ray_for_pixel(g, 1, 32, 32);  // 180 degrees
    CHECK(a.origin_mm.x == doctest::Approx(-b.origin_mm.x).epsilon(1e-9));
    CHECK(std::abs(a.origin_mm.y + b.origin_mm.y) < 1e-9);
    CHECK(a.direction.x == doctest::Approx(-b.direction.x).epsilon(1e-9));
    CHECK(std::abs(a.direction.y + b.direction.y) < 1e-9);
}

TEST_CASE("corner pixel offset follows the pixel-center convention") {
    ScanGeometry g = make_circular_geometry(4, 1000, 1500, 64, 64, 4.0, 128);
    Ray r = ray_for_pixel(g, 0, 0, 0);
    // intersect the detector plane x = -(sdd - sod)
    double t = (-(g.sdd_mm - g.sod_mm) - r.origin_mm.x) / r.direction.x;
    Vec3 p = r.origin_mm + t * r.direction;
    // at angle 0 the u axis is +y and the v axis is +z
    CHECK(p.y == doctest::Approx(-31.5 * 4.0).epsilon(1e-9));
    CHECK(p.z == doctest::Approx(-31.5 * 4.0).epsilon(1e-9));

    CHECK_THROWS_AS(ray_for_pixel(g, 0, 64, 0), InvalidArgumentError);
    CHECK_THROWS_AS(ray_for_pixel(g, 4, 0, 0), InvalidArgumentError);
}

TEST_CASE("slab entry and exit") {
    Ray toward{{0, -1000, 0}, {0, 1, 0}};
    auto hit = ray_entry_exit(toward, 128.0);
    REQUIRE(hit.has_value());
    CHECK(hit->first == doctest::Approx(872.0));
    CHECK(hit->second == doctest::Approx(1128.0));

    Ray away{{0, -1000, 0}, {0, -1, 0}};
    CHECK(!ray_entry_exit(away, 128.0).has_value());

    // tangent to the +x face: zero-length chord counts as a miss
    Ray grazing{{128.0, -1000, 0}, {0, 1, 0}};
    CHECK(!ray_entry_exit(grazing, 128.0).has_value());

    Ray inside_parallel{{100.0, -1000, 0}, {0, 1, 0}};
    CHECK(ray_entry_exit(inside_parallel, 128.0).has_value());
}

TEST_CASE("midpoint sampling") {
    Ray r{{0, 0, 0}, {1, 0, 0}};
    auto pts = sample_ray(r, 0.0, 1.0, 4);
    REQUIRE(pts.size() == 4);
    CHECK(pts[0].t_mm == doctest::Approx(0.125));
    CHECK(pts[1].t_mm == doctest::Approx(0.375));
    CHECK(pts[2].t_mm == doctest::Approx(0.625));
    CHECK(pts[3].t_mm == doctest::Approx(0.875));
    for (const auto& p : pts) CHECK(p.dt_mm == doctest::Approx(0.25));

    auto one = sample_ray(r, 2.0, 6.0, 1);
    CHECK(one[0].t_mm == doctest::Approx(4.0));
    CHECK(one[0].dt_mm == doctest::Approx(4.0));

    CHECK_THROWS_AS(sample_ray(r, 1.0, 1.0, 4), InvalidArgumentError);
    CHECK_THROWS_AS(sample_ray(r, 0.0, 1.0, 0), InvalidArgumentError);
}

TEST_CASE("constant integrand is exact for any sample count") {
    Ray r{{3.0, -400.0, 7.0}, Vec3{0.1, 1.0, -0.05}.normalized()};
    auto hit = ray_entry_exit(r, 128.0);
    REQUIRE(hit.has_value());
    double c = 0.37;
    for (int n : {1, 7, 64}) {
        auto pts = sample_ray(r, hit->first, hit->second, n);
        double acc = 0.0, chord = 0.0;
        for (const auto& p : pts) {
            acc += c * p.dt_mm;
            chord += p.dt_mm;
        }
        CHECK(acc == doctest::Approx(c * (hit->second - hit->first)).epsilon(1e-12));
        CHECK(chord == doctest::Approx(hit->second - hit->first).epsilon(1e-9));
    }
}

TEST_CASE("rays have unit direction everywhere") {
    ScanGeometry g = make_circular_geometry(12, 1000, 1500, 32, 32, 8.0, 128);
    for (int k = 0; k < g.n_views; ++k)
        for (int v = 0; v < g.det_rows; v += 7)
            for (int u = 0; u < g.det_cols; u += 7) {
                Ray r = ray_for_pixel(g, k, u, v);
                CHECK(std::abs(r.direction.norm() - 1.0) < 1e-9);
            }
}

TEST_CASE("rotating the geometry rotates the rays") {
    ScanGeometry g = make_circular_geometry(6, 1000, 1500, 32, 32, 8.0, 128);
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        double theta = rng.next_uniform(0.0, 360.0);
        double delta = rng.next_uniform(0.0, 360.0);
        int u = static_cast<int>(rng.next_below(32));
        int v = static_cast<int>(rng.next_below(32));
        Ray base = ray_at_angle(g, theta, u, v);
        Ray rot = ray_at_angle(g, theta + delta, u, v);
        double c = std::cos(delta * 0.017453292519943295);
        double s = std::sin(delta * 0.017453292519943295);
        Vec3 o{c * base.origin_mm.x - s * base.origin_mm.y,
               s * base.origin_mm.x + c * base.origin_mm.y, base.origin_mm.z};
        Vec3 d{c * base.direction.x - s * base.direction.y,
               s * base.direction.x + c * base.direction.y, base.direction.z};
        CHECK((rot.origin_mm - o).norm() < 1e-6);
        CHECK((rot.direction - d).norm() < 1e-9);
    }
}
