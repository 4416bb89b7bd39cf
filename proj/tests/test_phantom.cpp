#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "diffnaf/errors.hpp"
#include "diffnaf/phantom.hpp"
#include "test_helpers.hpp"

using namespace diffnaf;

namespace {

std::vector<EllipsoidSpec> centered_sphere(double r, double mu) {
    EllipsoidSpec e;
    e.semi_axes_mm = {r, r, r};
    e.mu = mu;
    return {e};
}

}  // namespace

TEST_CASE("voxelization membership and additivity") {
    VolumeGrid empty = make_phantom({}, {16, 16, 16}, 16.0);
    for (double v : empty.values) CHECK(v == 0.0);

    VolumeGrid sphere = make_phantom(centered_sphere(32.0, 0.02), {64, 64, 64}, 4.0);
    // voxel (31,31,31) center is (-2,-2,-2), inside; voxel (0,0,0) is far outside
    CHECK(sphere.at(31, 31, 31) == doctest::Approx(0.02));
    CHECK(sphere.at(0, 0, 0) == 0.0);

    auto two = centered_sphere(30.0, 0.01);
    EllipsoidSpec other;
    other.center_mm = {10.0, 0.0, 0.0};
    other.semi_axes_mm = {30.0, 30.0, 30.0};
    other.mu = 0.01;
    two.push_back(other);
    VolumeGrid overlap = make_phantom(two, {64, 64, 64}, 4.0);
    CHECK(overlap.at(31, 31, 31) == doctest::Approx(0.02));  // inside both
}

TEST_CASE("ellipsoid validation") {
    EllipsoidSpec bad;
    bad.semi_axes_mm = {0.0, 1.0, 1.0};
    CHECK_THROWS_AS(bad.validate(), InvalidArgumentError);
    EllipsoidSpec skew;
    skew.rotation = {1, 0.5, 0, 0, 1, 0, 0, 0, 1};
    CHECK_THROWS_AS(skew.validate(), InvalidArgumentError);
}

TEST_CASE("analytic line integrals") {
    auto specs = centered_sphere(32.0, 0.02);
    Ray center{{0, -1000, 0}, {0, 1, 0}};
    CHECK(analytic_line_integral(specs, center) == doctest::Approx(1.28).epsilon(1e-12));

    Ray offset{{16.0, -1000, 0}, {0, 1, 0}};
    double chord = 2.0 * std::sqrt(32.0 * 32.0 - 16.0 * 16.0);
    CHECK(analytic_line_integral(specs, offset) ==
          doctest::Approx(0.02 * chord).epsilon(1e-9));

    Ray miss{{200.0, -1000, 0}, {0, 1, 0}};
    CHECK(analytic_line_integral(specs, miss) == 0.0);
}

TEST_CASE("analytic integral respects rotations") {
    EllipsoidSpec e;
    e.semi_axes_mm = {40.0, 20.0, 20.0};
    e.rotation = rotation_z(90.0);
    e.mu = 0.01;
    // after a 90-degree turn the x chord through the center is the 20 mm axis
    Ray along_x{{-1000, 0, 0}, {1, 0, 0}};
    CHECK(analytic_line_integral({e}, along_x) == doctest::Approx(0.4).epsilon(1e-9));
    Ray along_y{{0, -1000, 0}, {0, 1, 0}};
    CHECK(analytic_line_integral({e}, along_y) == doctest::Approx(0.8).epsilon(1e-9));
}

TEST_CASE("discrete integral of a constant volume is exact") {
    VolumeGrid vol = VolumeGrid::centered({32, 32, 32}, 8.0);
    std::fill(vol.values.begin(), vol.values.end(), 0.05);
    Ray r{{3.0, -1000.0, -11.0}, Vec3{0.02, 1.0, 0.01}.normalized()};
    auto hit = ray_box_entry_exit(r, vol.center_span_lo(), vol.center_span_hi());
    REQUIRE(hit.has_value());
    double chord = hit->second - hit->first;
    for (int n : {1, 16, 256})
        CHECK(discrete_line_integral(vol, r, n) ==
              doctest::Approx(0.05 * chord).epsilon(1e-12));
}

TEST_CASE("discrete matches analytic through the voxelized sphere") {
    VolumeGrid vol = make_phantom(centered_sphere(32.0, 0.02), {64, 64, 64}, 4.0);
    Ray center{{0, -1000, 0}, {0, 1, 0}};
    double discrete = discrete_line_integral(vol, center, 256);
    CHECK(discrete == doctest::Approx(1.28).epsilon(0.02));

    Ray outside{{500.0, -1000, 0}, {0, 1, 0}};
    CHECK(discrete_line_integral(vol, outside, 64) == 0.0);
}

TEST_CASE("discrete integral is linear in the volume") {
    VolumeGrid vol = make_phantom(test::two_sphere_specs(), {32, 32, 32}, 8.0);
    VolumeGrid doubled = vol;
    for (auto& v : doubled.values) v *= 2.0;
    Rng rng(11);
    for (int i = 0; i < 25; ++i) {
        Ray r = test::random_ray(rng);
        double a = discrete_line_integral(vol, r, 64);
        double b = discrete_line_integral(doubled, r, 64);
        CHECK(b == 2.0 * a);  // exact: scaling by a power of two
    }
}

TEST_CASE("sampling error shrinks as samples double, down to the voxel floor") {
    auto specs = test::two_sphere_specs();
    VolumeGrid vol = make_phantom(specs, {64, 64, 64}, 4.0);
    Rng rng(2024);
    std::vector<Ray> rays;
    for (int i = 0; i < 100; ++i) rays.push_back(test::random_ray(rng));

    std::vector<int> counts{32, 64, 128, 256, 512};
    std::vector<double> medians;
    for (int n : counts) {
        std::vector<double> errs;
        for (const Ray& r : rays)
            errs.push_back(std::abs(discrete_line_integral(vol, r, n) -
                                    analytic_line_integral(specs, r)));
        std::sort(errs.begin(), errs.end());
        medians.push_back(0.5 * (errs[49] + errs[50]));
    }
    double floor = medians.back();
    for (size_t k = 0; k + 1 < medians.size(); ++k) {
        INFO("n=", counts[k], " median=", medians[k], " next=", medians[k + 1]);
        CHECK(medians[k + 1] <= std::max(0.55 * medians[k], 1.10 * floor));
    }
}
