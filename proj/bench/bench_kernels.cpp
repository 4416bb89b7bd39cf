// Timing comparison between the serial reference kernels and their
// OpenMP-parallel counterparts. The parallel versions are bitwise equal to
// the serial ones; this target only reports speed.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "diffnaf/field.hpp"
#include "diffnaf/phantom.hpp"
#include "diffnaf/projector.hpp"
#include "diffnaf/synthesis.hpp"

using namespace diffnaf;
using clock_type = std::chrono::steady_clock;

namespace {

double time_median(int reps, const std::function<void()>& fn) {
    std::vector<double> times;
    for (int i = 0; i < reps; ++i) {
        auto t0 = clock_type::now();
        fn();
        times.push_back(std::chrono::duration<double>(clock_type::now() - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

void report(const char* name, double serial_s, double parallel_s) {
    std::printf("%-28s serial %8.3f ms   omp %8.3f ms   speedup %.2fx\n", name,
                serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s);
}

}  // namespace

int main() {
    std::printf("threads available: %d\n\n", omp_get_max_threads());

    std::vector<EllipsoidSpec> specs(2);
    specs[0].semi_axes_mm = {35.0, 35.0, 35.0};
    specs[0].center_mm = {-20.0, -15.0, 10.0};
    specs[0].mu = 0.02;
    specs[1].semi_axes_mm = {22.0, 22.0, 22.0};
    specs[1].center_mm = {30.0, 25.0, -12.0};
    specs[1].mu = 0.015;
    VolumeGrid vol = make_phantom(specs, {64, 64, 64}, 4.0);
    ScanGeometry geom = make_circular_geometry(20, 1000, 1500, 64, 64, 4.0, 128.0);

    {
        double s = time_median(3, [&] { project_image_serial(vol, geom, 33.0, 256); });
        double p = time_median(3, [&] { project_image(vol, geom, 33.0, 256); });
        report("forward projection 64x64", s, p);
    }

    FieldConfig fcfg;
    FieldParams params = init_field_params<float>(fcfg, 7);
    {
        double s = time_median(3, [&] {
            render_volume_serial(params, fcfg, 128.0, {64, 64, 64}, 4.0);
        });
        double p =
            time_median(3, [&] { render_volume(params, fcfg, 128.0, {64, 64, 64}, 4.0); });
        report("field render 64^3", s, p);
    }
    {
        double s = time_median(3, [&] {
            synthesize_projection_serial(params, fcfg, geom, 50.0, 64, 1.0);
        });
        double p = time_median(3, [&] {
            synthesize_projection(params, fcfg, geom, 50.0, 64, 1.0);
        });
        report("view synthesis 64x64", s, p);
    }
    {
        ProjectionSet projs = forward_project(vol, geom, geom.angles_deg, 128);
        TrainConfig tc;
        tc.steps_per_outer_iter = 20;
        tc.rays_per_batch = 256;
        tc.samples_per_ray = 64;
        int max_threads = omp_get_max_threads();
        omp_set_num_threads(1);
        double s = time_median(3, [&] { train_field<float>(projs, fcfg, tc); });
        omp_set_num_threads(max_threads);
        double p = time_median(3, [&] { train_field<float>(projs, fcfg, tc); });
        report("field training 20 steps", s, p);
    }
    return 0;
}
