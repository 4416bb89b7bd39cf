#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diffnaf/errors.hpp"
#include "diffnaf/io.hpp"
#include "diffnaf/pipeline.hpp"
#include "diffnaf/projector.hpp"
#include "test_helpers.hpp"

using namespace diffnaf;

namespace {

// micro pipeline setup: 16^3 ground truth, 16x16 detector, tiny field
struct MicroRig {
    VolumeGrid gt;
    ScanGeometry geom;
    ProjectionSet projs;
    PipelineConfig cfg;

    explicit MicroRig(int n_views = 6) {
        gt = make_phantom(test::two_sphere_specs(), {16, 16, 16}, 16.0);
        geom = test::tiny_geometry(n_views);
        projs = forward_project(gt, geom, geom.angles_deg, 64);
        cfg.K = 1;
        cfg.ratio = 1.0;
        cfg.oracle_refiner = true;
        cfg.field = test::tiny_field_config();
        cfg.train = test::tiny_train_config(80);
        cfg.selection.candidates_per_gap = 3;
        cfg.selection.n_samples = 24;
        cfg.refiner.T = 6;
        cfg.forward_n_samples = 64;
    }
};

ProjectionImage pseudo_image(double angle, int rows, int cols, double value) {
    ProjectionImage im;
    im.angle_deg = angle;
    im.rows = rows;
    im.cols = cols;
    im.pixels.assign(static_cast<size_t>(rows) * cols, value);
    im.provenance = Provenance::pseudo;
    im.weight = 0.5;
    return im;
}

}  // namespace

TEST_CASE("merging pseudo labels") {
    MicroRig rig;
    ProjectionSet merged = merge_pseudo_labels(rig.projs, {}, 1.0, 0.5);
    CHECK(merged.images.size() == rig.projs.images.size());
    for (size_t i = 0; i < merged.images.size(); ++i)
        CHECK(merged.images[i].pixels == rig.projs.images[i].pixels);

    std::vector<ProjectionImage> add;
    add.push_back(pseudo_image(33.0, rig.geom.det_rows, rig.geom.det_cols, 0.1));
    add.push_back(pseudo_image(93.0, rig.geom.det_rows, rig.geom.det_cols, 0.2));
    ProjectionSet grown = merge_pseudo_labels(rig.projs, add, 1.0, 0.5);
    CHECK(grown.images.size() == rig.projs.images.size() + 2);
    int n_real = 0, n_pseudo = 0;
    for (const auto& im : grown.images) {
        if (im.provenance == Provenance::real) {
            CHECK(im.weight == 1.0);
            ++n_real;
        } else {
            CHECK(im.weight == 0.5);
            ++n_pseudo;
        }
    }
    CHECK(n_real == 6);
    CHECK(n_pseudo == 2);
    for (size_t i = 0; i + 1 < grown.images.size(); ++i)
        CHECK(grown.images[i].angle_deg < grown.images[i + 1].angle_deg);

    // duplicate angle is an error
    std::vector<ProjectionImage> dup;
    dup.push_back(pseudo_image(rig.projs.images[2].angle_deg, rig.geom.det_rows,
                               rig.geom.det_cols, 0.1));
    CHECK_THROWS_WITH_AS(merge_pseudo_labels(rig.projs, dup, 1.0, 0.5),
                         doctest::Contains("duplicate"), InvalidArgumentError);
}

TEST_CASE("K = 0 equals plain field training bitwise") {
    MicroRig rig;
    rig.cfg.K = 0;
    PipelineResult res = run_diffnaf(&rig.gt, rig.projs, rig.cfg, nullptr);
    REQUIRE(res.reports.size() == 1);

    TrainResultT<float> plain = train_field<float>(rig.projs, rig.cfg.field, rig.cfg.train);
    CHECK(test::params_bitwise_equal(res.field, plain.params));
}

TEST_CASE("oracle-refiner iteration grows the set and keeps real images intact") {
    MicroRig rig;
    rig.cfg.K = 2;
    PipelineResult res = run_diffnaf(&rig.gt, rig.projs, rig.cfg, nullptr);
    REQUIRE(res.reports.size() == 3);

    CHECK(res.reports[0].n_projections == 6);
    CHECK(res.reports[1].n_projections == 12);
    CHECK(res.reports[2].n_projections == 24);
    CHECK(res.reports[1].added_angles.size() == 6);
    CHECK(res.reports[2].added_angles.size() == 12);

    // added angles never repeat across iterations
    std::vector<double> all;
    for (const auto& rep : res.reports)
        for (double a : rep.added_angles) {
            for (double b : all) CHECK(a != b);
            all.push_back(a);
        }
    for (const auto& rep : res.reports) {
        CHECK(std::isfinite(rep.psnr_db));
        CHECK(rep.ssim >= -1.0);
        CHECK(rep.ssim <= 1.0);
    }
    CHECK(res.volume.dims == rig.gt.dims);

    // determinism of the whole pipeline
    PipelineResult again = run_diffnaf(&rig.gt, rig.projs, rig.cfg, nullptr);
    CHECK(test::params_bitwise_equal(res.field, again.field));
    CHECK(res.volume.values == again.volume.values);
    for (size_t k = 0; k < res.reports.size(); ++k) {
        CHECK(res.reports[k].added_angles == again.reports[k].added_angles);
        CHECK(res.reports[k].psnr_db == again.reports[k].psnr_db);
    }
}

TEST_CASE("reuse strategies run end to end with a tiny denoiser") {
    MicroRig rig;
    rig.cfg.K = 1;
    rig.cfg.oracle_refiner = false;
    rig.cfg.train.steps_per_outer_iter = 40;

    // quick denoiser on a couple of self-pairs
    DiffusionSchedule s = make_schedule(rig.cfg.refiner.T);
    std::vector<ProjectionPair> pairs;
    for (int i = 0; i < 2; ++i) {
        ProjectionPair pr;
        pr.clean.assign(rig.projs.images[i].pixels.begin(),
                        rig.projs.images[i].pixels.end());
        DratParams d = estimate_drat(pr.clean);
        pr.clean = drat_apply(pr.clean, d);
        pr.degraded = pr.clean;
        pairs.push_back(pr);
    }
    DenoiserConfig dc;
    dc.base_channels = 4;
    dc.time_embed_dim = 4;
    DenoiserTrainConfig dtc;
    dtc.steps = 30;
    dtc.batch = 2;
    DenoiserParams init = init_denoiser<float>(dc, 3);
    DenoiserTrainResultT<float> den =
        train_denoiser(pairs, rig.geom.det_rows, rig.geom.det_cols, s, dtc, &init);

    for (ReuseStrategy strat :
         {ReuseStrategy::none, ReuseStrategy::minmax_roundtrip, ReuseStrategy::drat}) {
        rig.cfg.reuse = strat;
        PipelineResult res = run_diffnaf(&rig.gt, rig.projs, rig.cfg, &den.params);
        CHECK(res.reports.size() == 2);
        CHECK(res.reports[1].n_projections == 12);
        for (double v : res.volume.values) CHECK(std::isfinite(v));
        if (strat == ReuseStrategy::none) {
            // unrefined reuse: deltas are exactly zero
            for (double d : res.reports[1].refinement_deltas) CHECK(d == 0.0);
        }
    }

    // strategies that refine need the denoiser
    rig.cfg.reuse = ReuseStrategy::drat;
    CHECK_THROWS_AS(run_diffnaf(&rig.gt, rig.projs, rig.cfg, nullptr),
                    InvalidArgumentError);
}

TEST_CASE("ablation matrix reuses per-iteration reports") {
    MicroRig rig;
    rig.cfg.train.steps_per_outer_iter = 30;
    std::vector<AblationRow> rows = ablation_matrix(
        rig.gt, rig.projs, rig.cfg, {ReuseStrategy::none}, {1.0}, {0, 1}, nullptr);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].strategy == "none");
    CHECK(rows[0].k == 0);
    CHECK(rows[1].k == 1);
    CHECK(std::isfinite(rows[0].psnr_db));
}

TEST_CASE("refiner corpus construction") {
    MicroRig rig;
    CorpusConfig cc;
    cc.n_clean_views = 12;
    cc.undertrain_views = 4;
    cc.undertrain_steps = 20;
    cc.n_samples = 64;
    cc.holdout_every = 4;
    RefinerCorpus corpus = build_refiner_corpus(rig.gt, rig.geom, rig.cfg.field,
                                                rig.cfg.train, cc);
    CHECK(corpus.rows == rig.geom.det_rows);
    // 12 views, every 4th held out: 3 held out, 9 trained; two pairs per view
    CHECK(corpus.holdout_pairs.size() == 6);
    CHECK(corpus.train_pairs.size() == 18);
    for (const auto& pr : corpus.train_pairs) {
        REQUIRE(pr.clean.size() == pr.degraded.size());
        double mn = 1e9, mx = -1e9;
        for (double v : pr.degraded) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        // degraded member is normalized onto [0, 1]
        CHECK(mn == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(mx == doctest::Approx(1.0).epsilon(1e-9));
    }
}
