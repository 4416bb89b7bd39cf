// Command-line front end: phantom generation, projection, classical and
// neural reconstruction, view selection, refinement, and the full iterative
// pipeline.

#include <CLI11.hpp>
#include <omp.h>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "diffnaf/errors.hpp"
#include "diffnaf/io.hpp"
#include "diffnaf/rng.hpp"
#include "diffnaf/metrics.hpp"
#include "diffnaf/phantom.hpp"
#include "diffnaf/pipeline.hpp"
#include "diffnaf/projector.hpp"
#include "diffnaf/synthesis.hpp"

namespace fs = std::filesystem;
using namespace diffnaf;

namespace {

std::vector<double> parse_angle_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stod(tok));
    }
    return out;
}

// Seed override fans out to every stochastic component.
void apply_seed(AppConfig& cfg, uint64_t seed) {
    cfg.pipeline.train.rng_seed = seed;
    cfg.pipeline.refiner.refine_seed = hash_combine(seed, 1);
    cfg.pipeline.refiner.train.seed = hash_combine(seed, 2);
    cfg.corpus.seed = hash_combine(seed, 3);
    cfg.raw["train"]["rng_seed"] = cfg.pipeline.train.rng_seed;
    cfg.raw["pipeline"]["refine_seed"] = cfg.pipeline.refiner.refine_seed;
    cfg.raw["refiner"]["seed"] = cfg.pipeline.refiner.train.seed;
    cfg.raw["corpus"]["seed"] = cfg.corpus.seed;
}

std::vector<double> uniform_angles(int n) {
    std::vector<double> a(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) a[static_cast<size_t>(i)] = i * 360.0 / n;
    return a;
}

DenoiserParams train_refiner_from_corpus(const AppConfig& cfg, const VolumeGrid& gt) {
    std::cout << "building refiner corpus (" << cfg.corpus.n_clean_views
              << " clean views)...\n";
    RefinerCorpus corpus = build_refiner_corpus(gt, cfg.geometry, cfg.pipeline.field,
                                                cfg.pipeline.train, cfg.corpus);
    std::cout << "training denoiser on " << corpus.train_pairs.size()
              << " pairs for " << cfg.pipeline.refiner.train.steps << " steps...\n";
    DiffusionSchedule schedule = make_schedule(cfg.pipeline.refiner.T);
    DenoiserParams init =
        init_denoiser<float>(cfg.pipeline.refiner.net, cfg.pipeline.refiner.train.seed);
    DenoiserTrainResultT<float> res =
        train_denoiser(corpus.train_pairs, corpus.rows, corpus.cols, schedule,
                       cfg.pipeline.refiner.train, &init);
    std::cout << "denoiser objective: first=" << res.losses.front()
              << " last=" << res.losses.back() << "\n";
    return res.params;
}

int run_pipeline_command(const AppConfig& cfg_in, const std::string& out_dir,
                         const std::string& denoiser_path, bool do_ablate) {
    AppConfig cfg = cfg_in;
    fs::create_directories(out_dir);

    VolumeGrid gt = make_phantom(cfg.phantom, cfg.volume_dims, cfg.voxel_mm);
    write_volume(out_dir + "/ground_truth.dnvol", gt);
    ProjectionSet initial = forward_project(gt, cfg.geometry, cfg.geometry.angles_deg,
                                            cfg.projection_n_samples);
    write_projection_set(out_dir + "/initial_projections.dnps", initial);

    DenoiserParams denoiser;
    bool have_denoiser = false;
    bool needs_denoiser =
        !cfg.pipeline.oracle_refiner && cfg.pipeline.reuse != ReuseStrategy::none &&
        cfg.pipeline.K > 0;
    if (do_ablate) needs_denoiser = true;
    if (needs_denoiser) {
        if (!denoiser_path.empty()) {
            denoiser = read_denoiser_checkpoint(denoiser_path);
        } else {
            denoiser = train_refiner_from_corpus(cfg, gt);
            write_denoiser_checkpoint(out_dir + "/denoiser.dndk", denoiser);
        }
        have_denoiser = true;
    }

    if (do_ablate) {
        std::vector<ReuseStrategy> strategies;
        for (const auto& s : cfg.ablation_strategies)
            strategies.push_back(reuse_strategy_from_string(s));
        int max_k = *std::max_element(cfg.ablation_ks.begin(), cfg.ablation_ks.end());
        std::cout << "ablation grid: " << strategies.size() << " strategies x "
                  << cfg.ablation_ratios.size() << " ratios, K up to " << max_k << "\n";
        std::vector<AblationRow> rows =
            ablation_matrix(gt, initial, cfg.pipeline, strategies, cfg.ablation_ratios,
                            cfg.ablation_ks, have_denoiser ? &denoiser : nullptr);
        json table = json::array();
        std::ofstream csv(out_dir + "/ablation.csv");
        csv << "strategy,ratio,k,psnr_db,ssim\n";
        for (const auto& r : rows) {
            table.push_back({{"strategy", r.strategy},
                             {"ratio", r.ratio},
                             {"k", r.k},
                             {"psnr_db", r.psnr_db},
                             {"ssim", r.ssim}});
            csv << r.strategy << "," << r.ratio << "," << r.k << "," << r.psnr_db
                << "," << r.ssim << "\n";
            std::cout << r.strategy << " ratio=" << r.ratio << " k=" << r.k
                      << "  " << r.psnr_db << " dB / " << r.ssim << "\n";
        }
        write_json_file(out_dir + "/ablation.json", table);
        return 0;
    }

    IterationObserver observer = [&](int k, const FieldParams& field,
                                     const ProjectionSet& projs) {
        std::string tag = "iter" + std::to_string(k);
        write_field_checkpoint(out_dir + "/" + tag + "_field.dnfld",
                               cfg.pipeline.field, field);
        write_projection_set(out_dir + "/" + tag + "_projections.dnps", projs);
    };
    PipelineResult res = run_diffnaf(&gt, initial, cfg.pipeline,
                                     have_denoiser ? &denoiser : nullptr, observer);

    write_volume(out_dir + "/reconstruction.dnvol", res.volume);
    write_field_checkpoint(out_dir + "/field.dnfld", cfg.pipeline.field, res.field);
    json manifest = manifest_from_run(cfg.raw, res);
    validate_against_schema(manifest, manifest_schema());
    write_json_file(out_dir + "/manifest.json", manifest);

    for (const auto& rep : res.reports)
        std::cout << "k=" << rep.k << "  views=" << rep.n_projections
                  << "  psnr=" << rep.psnr_db << " dB  ssim=" << rep.ssim << "  ("
                  << rep.wall_seconds << " s)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"iterative diffusion-refined neural attenuation field reconstruction"};
    app.require_subcommand(1);

    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
    app.add_option("--config", config_path, "JSON experiment config")->required(false);
    app.add_option("--seed", seed, "override all RNG seeds")
        ->each([&](const std::string&) { seed_set = true; });
    app.add_option("--threads", threads, "OpenMP thread count (0 = default)");

    // phantom
    auto* cmd_phantom = app.add_subcommand("phantom", "voxelize the configured phantom");
    std::string out_path;
    cmd_phantom->add_option("--out", out_path, "output volume (.dnvol)")->required();

    // project
    auto* cmd_project = app.add_subcommand("project", "forward-project a volume");
    std::string vol_path, angles_csv;
    int n_views_override = 0;
    cmd_project->add_option("--volume", vol_path, "input volume")->required();
    cmd_project->add_option("--out", out_path, "output projection set")->required();
    cmd_project->add_option("--angles", angles_csv, "comma-separated view angles");
    cmd_project->add_option("--views", n_views_override, "uniform view count");

    // recon-fdk / recon-sart
    auto* cmd_fdk = app.add_subcommand("recon-fdk", "Feldkamp reconstruction");
    std::string projs_path;
    cmd_fdk->add_option("--projs", projs_path, "input projections")->required();
    cmd_fdk->add_option("--out", out_path, "output volume")->required();

    auto* cmd_sart = app.add_subcommand("recon-sart", "SART reconstruction");
    int sart_iters = 0;
    double sart_relax = 0.0;
    cmd_sart->add_option("--projs", projs_path, "input projections")->required();
    cmd_sart->add_option("--out", out_path, "output volume")->required();
    cmd_sart->add_option("--iters", sart_iters, "iterations (default from config)");
    cmd_sart->add_option("--relax", sart_relax, "relaxation (default from config)");

    // train-naf
    auto* cmd_naf = app.add_subcommand("train-naf", "fit the attenuation field");
    std::string init_path;
    cmd_naf->add_option("--projs", projs_path, "training projections")->required();
    cmd_naf->add_option("--out", out_path, "output checkpoint (.dnfld)")->required();
    cmd_naf->add_option("--init", init_path, "warm-start checkpoint");

    // synthesize
    auto* cmd_synth = app.add_subcommand("synthesize", "render novel-view projections");
    std::string field_path;
    cmd_synth->add_option("--field", field_path, "field checkpoint")->required();
    cmd_synth->add_option("--angles", angles_csv, "comma-separated angles")->required();
    cmd_synth->add_option("--out", out_path, "output projection set")->required();

    // select-views
    auto* cmd_select = app.add_subcommand("select-views", "angle-prior guided selection");
    double ratio = 1.0;
    std::string report_path;
    cmd_select->add_option("--field", field_path, "field checkpoint")->required();
    cmd_select->add_option("--projs", projs_path, "known projections")->required();
    cmd_select->add_option("--ratio", ratio, "selection ratio (1/4, 1/2, 1, 2)");
    cmd_select->add_option("--out", out_path, "synthesized set for the winners");
    cmd_select->add_option("--report", report_path, "JSON selection report");

    // train-drpr
    auto* cmd_drpr = app.add_subcommand("train-drpr", "train the projection refiner");
    cmd_drpr->add_option("--volume", vol_path, "training volume (.dnvol)")->required();
    cmd_drpr->add_option("--out", out_path, "denoiser checkpoint (.dndk)")->required();

    // refine
    auto* cmd_refine = app.add_subcommand("refine", "refine synthesized projections");
    std::string denoiser_path, strategy_name = "drat";
    cmd_refine->add_option("--projs", projs_path, "synthetic projections")->required();
    cmd_refine->add_option("--denoiser", denoiser_path, "denoiser checkpoint")->required();
    cmd_refine->add_option("--out", out_path, "refined projections")->required();
    cmd_refine->add_option("--strategy", strategy_name, "drat | minmax-roundtrip");

    // run / ablate
    auto* cmd_run = app.add_subcommand("run", "full iterative reconstruction");
    std::string out_dir;
    cmd_run->add_option("--out-dir", out_dir, "output directory")->required();
    cmd_run->add_option("--denoiser", denoiser_path, "reuse a denoiser checkpoint");

    auto* cmd_ablate = app.add_subcommand("ablate", "strategy/ratio/K ablation grid");
    cmd_ablate->add_option("--out-dir", out_dir, "output directory")->required();
    cmd_ablate->add_option("--denoiser", denoiser_path, "reuse a denoiser checkpoint");

    // evaluate
    auto* cmd_eval = app.add_subcommand("evaluate", "PSNR/SSIM between volumes");
    std::string ref_path;
    cmd_eval->add_option("--reference", ref_path, "reference volume")->required();
    cmd_eval->add_option("--volume", vol_path, "volume under test")->required();
    cmd_eval->add_option("--out", out_path, "JSON metric report");

    // export-plots
    auto* cmd_plots = app.add_subcommand("export-plots", "CSV + SVG metric curves");
    std::string manifest_path;
    cmd_plots->add_option("--manifest", manifest_path, "run manifest")->required();
    cmd_plots->add_option("--out-dir", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (threads > 0) omp_set_num_threads(threads);

        AppConfig cfg = config_path.empty() ? app_config_from_json(json::object())
                                            : load_app_config(config_path);
        if (seed_set) apply_seed(cfg, seed);

        if (app.got_subcommand(cmd_phantom)) {
            VolumeGrid vol = make_phantom(cfg.phantom, cfg.volume_dims, cfg.voxel_mm);
            write_volume(out_path, vol);
            std::cout << "wrote " << out_path << " (" << vol.dims[0] << "^3)\n";
        } else if (app.got_subcommand(cmd_project)) {
            VolumeGrid vol = read_volume(vol_path);
            std::vector<double> angles = cfg.geometry.angles_deg;
            if (n_views_override > 0) angles = uniform_angles(n_views_override);
            if (!angles_csv.empty()) angles = parse_angle_list(angles_csv);
            ScanGeometry geom = cfg.geometry;
            geom.angles_deg = angles;
            geom.n_views = static_cast<int>(angles.size());
            geom.validate();
            ProjectionSet set =
                forward_project(vol, geom, angles, cfg.projection_n_samples);
            write_projection_set(out_path, set);
            std::cout << "wrote " << set.images.size() << " projections to "
                      << out_path << "\n";
        } else if (app.got_subcommand(cmd_fdk)) {
            ProjectionSet projs = read_projection_set(projs_path);
            VolumeGrid rec = fdk_reconstruct(projs, cfg.volume_dims, cfg.voxel_mm);
            write_volume(out_path, rec);
            std::cout << "wrote " << out_path << "\n";
        } else if (app.got_subcommand(cmd_sart)) {
            ProjectionSet projs = read_projection_set(projs_path);
            SartOptions opts = cfg.sart;
            if (sart_iters > 0) opts.n_iters = sart_iters;
            if (sart_relax > 0.0) opts.relaxation = sart_relax;
            VolumeGrid rec = sart_reconstruct(projs, cfg.volume_dims, cfg.voxel_mm, opts);
            write_volume(out_path, rec);
            std::cout << "wrote " << out_path << "\n";
        } else if (app.got_subcommand(cmd_naf)) {
            ProjectionSet projs = read_projection_set(projs_path);
            TrainResultT<float> res;
            if (!init_path.empty()) {
                auto [icfg, iparams] = read_field_checkpoint(init_path);
                res = train_field<float>(projs, icfg, cfg.pipeline.train, &iparams);
                write_field_checkpoint(out_path, icfg, res.params);
            } else {
                res = train_field<float>(projs, cfg.pipeline.field, cfg.pipeline.train);
                write_field_checkpoint(out_path, cfg.pipeline.field, res.params);
            }
            std::cout << "final loss " << res.losses.back() << "; wrote " << out_path
                      << "\n";
        } else if (app.got_subcommand(cmd_synth)) {
            auto [fcfg, fparams] = read_field_checkpoint(field_path);
            ProjectionSet set;
            set.geometry = cfg.geometry;
            for (double a : parse_angle_list(angles_csv))
                set.images.push_back(synthesize_projection(
                    fparams, fcfg, cfg.geometry, a, cfg.pipeline.selection.n_samples,
                    cfg.pipeline.train.w2));
            std::sort(set.images.begin(), set.images.end(),
                      [](const ProjectionImage& a, const ProjectionImage& b) {
                          return a.angle_deg < b.angle_deg;
                      });
            write_projection_set(out_path, set);
            std::cout << "wrote " << set.images.size() << " synthesized views\n";
        } else if (app.got_subcommand(cmd_select)) {
            auto [fcfg, fparams] = read_field_checkpoint(field_path);
            ProjectionSet known = read_projection_set(projs_path);
            std::vector<SelectedView> views =
                select_views_for_ratio(fparams, fcfg, known.geometry, known.angles(),
                                       cfg.pipeline.selection, ratio);
            json report = json::array();
            ProjectionSet synth;
            synth.geometry = known.geometry;
            for (const auto& v : views) {
                report.push_back({{"theta_deg", v.theta_deg},
                                  {"score", v.score},
                                  {"interval_lo_deg", v.interval.lo_deg},
                                  {"interval_hi_deg", v.interval.hi_deg}});
                synth.images.push_back(synthesize_projection(
                    fparams, fcfg, known.geometry, v.theta_deg,
                    cfg.pipeline.selection.n_samples, cfg.pipeline.train.w2));
                std::cout << "selected " << v.theta_deg << " deg (score " << v.score
                          << ")\n";
            }
            if (!out_path.empty()) write_projection_set(out_path, synth);
            if (!report_path.empty()) write_json_file(report_path, report);
        } else if (app.got_subcommand(cmd_drpr)) {
            VolumeGrid gt = read_volume(vol_path);
            DenoiserParams den = train_refiner_from_corpus(cfg, gt);
            write_denoiser_checkpoint(out_path, den);
            std::cout << "wrote " << out_path << "\n";
        } else if (app.got_subcommand(cmd_refine)) {
            ProjectionSet synth = read_projection_set(projs_path);
            DenoiserParams den = read_denoiser_checkpoint(denoiser_path);
            DiffusionSchedule schedule = make_schedule(cfg.pipeline.refiner.T);
            DenoiserFn fn = make_denoiser_fn(den, synth.geometry.det_rows,
                                             synth.geometry.det_cols);
            ReuseStrategy strat = reuse_strategy_from_string(strategy_name);
            ProjectionSet out = synth;
            for (size_t i = 0; i < synth.images.size(); ++i) {
                uint64_t s = hash_combine(cfg.pipeline.refiner.refine_seed, i);
                if (strat == ReuseStrategy::drat) {
                    out.images[i] = refine_projection(synth.images[i], fn, schedule, s,
                                                      cfg.pipeline.refiner.add_noise);
                } else if (strat == ReuseStrategy::minmax_roundtrip) {
                    double mn = synth.images[0].pixels[0], mx = mn;
                    for (const auto& im : synth.images)
                        for (double v : im.pixels) {
                            mn = std::min(mn, v);
                            mx = std::max(mx, v);
                        }
                    double gamma = mx > mn ? 1.0 / (mx - mn) : 1.0;
                    out.images[i] = refine_projection_fixed_scale(
                        synth.images[i], gamma, -gamma * mn, fn, schedule, s,
                        cfg.pipeline.refiner.add_noise);
                }
            }
            write_projection_set(out_path, out);
            std::cout << "refined " << out.images.size() << " projections\n";
        } else if (app.got_subcommand(cmd_run)) {
            return run_pipeline_command(cfg, out_dir, denoiser_path, false);
        } else if (app.got_subcommand(cmd_ablate)) {
            return run_pipeline_command(cfg, out_dir, denoiser_path, true);
        } else if (app.got_subcommand(cmd_eval)) {
            VolumeGrid ref = read_volume(ref_path);
            VolumeGrid vol = read_volume(vol_path);
            MetricReport rep = evaluate_volumes(ref, vol);
            json j = {{"psnr_db", std::isfinite(rep.psnr_db) ? json(rep.psnr_db) : json()},
                      {"ssim", rep.ssim},
                      {"data_range", rep.data_range},
                      {"dims", {rep.dims[0], rep.dims[1], rep.dims[2]}}};
            if (!out_path.empty()) write_json_file(out_path, j);
            std::cout << "psnr " << rep.psnr_db << " dB, ssim " << rep.ssim << "\n";
        } else if (app.got_subcommand(cmd_plots)) {
            fs::create_directories(out_dir);
            export_metric_curves(read_json_file(manifest_path), out_dir);
            std::cout << "wrote metric curves to " << out_dir << "\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
