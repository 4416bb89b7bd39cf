#include "diffnaf/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "diffnaf/errors.hpp"
#include "diffnaf/phantom.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace diffnaf {

namespace {

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open for writing: " + path);
    }
    void magic(const char m[4]) { out_.write(m, 4); }
    template <typename T>
    void pod(T v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void f32_array(const double* v, size_t n, const char* what) {
        buf_.resize(n);
        for (size_t i = 0; i < n; ++i) {
            if (!std::isfinite(v[i]))
                throw IoError(std::string("refusing to write non-finite value in ") + what);
            buf_[i] = static_cast<float>(v[i]);
        }
        out_.write(reinterpret_cast<const char*>(buf_.data()),
                   static_cast<std::streamsize>(n * sizeof(float)));
    }
    void f32_array(const float* v, size_t n, const char* what) {
        for (size_t i = 0; i < n; ++i)
            if (!std::isfinite(v[i]))
                throw IoError(std::string("refusing to write non-finite value in ") + what);
        out_.write(reinterpret_cast<const char*>(v),
                   static_cast<std::streamsize>(n * sizeof(float)));
    }
    void close() {
        out_.flush();
        if (!out_) throw IoError("write failed: " + path_);
    }

private:
    std::string path_;
    std::ofstream out_;
    std::vector<float> buf_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary | std::ios::ate);
        if (!in) throw IoError("cannot open for reading: " + path);
        std::streamsize size = in.tellg();
        in.seekg(0);
        buf_.resize(static_cast<size_t>(size));
        in.read(buf_.data(), size);
        if (!in) throw IoError("read failed: " + path);
    }
    void magic(const char m[4]) {
        char got[4];
        raw(got, 4, "magic");
        if (std::memcmp(got, m, 4) != 0)
            throw IoError("bad magic in " + path_ + " (expected " +
                          std::string(m, 4) + ")");
    }
    template <typename T>
    T pod(const char* what) {
        T v;
        raw(reinterpret_cast<char*>(&v), sizeof(T), what);
        return v;
    }
    void f32_into(double* dst, size_t n, const char* what) {
        std::vector<float> tmp(n);
        raw(reinterpret_cast<char*>(tmp.data()), n * sizeof(float), what);
        for (size_t i = 0; i < n; ++i) dst[i] = tmp[i];
    }
    void f32_into(float* dst, size_t n, const char* what) {
        raw(reinterpret_cast<char*>(dst), n * sizeof(float), what);
    }
    void done() {
        if (pos_ != buf_.size())
            throw IoError("trailing bytes in " + path_ + ": expected " +
                          std::to_string(pos_) + " bytes total, file has " +
                          std::to_string(buf_.size()));
    }

private:
    void raw(char* dst, size_t n, const char* what) {
        if (pos_ + n > buf_.size())
            throw IoError("truncated file " + path_ + " while reading " + what +
                          ": expected " + std::to_string(pos_ + n) +
                          " bytes, file has " + std::to_string(buf_.size()));
        std::memcpy(dst, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::string path_;
    std::vector<char> buf_;
    size_t pos_ = 0;
};

constexpr uint32_t kFormatVersion = 1;

}  // namespace

void write_volume(const std::string& path, const VolumeGrid& vol) {
    Writer w(path);
    w.magic("DNVL");
    w.pod<uint32_t>(kFormatVersion);
    w.pod<uint32_t>(static_cast<uint32_t>(vol.dims[0]));
    w.pod<uint32_t>(static_cast<uint32_t>(vol.dims[1]));
    w.pod<uint32_t>(static_cast<uint32_t>(vol.dims[2]));
    w.pod<double>(vol.voxel_mm);
    w.pod<double>(vol.origin_mm.x);
    w.pod<double>(vol.origin_mm.y);
    w.pod<double>(vol.origin_mm.z);
    w.f32_array(vol.values.data(), vol.values.size(), "volume payload");
    w.close();
}

VolumeGrid read_volume(const std::string& path) {
    Reader r(path);
    r.magic("DNVL");
    uint32_t version = r.pod<uint32_t>("version");
    if (version != kFormatVersion)
        throw IoError("unsupported volume version " + std::to_string(version));
    std::array<int, 3> dims{static_cast<int>(r.pod<uint32_t>("nx")),
                            static_cast<int>(r.pod<uint32_t>("ny")),
                            static_cast<int>(r.pod<uint32_t>("nz"))};
    double voxel = r.pod<double>("voxel_mm");
    Vec3 origin{r.pod<double>("origin.x"), r.pod<double>("origin.y"),
                r.pod<double>("origin.z")};
    VolumeGrid vol(dims, voxel, origin);
    r.f32_into(vol.values.data(), vol.values.size(), "volume payload");
    r.done();
    return vol;
}

void write_projection_set(const std::string& path, const ProjectionSet& set) {
    set.validate();
    Writer w(path);
    w.magic("DNPS");
    w.pod<uint32_t>(kFormatVersion);
    const ScanGeometry& g = set.geometry;
    w.pod<uint32_t>(static_cast<uint32_t>(g.n_views));
    w.pod<double>(g.sod_mm);
    w.pod<double>(g.sdd_mm);
    w.pod<uint32_t>(static_cast<uint32_t>(g.det_rows));
    w.pod<uint32_t>(static_cast<uint32_t>(g.det_cols));
    w.pod<double>(g.pixel_pitch_mm);
    w.pod<double>(g.volume_extent_mm);
    for (double a : g.angles_deg) w.pod<double>(a);
    w.pod<uint32_t>(static_cast<uint32_t>(set.images.size()));
    for (const auto& im : set.images) {
        w.pod<double>(im.angle_deg);
        w.pod<uint8_t>(static_cast<uint8_t>(im.provenance));
        w.pod<float>(static_cast<float>(im.weight));
        w.f32_array(im.pixels.data(), im.pixels.size(), "projection pixels");
    }
    w.close();
}

ProjectionSet read_projection_set(const std::string& path) {
    Reader r(path);
    r.magic("DNPS");
    uint32_t version = r.pod<uint32_t>("version");
    if (version != kFormatVersion)
        throw IoError("unsupported projection-set version " + std::to_string(version));
    ProjectionSet set;
    ScanGeometry& g = set.geometry;
    g.n_views = static_cast<int>(r.pod<uint32_t>("n_views"));
    g.sod_mm = r.pod<double>("sod_mm");
    g.sdd_mm = r.pod<double>("sdd_mm");
    g.det_rows = static_cast<int>(r.pod<uint32_t>("det_rows"));
    g.det_cols = static_cast<int>(r.pod<uint32_t>("det_cols"));
    g.pixel_pitch_mm = r.pod<double>("pixel_pitch_mm");
    g.volume_extent_mm = r.pod<double>("volume_extent_mm");
    g.angles_deg.resize(static_cast<size_t>(g.n_views));
    for (auto& a : g.angles_deg) a = r.pod<double>("angle");
    uint32_t n_images = r.pod<uint32_t>("n_images");
    set.images.resize(n_images);
    for (auto& im : set.images) {
        im.angle_deg = r.pod<double>("image angle");
        im.provenance = static_cast<Provenance>(r.pod<uint8_t>("provenance"));
        im.weight = r.pod<float>("weight");
        im.rows = g.det_rows;
        im.cols = g.det_cols;
        im.pixels.resize(im.n_pixels());
        r.f32_into(im.pixels.data(), im.pixels.size(), "projection pixels");
    }
    r.done();
    set.validate();
    return set;
}

void write_field_checkpoint(const std::string& path, const FieldConfig& config,
                            const FieldParams& params) {
    config.validate();
    Writer w(path);
    w.magic("DNFD");
    w.pod<uint32_t>(kFormatVersion);
    const HashEncodingConfig& e = config.encoding;
    w.pod<uint32_t>(static_cast<uint32_t>(e.n_levels));
    w.pod<uint32_t>(static_cast<uint32_t>(e.features_per_level));
    w.pod<uint32_t>(e.table_size);
    w.pod<uint32_t>(static_cast<uint32_t>(e.base_resolution));
    w.pod<double>(e.per_level_scale);
    for (uint32_t p : e.hash_primes) w.pod<uint32_t>(p);
    w.pod<uint32_t>(static_cast<uint32_t>(config.hidden_widths.size()));
    for (int h : config.hidden_widths) w.pod<uint32_t>(static_cast<uint32_t>(h));
    for (const auto& t : params.tables) w.f32_array(t.data(), t.size(), "hash table");
    for (size_t l = 0; l < params.weights.size(); ++l) {
        w.f32_array(params.weights[l].data(), params.weights[l].size(), "mlp weights");
        w.f32_array(params.biases[l].data(), params.biases[l].size(), "mlp biases");
    }
    w.close();
}

std::pair<FieldConfig, FieldParams> read_field_checkpoint(const std::string& path) {
    Reader r(path);
    r.magic("DNFD");
    uint32_t version = r.pod<uint32_t>("version");
    if (version != kFormatVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    FieldConfig config;
    HashEncodingConfig& e = config.encoding;
    e.n_levels = static_cast<int>(r.pod<uint32_t>("n_levels"));
    e.features_per_level = static_cast<int>(r.pod<uint32_t>("features_per_level"));
    e.table_size = r.pod<uint32_t>("table_size");
    e.base_resolution = static_cast<int>(r.pod<uint32_t>("base_resolution"));
    e.per_level_scale = r.pod<double>("per_level_scale");
    for (auto& p : e.hash_primes) p = r.pod<uint32_t>("hash prime");
    uint32_t n_hidden = r.pod<uint32_t>("n_hidden");
    config.hidden_widths.resize(n_hidden);
    for (auto& h : config.hidden_widths) h = static_cast<int>(r.pod<uint32_t>("hidden width"));
    config.validate();

    FieldParams params;
    params.tables.resize(static_cast<size_t>(e.n_levels));
    for (auto& t : params.tables) {
        t.resize(static_cast<size_t>(e.table_size) * e.features_per_level);
        r.f32_into(t.data(), t.size(), "hash table");
    }
    auto dims = config.layer_dims();
    params.weights.resize(dims.size() - 1);
    params.biases.resize(dims.size() - 1);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        params.weights[l].resize(static_cast<size_t>(dims[l + 1]) * dims[l]);
        params.biases[l].resize(static_cast<size_t>(dims[l + 1]));
        r.f32_into(params.weights[l].data(), params.weights[l].size(), "mlp weights");
        r.f32_into(params.biases[l].data(), params.biases[l].size(), "mlp biases");
    }
    r.done();
    return {config, params};
}

void write_denoiser_checkpoint(const std::string& path, const DenoiserParams& params) {
    Writer w(path);
    w.magic("DNDK");
    w.pod<uint32_t>(kFormatVersion);
    w.pod<uint32_t>(static_cast<uint32_t>(params.config.base_channels));
    w.pod<uint32_t>(static_cast<uint32_t>(params.config.time_embed_dim));
    w.pod<uint64_t>(params.data.size());
    w.f32_array(params.data.data(), params.data.size(), "denoiser weights");
    w.close();
}

DenoiserParams read_denoiser_checkpoint(const std::string& path) {
    Reader r(path);
    r.magic("DNDK");
    uint32_t version = r.pod<uint32_t>("version");
    if (version != kFormatVersion)
        throw IoError("unsupported denoiser checkpoint version " + std::to_string(version));
    DenoiserParams p;
    p.config.base_channels = static_cast<int>(r.pod<uint32_t>("base_channels"));
    p.config.time_embed_dim = static_cast<int>(r.pod<uint32_t>("time_embed_dim"));
    p.config.validate();
    uint64_t n = r.pod<uint64_t>("n_params");
    DenoiserParams check = init_denoiser<float>(p.config, 0);
    if (n != check.data.size())
        throw IoError("denoiser checkpoint parameter count " + std::to_string(n) +
                      " does not match config (" + std::to_string(check.data.size()) + ")");
    p.data.resize(n);
    r.f32_into(p.data.data(), p.data.size(), "denoiser weights");
    r.done();
    return p;
}

// ---------------------------------------------------------------------------
// JSON config
// ---------------------------------------------------------------------------

json default_config_json() {
    json j;
    j["geometry"] = {{"n_views", 20},        {"sod_mm", 1000.0},
                     {"sdd_mm", 1500.0},     {"det_rows", 64},
                     {"det_cols", 64},       {"pixel_pitch_mm", 4.0},
                     {"volume_extent_mm", 128.0}};
    j["phantom"] = json::array(
        {{{"center_mm", {-20.0, -15.0, 10.0}}, {"semi_axes_mm", {35.0, 35.0, 35.0}}, {"mu", 0.02}},
         {{"center_mm", {30.0, 25.0, -12.0}}, {"semi_axes_mm", {22.0, 22.0, 22.0}}, {"mu", 0.015}},
         {{"center_mm", {8.0, -28.0, -20.0}}, {"semi_axes_mm", {10.0, 10.0, 10.0}}, {"mu", 0.025}},
         {{"center_mm", {-5.0, 18.0, 22.0}},
          {"semi_axes_mm", {28.0, 14.0, 9.0}},
          {"rotation_z_deg", 30.0},
          {"mu", 0.012}}});
    j["volume"] = {{"dims", {64, 64, 64}}, {"voxel_mm", 4.0}};
    j["projection"] = {{"n_samples", 256}};
    j["field"] = {{"n_levels", 8},       {"features_per_level", 2},
                  {"log2_table_size", 16}, {"base_resolution", 16},
                  {"per_level_scale", 1.5}, {"hidden_widths", {64, 64}}};
    j["train"] = {{"steps_per_outer_iter", 1500},
                  {"rays_per_batch", 256},
                  {"samples_per_ray", 64},
                  {"lr_hash", 0.01},
                  {"lr_mlp", 0.001},
                  {"lr_decay_floor", 0.1},
                  {"w1", 1.0},
                  {"w2", 0.5},
                  {"rng_seed", 1234},
                  {"jitter", true}};
    j["selection"] = {{"candidates_per_gap", 5},
                      {"interval_divisor_a", 4.0},
                      {"n_samples", 64}};
    j["refiner"] = {{"T", 50},
                    {"base_channels", 16},
                    {"time_embed_dim", 16},
                    {"train_steps", 2000},
                    {"batch", 4},
                    {"lr", 0.001},
                    {"lambda_res", 1.0},
                    {"lambda_eps", 1.0},
                    {"seed", 99},
                    {"add_noise", true}};
    j["corpus"] = {{"n_clean_views", 120},  {"undertrain_views", 10},
                   {"undertrain_steps", 200}, {"n_samples", 256},
                   {"blur_sigma_lo", 0.5},   {"blur_sigma_hi", 1.5},
                   {"noise_frac_lo", 0.005}, {"noise_frac_hi", 0.02},
                   {"holdout_every", 6},     {"seed", 4242}};
    j["pipeline"] = {{"K", 3},
                     {"ratio", 1.0},
                     {"reuse_strategy", "drat"},
                     {"oracle_refiner", false},
                     {"refine_seed", 7}};
    j["sart"] = {{"n_iters", 20}, {"relaxation", 0.5}, {"n_samples", 256}};
    j["ablation"] = {{"strategies", {"none", "minmax-roundtrip", "drat"}},
                     {"ratios", {1.0}},
                     {"ks", {3}}};
    return j;
}

namespace {

Vec3 vec3_from(const json& j) {
    if (!j.is_array() || j.size() != 3)
        throw IoError("config: expected a 3-element array for a vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

AppConfig app_config_from_json(const json& in) {
    // overlay user values onto the defaults
    json j = default_config_json();
    j.merge_patch(in);

    AppConfig cfg;
    cfg.raw = j;

    const json& g = j["geometry"];
    cfg.geometry = make_circular_geometry(
        g["n_views"].get<int>(), g["sod_mm"].get<double>(), g["sdd_mm"].get<double>(),
        g["det_rows"].get<int>(), g["det_cols"].get<int>(),
        g["pixel_pitch_mm"].get<double>(), g["volume_extent_mm"].get<double>());
    if (g.contains("angles_deg")) {
        cfg.geometry.angles_deg = g["angles_deg"].get<std::vector<double>>();
        cfg.geometry.n_views = static_cast<int>(cfg.geometry.angles_deg.size());
        cfg.geometry.validate();
    }

    for (const json& e : j["phantom"]) {
        EllipsoidSpec spec;
        spec.center_mm = vec3_from(e.at("center_mm"));
        spec.semi_axes_mm = vec3_from(e.at("semi_axes_mm"));
        if (e.contains("rotation_z_deg"))
            spec.rotation = rotation_z(e["rotation_z_deg"].get<double>());
        spec.mu = e.at("mu").get<double>();
        spec.validate();
        cfg.phantom.push_back(spec);
    }

    const json& v = j["volume"];
    auto dims = v["dims"].get<std::vector<int>>();
    if (dims.size() != 3) throw IoError("config: volume.dims must have 3 entries");
    cfg.volume_dims = {dims[0], dims[1], dims[2]};
    cfg.voxel_mm = v["voxel_mm"].get<double>();
    cfg.projection_n_samples = j["projection"]["n_samples"].get<int>();

    const json& f = j["field"];
    FieldConfig& fc = cfg.pipeline.field;
    fc.encoding.n_levels = f["n_levels"].get<int>();
    fc.encoding.features_per_level = f["features_per_level"].get<int>();
    fc.encoding.table_size = 1u << f["log2_table_size"].get<int>();
    fc.encoding.base_resolution = f["base_resolution"].get<int>();
    fc.encoding.per_level_scale = f["per_level_scale"].get<double>();
    fc.hidden_widths = f["hidden_widths"].get<std::vector<int>>();
    fc.validate();

    const json& t = j["train"];
    TrainConfig& tc = cfg.pipeline.train;
    tc.steps_per_outer_iter = t["steps_per_outer_iter"].get<int>();
    tc.rays_per_batch = t["rays_per_batch"].get<int>();
    tc.samples_per_ray = t["samples_per_ray"].get<int>();
    tc.lr_hash = t["lr_hash"].get<double>();
    tc.lr_mlp = t["lr_mlp"].get<double>();
    tc.lr_decay_floor = t["lr_decay_floor"].get<double>();
    tc.w1 = t["w1"].get<double>();
    tc.w2 = t["w2"].get<double>();
    tc.rng_seed = t["rng_seed"].get<uint64_t>();
    tc.jitter = t["jitter"].get<bool>();
    tc.validate();

    const json& s = j["selection"];
    cfg.pipeline.selection.candidates_per_gap = s["candidates_per_gap"].get<int>();
    cfg.pipeline.selection.interval_divisor_a = s["interval_divisor_a"].get<double>();
    cfg.pipeline.selection.n_samples = s["n_samples"].get<int>();

    const json& r = j["refiner"];
    RefinerConfig& rf = cfg.pipeline.refiner;
    rf.T = r["T"].get<int>();
    rf.net.base_channels = r["base_channels"].get<int>();
    rf.net.time_embed_dim = r["time_embed_dim"].get<int>();
    rf.train.steps = r["train_steps"].get<int>();
    rf.train.batch = r["batch"].get<int>();
    rf.train.lr = r["lr"].get<double>();
    rf.train.lambda_res = r["lambda_res"].get<double>();
    rf.train.lambda_eps = r["lambda_eps"].get<double>();
    rf.train.seed = r["seed"].get<uint64_t>();
    rf.add_noise = r["add_noise"].get<bool>();

    const json& c = j["corpus"];
    cfg.corpus.n_clean_views = c["n_clean_views"].get<int>();
    cfg.corpus.undertrain_views = c["undertrain_views"].get<int>();
    cfg.corpus.undertrain_steps = c["undertrain_steps"].get<int>();
    cfg.corpus.n_samples = c["n_samples"].get<int>();
    cfg.corpus.blur_sigma_lo = c["blur_sigma_lo"].get<double>();
    cfg.corpus.blur_sigma_hi = c["blur_sigma_hi"].get<double>();
    cfg.corpus.noise_frac_lo = c["noise_frac_lo"].get<double>();
    cfg.corpus.noise_frac_hi = c["noise_frac_hi"].get<double>();
    cfg.corpus.holdout_every = c["holdout_every"].get<int>();
    cfg.corpus.seed = c["seed"].get<uint64_t>();

    const json& p = j["pipeline"];
    cfg.pipeline.K = p["K"].get<int>();
    cfg.pipeline.ratio = p["ratio"].get<double>();
    cfg.pipeline.reuse = reuse_strategy_from_string(p["reuse_strategy"].get<std::string>());
    cfg.pipeline.oracle_refiner = p["oracle_refiner"].get<bool>();
    cfg.pipeline.refiner.refine_seed = p["refine_seed"].get<uint64_t>();
    cfg.pipeline.forward_n_samples = cfg.projection_n_samples;
    cfg.pipeline.render_dims = cfg.volume_dims;
    cfg.pipeline.render_voxel_mm = cfg.voxel_mm;
    cfg.pipeline.validate();

    const json& sa = j["sart"];
    cfg.sart.n_iters = sa["n_iters"].get<int>();
    cfg.sart.relaxation = sa["relaxation"].get<double>();
    cfg.sart.n_samples = sa["n_samples"].get<int>();

    const json& ab = j["ablation"];
    cfg.ablation_strategies = ab["strategies"].get<std::vector<std::string>>();
    cfg.ablation_ratios = ab["ratios"].get<std::vector<double>>();
    cfg.ablation_ks = ab["ks"].get<std::vector<int>>();
    return cfg;
}

AppConfig load_app_config(const std::string& path) {
    return app_config_from_json(read_json_file(path));
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw IoError("JSON parse error in " + path + ": " + e.what());
    }
    return j;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

namespace {

json number_or_null(double v) {
    if (std::isfinite(v)) return v;
    return nullptr;
}

}  // namespace

json manifest_from_run(const json& config_echo, const PipelineResult& result) {
    json reports = json::array();
    for (const IterationReport& r : result.reports) {
        json jr;
        jr["k"] = r.k;
        jr["added_angles"] = r.added_angles;
        jr["refinement_deltas"] = r.refinement_deltas;
        jr["psnr_db"] = number_or_null(r.psnr_db);
        jr["ssim"] = number_or_null(r.ssim);
        jr["final_train_loss"] = r.final_train_loss;
        jr["n_projections"] = r.n_projections;
        jr["wall_seconds"] = r.wall_seconds;
        reports.push_back(jr);
    }
    json m;
    m["format"] = "diffnaf-run-manifest";
    m["version"] = 1;
    m["config"] = config_echo;
    m["reports"] = reports;
    return m;
}

namespace {

bool type_matches(const json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "number") return v.is_number();
    if (t == "integer") return v.is_number_integer();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    return false;
}

void validate_node(const json& doc, const json& schema, const std::string& path) {
    if (schema.contains("type")) {
        const json& t = schema["type"];
        bool ok = false;
        if (t.is_string()) {
            ok = type_matches(doc, t.get<std::string>());
        } else if (t.is_array()) {
            for (const json& opt : t)
                if (type_matches(doc, opt.get<std::string>())) ok = true;
        }
        if (!ok)
            throw IoError("schema violation at " + path + ": unexpected type " +
                          std::string(doc.type_name()));
    }
    if (schema.contains("required")) {
        for (const json& key : schema["required"])
            if (!doc.contains(key.get<std::string>()))
                throw IoError("schema violation at " + path + ": missing required key '" +
                              key.get<std::string>() + "'");
    }
    if (schema.contains("properties") && doc.is_object()) {
        for (auto it = schema["properties"].begin(); it != schema["properties"].end();
             ++it) {
            if (doc.contains(it.key()))
                validate_node(doc[it.key()], it.value(), path + "/" + it.key());
        }
    }
    if (schema.contains("items") && doc.is_array()) {
        size_t i = 0;
        for (const json& el : doc) {
            validate_node(el, schema["items"], path + "/" + std::to_string(i));
            ++i;
        }
    }
}

}  // namespace

void validate_against_schema(const json& doc, const json& schema) {
    validate_node(doc, schema, "");
}

json manifest_schema() {
    static const char* kSchema = R"({
  "type": "object",
  "required": ["format", "version", "config", "reports"],
  "properties": {
    "format": {"type": "string"},
    "version": {"type": "integer"},
    "config": {"type": "object"},
    "reports": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["k", "psnr_db", "ssim", "n_projections", "added_angles"],
        "properties": {
          "k": {"type": "integer"},
          "psnr_db": {"type": ["number", "null"]},
          "ssim": {"type": ["number", "null"]},
          "n_projections": {"type": "integer"},
          "added_angles": {"type": "array", "items": {"type": "number"}},
          "refinement_deltas": {"type": "array", "items": {"type": "number"}},
          "final_train_loss": {"type": "number"},
          "wall_seconds": {"type": "number"}
        }
      }
    }
  }
})";
    return json::parse(kSchema);
}

// ---------------------------------------------------------------------------
// Plot export
// ---------------------------------------------------------------------------

namespace {

void write_svg_curve(const std::string& path, const std::vector<double>& xs,
                     const std::vector<double>& ys, const std::string& title) {
    const int W = 640, H = 420, ml = 70, mr = 20, mt = 40, mb = 50;
    double xmin = xs.front(), xmax = xs.back();
    if (xmax == xmin) xmax = xmin + 1;
    double ymin = ys[0], ymax = ys[0];
    for (double y : ys) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
    }
    if (ymax == ymin) {
        ymax += 1;
        ymin -= 1;
    }
    double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\""
        << H << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr
        << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << H - mb << "\" stroke=\"black\"/>\n";
    for (size_t i = 0; i < xs.size(); ++i) {
        svg << "<text x=\"" << px(xs[i]) << "\" y=\"" << H - mb + 20
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
            << xs[i] << "</text>\n";
    }
    for (int i = 0; i <= 4; ++i) {
        double y = ymin + (ymax - ymin) * i / 4;
        std::ostringstream lab;
        lab.precision(4);
        lab << y;
        svg << "<text x=\"" << ml - 8 << "\" y=\"" << py(y) + 4
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">"
            << lab.str() << "</text>\n";
    }
    svg << "<polyline fill=\"none\" stroke=\"#2060c0\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < xs.size(); ++i) svg << px(xs[i]) << "," << py(ys[i]) << " ";
    svg << "\"/>\n";
    for (size_t i = 0; i < xs.size(); ++i)
        svg << "<circle cx=\"" << px(xs[i]) << "\" cy=\"" << py(ys[i])
            << "\" r=\"3\" fill=\"#2060c0\"/>\n";
    svg << "</svg>\n";

    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << svg.str();
}

}  // namespace

void export_metric_curves(const json& manifest, const std::string& out_dir) {
    if (!manifest.contains("reports") || !manifest["reports"].is_array() ||
        manifest["reports"].empty())
        throw IoError("export_metric_curves: manifest has no reports");
    std::vector<double> ks, psnrs, ssims;
    for (const json& r : manifest["reports"]) {
        ks.push_back(r.at("k").get<double>());
        psnrs.push_back(r.at("psnr_db").is_null() ? 0.0 : r["psnr_db"].get<double>());
        ssims.push_back(r.at("ssim").is_null() ? 0.0 : r["ssim"].get<double>());
    }

    std::ofstream csv(out_dir + "/metrics.csv");
    if (!csv) throw IoError("cannot open for writing: " + out_dir + "/metrics.csv");
    csv << "k,psnr_db,ssim,n_projections\n";
    for (const json& r : manifest["reports"]) {
        csv << r.at("k").get<int>() << ",";
        if (r.at("psnr_db").is_null())
            csv << "";
        else
            csv << r["psnr_db"].get<double>();
        csv << ",";
        if (r.at("ssim").is_null())
            csv << "";
        else
            csv << r["ssim"].get<double>();
        csv << "," << r.at("n_projections").get<int>() << "\n";
    }

    write_svg_curve(out_dir + "/psnr.svg", ks, psnrs, "PSNR (dB) per iteration");
    write_svg_curve(out_dir + "/ssim.svg", ks, ssims, "SSIM per iteration");
}

}  // namespace diffnaf
