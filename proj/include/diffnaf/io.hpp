#pragma once

#include <string>
#include <utility>

#include <json.hpp>

#include "diffnaf/diffusion.hpp"
#include "diffnaf/field.hpp"
#include "diffnaf/phantom.hpp"
#include "diffnaf/pipeline.hpp"
#include "diffnaf/projection.hpp"
#include "diffnaf/projector.hpp"
#include "diffnaf/volume.hpp"

namespace diffnaf {

using nlohmann::json;

// All binary formats: 4-byte magic + u32 version header, little-endian
// payloads, float32 arrays. Writers reject non-finite values; readers throw
// IoError naming expected vs actual byte counts on truncation.

void write_volume(const std::string& path, const VolumeGrid& vol);
VolumeGrid read_volume(const std::string& path);

void write_projection_set(const std::string& path, const ProjectionSet& set);
ProjectionSet read_projection_set(const std::string& path);

void write_field_checkpoint(const std::string& path, const FieldConfig& config,
                            const FieldParams& params);
std::pair<FieldConfig, FieldParams> read_field_checkpoint(const std::string& path);

void write_denoiser_checkpoint(const std::string& path, const DenoiserParams& params);
DenoiserParams read_denoiser_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// JSON: experiment config, run manifest, schema validation
// ---------------------------------------------------------------------------

struct AppConfig {
    ScanGeometry geometry;
    std::vector<EllipsoidSpec> phantom;
    std::array<int, 3> volume_dims{64, 64, 64};
    double voxel_mm = 4.0;
    int projection_n_samples = 256;
    PipelineConfig pipeline;  // holds field/train/selection/refiner settings
    CorpusConfig corpus;
    SartOptions sart;
    std::vector<std::string> ablation_strategies{"none", "minmax-roundtrip", "drat"};
    std::vector<double> ablation_ratios{1.0};
    std::vector<int> ablation_ks{3};
    json raw;  // verbatim config echo for manifests
};

json default_config_json();
AppConfig app_config_from_json(const json& j);
AppConfig load_app_config(const std::string& path);

json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const json& j);

json manifest_from_run(const json& config_echo, const PipelineResult& result);

// Minimal structural JSON-schema check (type / required / properties /
// items; type may be a string or an array of strings). Throws IoError with
// the offending path.
void validate_against_schema(const json& doc, const json& schema);

// The manifest schema shipped with the repo (share/manifest.schema.json).
json manifest_schema();

// CSV + SVG curves of per-iteration metrics from a run manifest.
void export_metric_curves(const json& manifest, const std::string& out_dir);

}  // namespace diffnaf
