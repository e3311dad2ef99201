// Experiment scenario files.
//
// A scenario is a JSON document describing one simulated deployment: the
// modulation grid, the link budget, the array and its reduction schedule,
// the field of view, the search and CFAR settings, and the target or user
// population.  Parsing starts from a profile's defaults, overlays the file's
// sections, converts every engineering unit (degrees, dBm, dB) to SI, and
// validates the result field by field; violations throw ConfigError naming
// the offending path, which the CLI maps to exit code 2.
//
// Reproducibility bookkeeping: `config_digest` hashes the canonical
// serialization of the effective configuration (master seed excluded, since
// the seed is reported separately), so a result file header identifies the
// exact settings that produced it.
#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "otfsradar/array.hpp"
#include "otfsradar/beams.hpp"
#include "otfsradar/otfs.hpp"

#include "json.hpp"

namespace otfsradar {

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

// `Desk` keeps every Monte Carlo loop laptop-sized; `Paper` selects the
// full-scale system of the headline experiments (64 x 64 grid, 64 antennas)
// and is orders of magnitude slower per trial.
enum class Profile { Desk, Paper };

inline Profile parse_profile(const std::string& name) {
    if (name == "desk") return Profile::Desk;
    if (name == "paper") return Profile::Paper;
    throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
}

inline std::string to_string(Profile p) {
    return p == Profile::Desk ? "desk" : "paper";
}

// ---------------------------------------------------------------------------
// Scenario data model
// ---------------------------------------------------------------------------

// A scalar drawn fresh each trial from [lo, hi]; lo == hi pins it.
struct RandomInterval {
    double lo = 0.0;
    double hi = 0.0;

    bool fixed() const { return lo == hi; }
    double draw(Rng& rng) const {
        return fixed() ? lo : lo + (hi - lo) * rng.uniform();
    }
};

// One discovery-mode scatterer: a fixed range with per-trial randomized
// radial speed and angle of arrival.
struct TargetSpec {
    double range_m = 30.0;
    RandomInterval speed_mps{0.0, 0.0};
    RandomInterval aoa_deg{0.0, 0.0};
};

// One tracking-mode user: fully pinned kinematics; the prior handed to the
// estimator is the true parameter triple (tracking presumes the scheduler
// already knows each user to within a coarse cell).
struct UserSpec {
    double range_m = 10.0;
    double speed_mps = 0.0;
    double aoa_deg = 0.0;
};

struct OtfsSection {
    int doppler_bins = 8;
    int delay_bins = 8;
    double subcarrier_spacing_hz = 1e6;
};

struct LinkSection {
    double carrier_hz = 28.25e9;
    double tx_power_dbm = 24.0;
    double noise_density_w_per_hz = 2e-21;
    double noise_figure_db = 3.0;
    double rcs_m2 = 1.0;
};

struct ArraySection {
    int antennas = 16;
    int rf_chains = 4;
};

struct FovSection {
    double min_deg = -45.0;
    double max_deg = 45.0;
};

struct BeamsSection {
    std::string strategy = "flat_top";
    std::uint64_t schedule_seed = 1;
    double wide_beam_width_deg = 90.0;   // Tx flat-top mainlobe span
    double wide_beam_floor_db = -20.0;
    double codebook_coarse_step_deg = 15.0;
    double codebook_fine_step_deg = 5.0;
    double codebook_beam_width_deg = 15.0;  // fundamental atom mainlobe span
    double codebook_floor_db = -20.0;
    int synthesis_grid_points = 181;
    double eps_orth = 0.1;  // intra-block atom coupling bound
};

struct SearchSection {
    double angle_step_deg = 1.0;
    int refine_factor = 10;
    int zoom_stages = 2;          // tracking only
    bool full_coupling = false;   // tracking only
};

struct CfarSection {
    std::array<int, 3> window = {3, 3, 3};
    std::array<int, 3> guard = {1, 1, 1};
    double kappa = 0.75;
    double alpha = 1.0;
    double target_pfa = 0.01;
};

struct DiscoverySection {
    std::vector<double> range_bins_m;  // sweep applied to the first target
    std::vector<int> blocks_list;      // block counts to compare
};

struct CrlbSection {
    std::vector<double> snr_db = {-10.0, 0.0, 10.0, 20.0, 30.0};
    std::vector<int> blocks = {2, 6};
};

struct ScenarioFile {
    int version = 1;
    Profile profile = Profile::Desk;
    OtfsSection otfs;
    LinkSection link;
    ArraySection array;
    FovSection fov;
    BeamsSection beams;
    int blocks = 6;
    SearchSection search;
    CfarSection cfar;
    DiscoverySection discovery;
    CrlbSection crlb;
    std::vector<TargetSpec> targets;
    std::vector<UserSpec> users;
    int trials = 200;
    std::uint64_t master_seed = 1;
    bool noiseless = false;

    // -- derived views (SI units) -------------------------------------------

    OtfsConfig otfs_config() const {
        return OtfsConfig(otfs.doppler_bins, otfs.delay_bins,
                          otfs.subcarrier_spacing_hz);
    }

    // Occupied bandwidth follows the modulation grid; the noise floor is
    // N0 * W * NF.
    LinkBudget link_budget() const {
        LinkBudget lb;
        lb.carrier_hz = link.carrier_hz;
        lb.tx_power_w = dbm_to_watt(link.tx_power_dbm);
        lb.noise_density_w_per_hz = link.noise_density_w_per_hz;
        lb.noise_figure = db_to_linear(link.noise_figure_db);
        lb.rcs_m2 = link.rcs_m2;
        lb.bandwidth_hz = otfs.delay_bins * otfs.subcarrier_spacing_hz;
        return lb;
    }

    double fov_min_rad() const { return deg_to_rad(fov.min_deg); }
    double fov_max_rad() const { return deg_to_rad(fov.max_deg); }
    double fov_center_rad() const { return (fov_min_rad() + fov_max_rad()) / 2.0; }

    int angle_count() const {
        const double span = fov.max_deg - fov.min_deg;
        return static_cast<int>(std::llround(span / search.angle_step_deg)) + 1;
    }

    double doppler_of_speed(double speed_mps) const {
        return 2.0 * speed_mps * link.carrier_hz / kSpeedOfLight;
    }
    double delay_of_range(double range_m) const {
        return 2.0 * range_m / kSpeedOfLight;
    }
    double speed_of_doppler(double nu_hz) const {
        return nu_hz * kSpeedOfLight / (2.0 * link.carrier_hz);
    }
    double range_of_delay(double tau_s) const {
        return tau_s * kSpeedOfLight / 2.0;
    }
};

// ---------------------------------------------------------------------------
// Canonical serialization and digest
// ---------------------------------------------------------------------------

namespace scenario_detail {

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace scenario_detail

// Canonical JSON image of the effective configuration.  The master seed is
// deliberately absent: result headers report (digest, seed) as separate
// fields, so one digest covers every seed of the same experiment.
inline nlohmann::json to_json(const ScenarioFile& s) {
    nlohmann::json j;
    j["version"] = s.version;
    j["profile"] = to_string(s.profile);
    j["otfs"] = {{"doppler_bins", s.otfs.doppler_bins},
                 {"delay_bins", s.otfs.delay_bins},
                 {"subcarrier_spacing_hz", s.otfs.subcarrier_spacing_hz}};
    j["link"] = {{"carrier_hz", s.link.carrier_hz},
                 {"tx_power_dbm", s.link.tx_power_dbm},
                 {"noise_density_w_per_hz", s.link.noise_density_w_per_hz},
                 {"noise_figure_db", s.link.noise_figure_db},
                 {"rcs_m2", s.link.rcs_m2}};
    j["array"] = {{"antennas", s.array.antennas},
                  {"rf_chains", s.array.rf_chains}};
    j["fov"] = {{"min_deg", s.fov.min_deg}, {"max_deg", s.fov.max_deg}};
    j["beams"] = {{"strategy", s.beams.strategy},
                  {"schedule_seed", s.beams.schedule_seed},
                  {"wide_beam_width_deg", s.beams.wide_beam_width_deg},
                  {"wide_beam_floor_db", s.beams.wide_beam_floor_db},
                  {"codebook_coarse_step_deg", s.beams.codebook_coarse_step_deg},
                  {"codebook_fine_step_deg", s.beams.codebook_fine_step_deg},
                  {"codebook_beam_width_deg", s.beams.codebook_beam_width_deg},
                  {"codebook_floor_db", s.beams.codebook_floor_db},
                  {"synthesis_grid_points", s.beams.synthesis_grid_points},
                  {"eps_orth", s.beams.eps_orth}};
    j["blocks"] = s.blocks;
    j["search"] = {{"angle_step_deg", s.search.angle_step_deg},
                   {"refine_factor", s.search.refine_factor},
                   {"zoom_stages", s.search.zoom_stages},
                   {"full_coupling", s.search.full_coupling}};
    j["cfar"] = {{"window", s.cfar.window},
                 {"guard", s.cfar.guard},
                 {"kappa", s.cfar.kappa},
                 {"alpha", s.cfar.alpha},
                 {"target_pfa", s.cfar.target_pfa}};
    j["discovery"] = {{"range_bins_m", s.discovery.range_bins_m},
                      {"blocks_list", s.discovery.blocks_list}};
    j["crlb"] = {{"snr_db", s.crlb.snr_db}, {"blocks", s.crlb.blocks}};
    j["targets"] = nlohmann::json::array();
    for (const auto& t : s.targets)
        j["targets"].push_back(
            {{"range_m", t.range_m},
             {"speed_mps", {t.speed_mps.lo, t.speed_mps.hi}},
             {"aoa_deg", {t.aoa_deg.lo, t.aoa_deg.hi}}});
    j["users"] = nlohmann::json::array();
    for (const auto& u : s.users)
        j["users"].push_back({{"range_m", u.range_m},
                              {"speed_mps", u.speed_mps},
                              {"aoa_deg", u.aoa_deg}});
    j["trials"] = s.trials;
    j["noiseless"] = s.noiseless;
    return j;
}

inline std::string config_digest(const ScenarioFile& s) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(
                      scenario_detail::fnv1a64(to_json(s).dump())));
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace scenario_detail {

inline std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

[[noreturn]] inline void fail(const std::string& path, const std::string& what) {
    throw ConfigError("scenario: " + path + ": " + what);
}

inline void check_keys(const nlohmann::json& obj, const std::string& path,
                       std::initializer_list<const char*> allowed) {
    if (!obj.is_object())
        fail(path.empty() ? "(root)" : path, "expected a JSON object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!ok.count(it.key()))
            fail(join(path, it.key()), "unknown key");
}

inline double get_double(const nlohmann::json& obj, const std::string& path,
                         const char* key, double fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number()) fail(join(path, key), "expected a number");
    return v.get<double>();
}

inline int get_int(const nlohmann::json& obj, const std::string& path,
                   const char* key, int fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_integer()) fail(join(path, key), "expected an integer");
    return v.get<int>();
}

inline std::uint64_t get_u64(const nlohmann::json& obj, const std::string& path,
                             const char* key, std::uint64_t fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0 &&
                                   !v.is_number_unsigned()))
        fail(join(path, key), "expected a nonnegative integer");
    return v.get<std::uint64_t>();
}

inline bool get_bool(const nlohmann::json& obj, const std::string& path,
                     const char* key, bool fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_boolean()) fail(join(path, key), "expected true or false");
    return v.get<bool>();
}

inline std::string get_string(const nlohmann::json& obj, const std::string& path,
                              const char* key, const std::string& fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_string()) fail(join(path, key), "expected a string");
    return v.get<std::string>();
}

// Accepts either a number (pinned value) or a two-element [lo, hi] array.
inline RandomInterval get_interval(const nlohmann::json& obj,
                                   const std::string& path, const char* key,
                                   RandomInterval fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (v.is_number()) {
        const double x = v.get<double>();
        return RandomInterval{x, x};
    }
    if (v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number()) {
        RandomInterval r{v[0].get<double>(), v[1].get<double>()};
        if (r.lo > r.hi)
            fail(join(path, key), "interval must satisfy lo <= hi");
        return r;
    }
    fail(join(path, key), "expected a number or a [lo, hi] pair");
}

inline std::array<int, 3> get_int3(const nlohmann::json& obj,
                                   const std::string& path, const char* key,
                                   std::array<int, 3> fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_array() || v.size() != 3)
        fail(join(path, key), "expected a three-element integer array");
    std::array<int, 3> out;
    for (int i = 0; i < 3; ++i) {
        if (!v[i].is_number_integer())
            fail(join(path, key), "expected a three-element integer array");
        out[i] = v[i].get<int>();
    }
    return out;
}

inline std::vector<double> get_double_list(const nlohmann::json& obj,
                                           const std::string& path,
                                           const char* key,
                                           std::vector<double> fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_array()) fail(join(path, key), "expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
        if (!e.is_number()) fail(join(path, key), "expected an array of numbers");
        out.push_back(e.get<double>());
    }
    return out;
}

inline std::vector<int> get_int_list(const nlohmann::json& obj,
                                     const std::string& path, const char* key,
                                     std::vector<int> fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_array()) fail(join(path, key), "expected an array of integers");
    std::vector<int> out;
    for (const auto& e : v) {
        if (!e.is_number_integer())
            fail(join(path, key), "expected an array of integers");
        out.push_back(e.get<int>());
    }
    return out;
}

}  // namespace scenario_detail

// Baseline configuration per profile.  The desk profile keeps a full
// Monte Carlo run in the minutes range on one core; the paper profile holds
// the full-scale system parameters of the reference experiments.
inline ScenarioFile scenario_defaults(Profile profile) {
    ScenarioFile s;
    s.profile = profile;
    if (profile == Profile::Paper) {
        s.otfs.doppler_bins = 64;
        s.otfs.delay_bins = 64;
        s.array.antennas = 64;
        s.array.rf_chains = 4;
        s.beams.eps_orth = 0.2;
    }
    return s;
}

// Overlays `j` on the profile defaults, converts units, and validates.
// Every violation names the JSON path of the offending field.
inline ScenarioFile parse_scenario(const nlohmann::json& j, Profile profile) {
    using namespace scenario_detail;
    if (!j.is_object()) fail("(root)", "expected a JSON object");
    check_keys(j, "",
               {"version", "profile", "otfs", "link", "array", "fov", "beams",
                "blocks", "search", "cfar", "discovery", "crlb", "targets",
                "users", "trials", "master_seed", "noiseless"});

    // A profile named inside the file re-bases the defaults; the caller's
    // profile applies when the file stays silent.
    if (j.contains("profile"))
        profile = parse_profile(get_string(j, "", "profile", "desk"));
    ScenarioFile s = scenario_defaults(profile);

    s.version = get_int(j, "", "version", s.version);
    if (s.version != 1) fail("version", "unsupported scenario version");

    if (j.contains("otfs")) {
        const auto& o = j.at("otfs");
        check_keys(o, "otfs",
                   {"doppler_bins", "delay_bins", "subcarrier_spacing_hz"});
        s.otfs.doppler_bins = get_int(o, "otfs", "doppler_bins", s.otfs.doppler_bins);
        s.otfs.delay_bins = get_int(o, "otfs", "delay_bins", s.otfs.delay_bins);
        s.otfs.subcarrier_spacing_hz =
            get_double(o, "otfs", "subcarrier_spacing_hz",
                       s.otfs.subcarrier_spacing_hz);
    }
    if (s.otfs.doppler_bins < 1) fail("otfs.doppler_bins", "must be positive");
    if (s.otfs.delay_bins < 1) fail("otfs.delay_bins", "must be positive");
    if (!(s.otfs.subcarrier_spacing_hz > 0.0))
        fail("otfs.subcarrier_spacing_hz", "must be positive");

    if (j.contains("link")) {
        const auto& o = j.at("link");
        check_keys(o, "link",
                   {"carrier_hz", "tx_power_dbm", "noise_density_w_per_hz",
                    "noise_figure_db", "rcs_m2"});
        s.link.carrier_hz = get_double(o, "link", "carrier_hz", s.link.carrier_hz);
        s.link.tx_power_dbm =
            get_double(o, "link", "tx_power_dbm", s.link.tx_power_dbm);
        s.link.noise_density_w_per_hz = get_double(
            o, "link", "noise_density_w_per_hz", s.link.noise_density_w_per_hz);
        s.link.noise_figure_db =
            get_double(o, "link", "noise_figure_db", s.link.noise_figure_db);
        s.link.rcs_m2 = get_double(o, "link", "rcs_m2", s.link.rcs_m2);
    }
    if (!(s.link.carrier_hz > 0.0)) fail("link.carrier_hz", "must be positive");
    if (!(s.link.noise_density_w_per_hz > 0.0))
        fail("link.noise_density_w_per_hz", "must be positive");
    if (s.link.noise_figure_db < 0.0)
        fail("link.noise_figure_db", "must be nonnegative");
    if (!(s.link.rcs_m2 > 0.0)) fail("link.rcs_m2", "must be positive");

    if (j.contains("array")) {
        const auto& o = j.at("array");
        check_keys(o, "array", {"antennas", "rf_chains"});
        s.array.antennas = get_int(o, "array", "antennas", s.array.antennas);
        s.array.rf_chains = get_int(o, "array", "rf_chains", s.array.rf_chains);
    }
    if (s.array.antennas < 1) fail("array.antennas", "must be positive");
    if (s.array.rf_chains < 1) fail("array.rf_chains", "must be positive");
    if (s.array.rf_chains > s.array.antennas)
        fail("array.rf_chains", "cannot exceed array.antennas");

    if (j.contains("fov")) {
        const auto& o = j.at("fov");
        check_keys(o, "fov", {"min_deg", "max_deg"});
        s.fov.min_deg = get_double(o, "fov", "min_deg", s.fov.min_deg);
        s.fov.max_deg = get_double(o, "fov", "max_deg", s.fov.max_deg);
    }
    if (!(s.fov.max_deg > s.fov.min_deg)) fail("fov", "max_deg must exceed min_deg");
    if (s.fov.min_deg < -90.0 || s.fov.max_deg > 90.0)
        fail("fov", "field of view must lie within [-90, 90] degrees");

    if (j.contains("beams")) {
        const auto& o = j.at("beams");
        check_keys(o, "beams",
                   {"strategy", "schedule_seed", "wide_beam_width_deg",
                    "wide_beam_floor_db", "codebook_coarse_step_deg",
                    "codebook_fine_step_deg", "codebook_beam_width_deg",
                    "codebook_floor_db", "synthesis_grid_points", "eps_orth"});
        s.beams.strategy = get_string(o, "beams", "strategy", s.beams.strategy);
        s.beams.schedule_seed =
            get_u64(o, "beams", "schedule_seed", s.beams.schedule_seed);
        s.beams.wide_beam_width_deg = get_double(o, "beams", "wide_beam_width_deg",
                                                 s.beams.wide_beam_width_deg);
        s.beams.wide_beam_floor_db = get_double(o, "beams", "wide_beam_floor_db",
                                                s.beams.wide_beam_floor_db);
        s.beams.codebook_coarse_step_deg =
            get_double(o, "beams", "codebook_coarse_step_deg",
                       s.beams.codebook_coarse_step_deg);
        s.beams.codebook_fine_step_deg =
            get_double(o, "beams", "codebook_fine_step_deg",
                       s.beams.codebook_fine_step_deg);
        s.beams.codebook_beam_width_deg =
            get_double(o, "beams", "codebook_beam_width_deg",
                       s.beams.codebook_beam_width_deg);
        s.beams.codebook_floor_db =
            get_double(o, "beams", "codebook_floor_db", s.beams.codebook_floor_db);
        s.beams.synthesis_grid_points = get_int(o, "beams", "synthesis_grid_points",
                                                s.beams.synthesis_grid_points);
        s.beams.eps_orth = get_double(o, "beams", "eps_orth", s.beams.eps_orth);
    }
    try {
        parse_strategy(s.beams.strategy);
    } catch (const ConfigError& e) {
        fail("beams.strategy", e.what());
    }
    if (!(s.beams.wide_beam_width_deg > 0.0))
        fail("beams.wide_beam_width_deg", "must be positive");
    if (!(s.beams.wide_beam_floor_db < 0.0))
        fail("beams.wide_beam_floor_db", "must be negative (relative to mainlobe)");
    if (!(s.beams.codebook_coarse_step_deg > 0.0))
        fail("beams.codebook_coarse_step_deg", "must be positive");
    if (!(s.beams.codebook_fine_step_deg > 0.0))
        fail("beams.codebook_fine_step_deg", "must be positive");
    if (!(s.beams.codebook_beam_width_deg > 0.0))
        fail("beams.codebook_beam_width_deg", "must be positive");
    if (!(s.beams.codebook_floor_db < 0.0))
        fail("beams.codebook_floor_db", "must be negative (relative to mainlobe)");
    if (s.beams.synthesis_grid_points < 2)
        fail("beams.synthesis_grid_points", "need at least two grid angles");
    if (!(s.beams.eps_orth > 0.0 && s.beams.eps_orth < 1.0))
        fail("beams.eps_orth", "must lie in (0, 1)");
    {
        const double span = s.fov.max_deg - s.fov.min_deg;
        const double n_coarse = span / s.beams.codebook_coarse_step_deg;
        if (std::abs(n_coarse - std::round(n_coarse)) > 1e-9)
            fail("beams.codebook_coarse_step_deg",
                 "field of view must span an integer number of coarse steps");
        const double n_fine =
            s.beams.codebook_coarse_step_deg / s.beams.codebook_fine_step_deg;
        if (std::abs(n_fine - std::round(n_fine)) > 1e-9)
            fail("beams.codebook_fine_step_deg",
                 "coarse step must span an integer number of fine steps");
    }

    s.blocks = get_int(j, "", "blocks", s.blocks);
    if (s.blocks < 1) fail("blocks", "must be positive");

    if (j.contains("search")) {
        const auto& o = j.at("search");
        check_keys(o, "search",
                   {"angle_step_deg", "refine_factor", "zoom_stages",
                    "full_coupling"});
        s.search.angle_step_deg =
            get_double(o, "search", "angle_step_deg", s.search.angle_step_deg);
        s.search.refine_factor =
            get_int(o, "search", "refine_factor", s.search.refine_factor);
        s.search.zoom_stages =
            get_int(o, "search", "zoom_stages", s.search.zoom_stages);
        s.search.full_coupling =
            get_bool(o, "search", "full_coupling", s.search.full_coupling);
    }
    if (!(s.search.angle_step_deg > 0.0))
        fail("search.angle_step_deg", "must be positive");
    {
        const double span = s.fov.max_deg - s.fov.min_deg;
        const double n = span / s.search.angle_step_deg;
        if (std::abs(n - std::round(n)) > 1e-9)
            fail("search.angle_step_deg",
                 "field of view must span an integer number of angle steps");
    }
    if (s.search.refine_factor < 1) fail("search.refine_factor", "must be positive");
    if (s.search.zoom_stages < 1) fail("search.zoom_stages", "must be positive");

    if (j.contains("cfar")) {
        const auto& o = j.at("cfar");
        check_keys(o, "cfar", {"window", "guard", "kappa", "alpha", "target_pfa"});
        s.cfar.window = get_int3(o, "cfar", "window", s.cfar.window);
        s.cfar.guard = get_int3(o, "cfar", "guard", s.cfar.guard);
        s.cfar.kappa = get_double(o, "cfar", "kappa", s.cfar.kappa);
        s.cfar.alpha = get_double(o, "cfar", "alpha", s.cfar.alpha);
        s.cfar.target_pfa = get_double(o, "cfar", "target_pfa", s.cfar.target_pfa);
    }
    for (int d = 0; d < 3; ++d) {
        if (s.cfar.guard[d] < 0 || s.cfar.window[d] <= s.cfar.guard[d])
            fail("cfar.window", "window must strictly contain the guard region");
    }
    if (!(s.cfar.kappa > 0.0 && s.cfar.kappa < 1.0))
        fail("cfar.kappa", "must lie in (0, 1)");
    if (!(s.cfar.alpha > 0.0)) fail("cfar.alpha", "must be positive");
    if (!(s.cfar.target_pfa > 0.0 && s.cfar.target_pfa < 0.5))
        fail("cfar.target_pfa", "must lie in (0, 0.5)");

    if (j.contains("discovery")) {
        const auto& o = j.at("discovery");
        check_keys(o, "discovery", {"range_bins_m", "blocks_list"});
        s.discovery.range_bins_m = get_double_list(o, "discovery", "range_bins_m",
                                                   s.discovery.range_bins_m);
        s.discovery.blocks_list =
            get_int_list(o, "discovery", "blocks_list", s.discovery.blocks_list);
    }
    for (double r : s.discovery.range_bins_m)
        if (!(r > 0.0)) fail("discovery.range_bins_m", "ranges must be positive");
    for (int b : s.discovery.blocks_list)
        if (b < 1) fail("discovery.blocks_list", "block counts must be positive");

    if (j.contains("crlb")) {
        const auto& o = j.at("crlb");
        check_keys(o, "crlb", {"snr_db", "blocks"});
        s.crlb.snr_db = get_double_list(o, "crlb", "snr_db", s.crlb.snr_db);
        s.crlb.blocks = get_int_list(o, "crlb", "blocks", s.crlb.blocks);
    }
    if (s.crlb.snr_db.empty()) fail("crlb.snr_db", "need at least one SNR point");
    for (int b : s.crlb.blocks)
        if (b < 1) fail("crlb.blocks", "block counts must be positive");
    if (s.crlb.blocks.empty()) fail("crlb.blocks", "need at least one block count");

    const OtfsConfig cfg = s.otfs_config();
    const double tau_max = cfg.N * cfg.T;
    const double nu_max = cfg.delta_f / 2.0;

    if (j.contains("targets")) {
        const auto& arr = j.at("targets");
        if (!arr.is_array()) fail("targets", "expected an array of objects");
        s.targets.clear();
        for (size_t i = 0; i < arr.size(); ++i) {
            const std::string path = "targets[" + std::to_string(i) + "]";
            check_keys(arr[i], path, {"range_m", "speed_mps", "aoa_deg"});
            TargetSpec t;
            t.range_m = get_double(arr[i], path, "range_m", t.range_m);
            t.speed_mps = get_interval(arr[i], path, "speed_mps", t.speed_mps);
            t.aoa_deg = get_interval(arr[i], path, "aoa_deg", t.aoa_deg);
            s.targets.push_back(t);
        }
    }
    for (size_t i = 0; i < s.targets.size(); ++i) {
        const std::string path = "targets[" + std::to_string(i) + "]";
        const TargetSpec& t = s.targets[i];
        if (!(t.range_m > 0.0)) fail(path + ".range_m", "must be positive");
        if (!(s.delay_of_range(t.range_m) < tau_max))
            fail(path + ".range_m",
                 "derived delay falls outside the unambiguous span [0, N*T)");
        for (double v : {t.speed_mps.lo, t.speed_mps.hi})
            if (!(std::abs(s.doppler_of_speed(v)) < nu_max))
                fail(path + ".speed_mps",
                     "derived Doppler exceeds the unambiguous span "
                     "(-delta_f/2, delta_f/2)");
        for (double a : {t.aoa_deg.lo, t.aoa_deg.hi})
            if (a < s.fov.min_deg || a > s.fov.max_deg)
                fail(path + ".aoa_deg", "must lie inside the field of view");
    }
    // Range sweeps re-pin the first target; each bin must stay unambiguous.
    if (!s.discovery.range_bins_m.empty() && s.targets.empty())
        fail("discovery.range_bins_m", "a range sweep needs at least one target");
    for (double r : s.discovery.range_bins_m)
        if (!(s.delay_of_range(r) < tau_max))
            fail("discovery.range_bins_m",
                 "derived delay falls outside the unambiguous span [0, N*T)");

    if (j.contains("users")) {
        const auto& arr = j.at("users");
        if (!arr.is_array()) fail("users", "expected an array of objects");
        s.users.clear();
        for (size_t i = 0; i < arr.size(); ++i) {
            const std::string path = "users[" + std::to_string(i) + "]";
            check_keys(arr[i], path, {"range_m", "speed_mps", "aoa_deg"});
            UserSpec u;
            u.range_m = get_double(arr[i], path, "range_m", u.range_m);
            u.speed_mps = get_double(arr[i], path, "speed_mps", u.speed_mps);
            u.aoa_deg = get_double(arr[i], path, "aoa_deg", u.aoa_deg);
            s.users.push_back(u);
        }
    }
    for (size_t i = 0; i < s.users.size(); ++i) {
        const std::string path = "users[" + std::to_string(i) + "]";
        const UserSpec& u = s.users[i];
        if (!(u.range_m > 0.0)) fail(path + ".range_m", "must be positive");
        // Tighter than the target bound: the user variance analysis runs on
        // the small-delay crosstalk expansion, which needs tau below T.
        if (!(s.delay_of_range(u.range_m) < cfg.T))
            fail(path + ".range_m",
                 "derived delay must stay below the symbol time T for "
                 "tracking");
        if (!(std::abs(s.doppler_of_speed(u.speed_mps)) < nu_max))
            fail(path + ".speed_mps",
                 "derived Doppler exceeds the unambiguous span "
                 "(-delta_f/2, delta_f/2)");
        if (u.aoa_deg < s.fov.min_deg || u.aoa_deg > s.fov.max_deg)
            fail(path + ".aoa_deg", "must lie inside the field of view");
    }

    s.trials = get_int(j, "", "trials", s.trials);
    if (s.trials < 1) fail("trials", "must be positive");
    s.master_seed = get_u64(j, "", "master_seed", s.master_seed);
    s.noiseless = get_bool(j, "", "noiseless", s.noiseless);

    // Cross-checks the assembled configuration against the library's own
    // domain validators so no later stage can fail on a scenario that parsed.
    s.otfs_config().validate();
    s.link_budget().validate();
    return s;
}

inline ScenarioFile load_scenario(const std::string& path, Profile profile) {
    std::ifstream in(path);
    if (!in) throw ConfigError("scenario: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("scenario: '" + path + "' is not valid JSON (" +
                          std::string(e.what()) + ")");
    }
    return parse_scenario(j, profile);
}

}  // namespace otfsradar
