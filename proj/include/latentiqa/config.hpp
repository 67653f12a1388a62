#pragma once

// Flat `key = value` run configuration. Every hyperparameter of every stage
// lives here so checkpoints, ablation overrides and the CLI share one schema.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "schedule.hpp"

namespace liqa {

struct RunConfig {
    // diffusion schedule and timestep policies
    int total_timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    TimestepRange train_timestep_range{0, 100};
    std::string eval_timestep_range = "same";  // "same" follows train_timestep_range
    int eval_timestep_count = 8;
    std::string eval_timestep_spacing = "even";  // even | random
    int denoise_steps = 1;
    int denoise_delta = 20;

    // prompts
    std::string pos_attribute = "Good Photo.";
    std::string neg_attribute = "Bad Photo.";
    int context_length = 16;
    std::string prompt_mode = "antonym";
    bool prompt_trainable = true;
    double context_init_std = 0.02;

    // readout and training
    double lambda = 0.14;
    int lora_rank = 4;
    double lora_scale = 1.0;
    int epochs = 15;
    int batch_size = 16;
    double learning_rate = 1e-2;
    double target_span = 0.1;  // fraction of the attainable score window that normalised MOS spans
    double weight_decay = 0.0;
    std::string lr_schedule = "constant";  // constant | cosine
    bool freeze_cross_attention = false;
    bool mean_pool_instead_of_lse = false;
    bool train_query_weights = false;
    bool check_frozen = false;
    std::uint64_t seed = 0;

    // backbone
    std::string backbone = "toy";
    int resolution = 128;
    int latent_channels = 4;
    int downsample_factor = 8;
    double latent_scale = 4.0;
    int base_width = 64;
    int num_blocks = 2;
    int d_tau = 64;
    int attn_dim = 64;
    std::string tapped_blocks = "all";
    std::string adapter_checkpoint;
    std::string adapter_blocks;

    // synthetic data
    int synth_count = 500;
    std::string synth_distortion = "gaussian_blur";
    int synth_levels = 16;

    int threads = 1;

    TimestepRange eval_range() const {
        return eval_timestep_range == "same" ? train_timestep_range : parse_timestep_range(eval_timestep_range);
    }

    bool fixed_prompts() const { return !prompt_trainable; }

    void validate() const;
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    bool has_key(const std::string& key) const;
    std::vector<std::string> keys() const;
    std::map<std::string, std::string> to_map() const;
    std::string to_text() const;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline int to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<int>(x);
    } catch (const std::exception&) {
        fail(ErrorKind::InvalidConfig, key + ": expected an integer, got '" + v + "'");
    }
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        fail(ErrorKind::InvalidConfig, key + ": expected a non-negative integer, got '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        fail(ErrorKind::InvalidConfig, key + ": expected a real number, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(ErrorKind::InvalidConfig, key + ": expected true/false, got '" + v + "'");
}

inline std::string from_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field make_field(T RunConfig::*member) {
    Field f;
    f.set = [member](RunConfig& c, const std::string& key, const std::string& v) {
        if constexpr (std::is_same_v<T, int>) c.*member = to_int(key, v);
        else if constexpr (std::is_same_v<T, std::uint64_t>) c.*member = to_u64(key, v);
        else if constexpr (std::is_same_v<T, double>) c.*member = to_double(key, v);
        else if constexpr (std::is_same_v<T, bool>) c.*member = to_bool(key, v);
        else if constexpr (std::is_same_v<T, std::string>) c.*member = v;
        else if constexpr (std::is_same_v<T, TimestepRange>) c.*member = parse_timestep_range(v);
    };
    f.get = [member](const RunConfig& c) -> std::string {
        if constexpr (std::is_same_v<T, int> || std::is_same_v<T, std::uint64_t>) return std::to_string(c.*member);
        else if constexpr (std::is_same_v<T, double>) return from_double(c.*member);
        else if constexpr (std::is_same_v<T, bool>) return (c.*member) ? "true" : "false";
        else if constexpr (std::is_same_v<T, std::string>) return c.*member;
        else if constexpr (std::is_same_v<T, TimestepRange>) return format_timestep_range(c.*member);
    };
    return f;
}

inline const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = {
        {"total_timesteps", make_field(&RunConfig::total_timesteps)},
        {"beta_start", make_field(&RunConfig::beta_start)},
        {"beta_end", make_field(&RunConfig::beta_end)},
        {"train_timestep_range", make_field(&RunConfig::train_timestep_range)},
        {"eval_timestep_range", make_field(&RunConfig::eval_timestep_range)},
        {"eval_timestep_count", make_field(&RunConfig::eval_timestep_count)},
        {"eval_timestep_spacing", make_field(&RunConfig::eval_timestep_spacing)},
        {"denoise_steps", make_field(&RunConfig::denoise_steps)},
        {"denoise_delta", make_field(&RunConfig::denoise_delta)},
        {"pos_attribute", make_field(&RunConfig::pos_attribute)},
        {"neg_attribute", make_field(&RunConfig::neg_attribute)},
        {"context_length", make_field(&RunConfig::context_length)},
        {"prompt_mode", make_field(&RunConfig::prompt_mode)},
        {"prompt_trainable", make_field(&RunConfig::prompt_trainable)},
        {"context_init_std", make_field(&RunConfig::context_init_std)},
        {"lambda", make_field(&RunConfig::lambda)},
        {"lora_rank", make_field(&RunConfig::lora_rank)},
        {"lora_scale", make_field(&RunConfig::lora_scale)},
        {"epochs", make_field(&RunConfig::epochs)},
        {"batch_size", make_field(&RunConfig::batch_size)},
        {"learning_rate", make_field(&RunConfig::learning_rate)},
        {"target_span", make_field(&RunConfig::target_span)},
        {"weight_decay", make_field(&RunConfig::weight_decay)},
        {"lr_schedule", make_field(&RunConfig::lr_schedule)},
        {"freeze_cross_attention", make_field(&RunConfig::freeze_cross_attention)},
        {"mean_pool_instead_of_lse", make_field(&RunConfig::mean_pool_instead_of_lse)},
        {"train_query_weights", make_field(&RunConfig::train_query_weights)},
        {"check_frozen", make_field(&RunConfig::check_frozen)},
        {"seed", make_field(&RunConfig::seed)},
        {"backbone", make_field(&RunConfig::backbone)},
        {"resolution", make_field(&RunConfig::resolution)},
        {"latent_channels", make_field(&RunConfig::latent_channels)},
        {"downsample_factor", make_field(&RunConfig::downsample_factor)},
        {"latent_scale", make_field(&RunConfig::latent_scale)},
        {"base_width", make_field(&RunConfig::base_width)},
        {"num_blocks", make_field(&RunConfig::num_blocks)},
        {"d_tau", make_field(&RunConfig::d_tau)},
        {"attn_dim", make_field(&RunConfig::attn_dim)},
        {"tapped_blocks", make_field(&RunConfig::tapped_blocks)},
        {"adapter.checkpoint", make_field(&RunConfig::adapter_checkpoint)},
        {"adapter.blocks", make_field(&RunConfig::adapter_blocks)},
        {"synth_count", make_field(&RunConfig::synth_count)},
        {"synth_distortion", make_field(&RunConfig::synth_distortion)},
        {"synth_levels", make_field(&RunConfig::synth_levels)},
        {"threads", make_field(&RunConfig::threads)},
    };
    return table;
}

} // namespace config_detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
    const auto& table = config_detail::fields();
    auto it = table.find(key);
    require(it != table.end(), ErrorKind::InvalidConfig, "unknown config key '" + key + "'");
    it->second.set(*this, key, config_detail::trim(value));
}

inline std::string RunConfig::get(const std::string& key) const {
    const auto& table = config_detail::fields();
    auto it = table.find(key);
    require(it != table.end(), ErrorKind::InvalidConfig, "unknown config key '" + key + "'");
    return it->second.get(*this);
}

inline bool RunConfig::has_key(const std::string& key) const { return config_detail::fields().contains(key); }

inline std::vector<std::string> RunConfig::keys() const {
    std::vector<std::string> k;
    for (const auto& [name, f] : config_detail::fields()) k.push_back(name);
    return k;
}

inline std::map<std::string, std::string> RunConfig::to_map() const {
    std::map<std::string, std::string> m;
    for (const auto& [name, f] : config_detail::fields()) m[name] = f.get(*this);
    return m;
}

inline std::string RunConfig::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : to_map()) os << k << " = " << v << "\n";
    return os.str();
}

inline void RunConfig::validate() const {
    require(epochs >= 1 && batch_size >= 1, ErrorKind::InvalidConfig, "epochs and batch_size must be >= 1");
    require(learning_rate >= 0.0, ErrorKind::InvalidConfig, "learning_rate must be non-negative");
    require(weight_decay >= 0.0, ErrorKind::InvalidConfig, "weight_decay must be non-negative");
    require(lr_schedule == "constant" || lr_schedule == "cosine", ErrorKind::InvalidConfig,
            "lr_schedule must be constant or cosine");
    require(lambda > 0.0, ErrorKind::InvalidConfig, "lambda must be positive");
    require(target_span > 0.0 && target_span <= 1.0, ErrorKind::InvalidConfig, "target_span must be in (0, 1]");
    require(eval_timestep_count >= 1, ErrorKind::InvalidConfig, "eval_timestep_count must be >= 1");
    require(eval_timestep_spacing == "even" || eval_timestep_spacing == "random", ErrorKind::InvalidConfig,
            "eval_timestep_spacing must be even or random");
    require(denoise_steps >= 1 && denoise_delta >= 1, ErrorKind::InvalidConfig, "denoise steps/delta must be >= 1");
    require(prompt_mode == "antonym" || prompt_mode == "single", ErrorKind::InvalidConfig,
            "prompt_mode must be antonym or single");
    require(threads >= 1, ErrorKind::InvalidConfig, "threads must be >= 1");
    require(synth_levels >= 2, ErrorKind::InvalidConfig, "synth_levels must be >= 2");
    const TimestepRange tr = train_timestep_range;
    require(tr.lo >= 0 && tr.lo < tr.hi && tr.hi <= total_timesteps, ErrorKind::InvalidBounds,
            "train_timestep_range must satisfy 0 <= lo < hi <= total_timesteps");
    const TimestepRange er = eval_range();
    require(er.lo >= 0 && er.lo < er.hi && er.hi <= total_timesteps, ErrorKind::InvalidBounds,
            "eval_timestep_range must satisfy 0 <= lo < hi <= total_timesteps");
}

/// Parses `key = value` lines; `#` starts a comment. Later keys win.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "<text>") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::Parse,
                origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        try {
            cfg.set(config_detail::trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const Error& e) {
            fail(e.kind(), origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig cfg;
    apply_config_text(cfg, ss.str(), path.string());
    return cfg;
}

/// `key=value` override, as passed to `--set`.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos, ErrorKind::InvalidConfig, "override '" + assignment + "' is not key=value");
    cfg.set(config_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline std::string env_key(const std::string& key) {
    std::string out = "LIQA_";
    for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

/// Applies LIQA_<KEY> environment variables (dots become underscores).
inline void apply_env_overrides(RunConfig& cfg) {
    for (const std::string& key : cfg.keys()) {
        if (const char* v = std::getenv(env_key(key).c_str())) cfg.set(key, v);
    }
}

} // namespace liqa
