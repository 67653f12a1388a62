#pragma once

// Dataset evaluation, the ablation grids, result tables, SVG sweep plots and
// attention-feature export.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "bundle.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "error.hpp"
#include "image.hpp"
#include "manifest.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "scoring.hpp"
#include "training.hpp"

namespace liqa {

/// Noise stream for one image: a function of the seed and the image id only,
/// so scores do not depend on manifest order or thread count.
inline Rng image_rng(std::uint64_t seed, const std::string& image_id) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : image_id) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return derive_rng(seed, {7, h});
}

/// Decoded images of a manifest, kept at their native size.
struct ImageSet {
    Manifest manifest;
    std::vector<std::optional<Image>> images;
    std::vector<std::string> errors;  // decode failures, aligned with records
};

inline ImageSet load_images(const Manifest& m) {
    ImageSet s;
    s.manifest = m;
    for (const DatasetRecord& r : m.records) {
        try {
            s.images.emplace_back(read_image(m.resolve(r)));
            s.errors.emplace_back();
        } catch (const Error& e) {
            s.images.emplace_back(std::nullopt);
            s.errors.emplace_back(e.what());
        }
    }
    return s;
}

struct EvalRecord {
    std::string image_id;
    double mos = 0.0;
    double predicted = 0.0;
};

struct EvalFailure {
    std::string image_id;
    std::string message;
};

struct EvalReport {
    std::string dataset;
    std::vector<EvalRecord> records;
    std::vector<EvalFailure> failures;
    double srcc = 0.0;
    double plcc = 0.0;
    bool degenerate = false;
    std::string config_snapshot;
    double runtime_s = 0.0;

    std::vector<double> predictions() const {
        std::vector<double> v;
        for (const EvalRecord& r : records) v.push_back(r.predicted);
        return v;
    }
    std::vector<double> mos() const {
        std::vector<double> v;
        for (const EvalRecord& r : records) v.push_back(r.mos);
        return v;
    }
};

struct EvalOptions {
    int threads = 1;
    MonotoneFit fit;  // optional map applied before PLCC
};

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    for (std::thread& t : pool) t.join();
}

inline EvalReport evaluate(const ModelBundle& bundle, const ImageSet& set, const EvalOptions& options = {}) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<DatasetRecord>& recs = set.manifest.records;
    std::vector<std::optional<double>> scores(recs.size());
    std::vector<std::string> errors(recs.size());
    parallel_for(recs.size(), options.threads, [&](std::size_t i) {
        if (!set.images[i]) {
            errors[i] = set.errors[i];
            return;
        }
        try {
            Rng rng = image_rng(bundle.config.seed, recs[i].image_id);
            const double s = score_image(*set.images[i], bundle, rng);
            require(std::isfinite(s), ErrorKind::NanLoss, "non-finite score");
            scores[i] = s;
        } catch (const Error& e) {
            errors[i] = e.what();
        }
    });
    EvalReport rep;
    rep.dataset = set.manifest.dataset;
    rep.config_snapshot = bundle.config.to_text();
    for (std::size_t i = 0; i < recs.size(); ++i) {
        if (scores[i])
            rep.records.push_back({recs[i].image_id, recs[i].mos, *scores[i]});
        else
            rep.failures.push_back({recs[i].image_id, errors[i]});
    }
    require(!rep.records.empty() || recs.empty(), ErrorKind::Validation,
            "every image failed to score; first error: " + (rep.failures.empty() ? std::string() : rep.failures[0].message));
    const Correlation c = correlate(rep.predictions(), rep.mos(), options.fit);
    rep.srcc = c.srcc;
    rep.plcc = c.plcc;
    rep.degenerate = c.degenerate;
    rep.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

inline EvalReport evaluate(const ModelBundle& bundle, const Manifest& manifest, const EvalOptions& options = {}) {
    return evaluate(bundle, load_images(manifest), options);
}

/// Training samples from the train records of `set`; fits the MOS
/// normalisation on them first.
inline std::vector<TrainSample> training_samples(ModelBundle& bundle, const ImageSet& set) {
    std::vector<double> mos;
    for (std::size_t i = 0; i < set.manifest.records.size(); ++i)
        if (set.images[i]) mos.push_back(set.manifest.records[i].mos);
    fit_mos_normalization(bundle, mos);
    bundle.train_db = set.manifest.dataset;
    std::vector<TrainSample> out;
    for (std::size_t i = 0; i < set.manifest.records.size(); ++i) {
        if (!set.images[i]) continue;
        const DatasetRecord& r = set.manifest.records[i];
        out.push_back(TrainSample{r.image_id, encode_for_scoring(bundle, *set.images[i]), bundle.mos.normalize(r.mos)});
    }
    require(!out.empty(), ErrorKind::EmptyManifest, "no decodable training images");
    return out;
}

// ---------------------------------------------------------------------------
// Ablation grids

struct AblationCellSpec {
    std::string name;
    std::vector<std::pair<std::string, std::string>> overrides;
};

struct AblationSpec {
    std::string name;
    std::string axis;  // label for the sweep axis in plots
    std::vector<AblationCellSpec> cells;
    bool plot = false;

    void validate(const RunConfig& base) const {
        for (const AblationCellSpec& c : cells)
            for (const auto& [k, v] : c.overrides)
                require(base.has_key(k), ErrorKind::InvalidConfig,
                        "ablation cell '" + c.name + "' overrides unknown key '" + k + "'");
    }
};

inline std::vector<std::string> ablation_grid_names() {
    return {"table2", "fig5", "table4", "fig6", "table3", "table5", "table7", "table9", "table10"};
}

namespace ablation_detail {

inline std::vector<AblationCellSpec> prompt_variants(const std::string& pos, const std::string& neg) {
    std::vector<std::pair<std::string, std::string>> attr;
    if (!pos.empty()) attr = {{"pos_attribute", pos}, {"neg_attribute", neg}};
    auto with = [&](std::vector<std::pair<std::string, std::string>> o) {
        o.insert(o.begin(), attr.begin(), attr.end());
        return o;
    };
    return {
        {"trainable-single", with({{"prompt_mode", "single"}})},
        {"trainable-antonym", with({})},
        {"fixed-single", with({{"prompt_mode", "single"}, {"prompt_trainable", "false"}})},
        {"fixed-antonym", with({{"prompt_trainable", "false"}})},
    };
}

} // namespace ablation_detail

inline AblationSpec named_ablation(const std::string& name) {
    AblationSpec s;
    s.name = name;
    if (name == "empty") return s;
    if (name == "table2") {
        s.axis = "configuration";
        s.cells = {
            {"zero-shot", {{"prompt_trainable", "false"}, {"freeze_cross_attention", "true"}, {"mean_pool_instead_of_lse", "true"}}},
            {"prompt-only", {{"freeze_cross_attention", "true"}}},
            {"cross-attention-only", {{"prompt_trainable", "false"}}},
            {"no-lse", {{"mean_pool_instead_of_lse", "true"}}},
            {"full", {}},
        };
    } else if (name == "fig5") {
        s.axis = "train timestep range";
        s.plot = true;
        for (const char* r : {"(0,100]", "[100,200]", "[200,300]", "[400,500]", "[600,700]", "[900,1000]"})
            s.cells.push_back({r, {{"train_timestep_range", r}, {"eval_timestep_range", "same"}}});
    } else if (name == "table4") {
        s.axis = "denoising steps";
        s.plot = true;
        for (const char* n : {"1", "3", "5"})
            s.cells.push_back({std::string("steps-") + n, {{"denoise_steps", n}, {"denoise_delta", "20"}}});
    } else if (name == "fig6") {
        s.axis = "inference timesteps K";
        s.plot = true;
        for (const char* k : {"1", "2", "4", "8"}) s.cells.push_back({std::string("K-") + k, {{"eval_timestep_count", k}}});
    } else if (name == "table3") {
        s.axis = "input resolution";
        for (const char* r : {"64", "128"}) s.cells.push_back({std::string("res-") + r, {{"resolution", r}}});
    } else if (name == "table5") {
        s.axis = "prompt variant";
        s.cells = ablation_detail::prompt_variants("", "");
    } else if (name == "table7") {
        s.axis = "trainable projections";
        s.cells = {
            {"none", {{"freeze_cross_attention", "true"}, {"train_query_weights", "false"}}},
            {"query", {{"freeze_cross_attention", "true"}, {"train_query_weights", "true"}}},
            {"key-value", {}},
            {"query-key-value", {{"train_query_weights", "true"}}},
        };
    } else if (name == "table9") {
        s.axis = "prompt variant";
        s.cells = ablation_detail::prompt_variants("High Quality.", "Low Quality.");
    } else if (name == "table10") {
        s.axis = "prompt variant";
        s.cells = ablation_detail::prompt_variants("High Definition.", "Low Definition.");
    } else {
        fail(ErrorKind::InvalidConfig, "unknown ablation grid '" + name + "'");
    }
    return s;
}

/// Custom grid file: one cell per line, `name: key=value, key=value`.
inline AblationSpec parse_ablation_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open grid " + path.string());
    AblationSpec s;
    s.name = path.stem().string();
    s.axis = "cell";
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto colon = line.find(':');
        require(colon != std::string::npos, ErrorKind::Parse, path.string() + ":" + std::to_string(lineno) + ": expected 'name: key=value, ...'");
        AblationCellSpec cell{config_detail::trim(line.substr(0, colon)), {}};
        std::stringstream ss(line.substr(colon + 1));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = config_detail::trim(item);
            if (item.empty()) continue;
            const auto eq = item.find('=');
            require(eq != std::string::npos, ErrorKind::Parse, path.string() + ":" + std::to_string(lineno) + ": '" + item + "' is not key=value");
            cell.overrides.emplace_back(config_detail::trim(item.substr(0, eq)), config_detail::trim(item.substr(eq + 1)));
        }
        s.cells.push_back(std::move(cell));
    }
    return s;
}

struct AblationCell {
    std::string name;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::string train_db;
    std::string test_db;
    std::optional<EvalReport> report;
    std::vector<EpochLoss> history;
    bool trained = false;
    std::string error;
    double runtime_s = 0.0;
};

struct AblationResult {
    std::string grid;
    std::string axis;
    bool plot = false;
    std::vector<AblationCell> cells;

    const AblationCell& cell(const std::string& name) const {
        for (const AblationCell& c : cells)
            if (c.name == name) return c;
        fail(ErrorKind::MissingKey, "no ablation cell named " + name);
    }
};

/// Keys that only affect evaluation; cells differing only in these share one
/// trained model.
inline bool is_eval_only_key(const std::string& key) {
    return key == "eval_timestep_count" || key == "eval_timestep_spacing" || key == "eval_timestep_range" ||
           key == "denoise_steps" || key == "denoise_delta" || key == "threads";
}

inline std::string training_key(const RunConfig& cfg) {
    std::string out;
    for (const auto& [k, v] : cfg.to_map())
        if (!is_eval_only_key(k)) out += k + "=" + v + "\n";
    return out;
}

struct TrainedModel {
    ModelBundle bundle;
    std::vector<EpochLoss> history;
};

/// Trained bundles keyed by training data and training-relevant config, so
/// grids that share a configuration train it once.
using TrainingCache = std::map<std::string, TrainedModel>;

struct AblationOptions {
    int threads = 1;
    TrainingCache* cache = nullptr;  // shared across calls when set
    std::function<void(const AblationCell&)> on_cell;
};

/// Trains (when anything is trainable) and evaluates every cell. Each cell
/// starts from a fresh bundle built with the base seed so cells differ only
/// in their overrides. Failures are recorded per cell.
inline AblationResult run_ablation(const RunConfig& base, const AblationSpec& spec, const ImageSet& train_set,
                                   const ImageSet& test_set, const AblationOptions& options = {}) {
    spec.validate(base);
    AblationResult result;
    result.grid = spec.name;
    result.axis = spec.axis;
    result.plot = spec.plot;
    std::vector<AblationCellSpec> cells = spec.cells;
    if (cells.empty()) cells.push_back({"base", {}});

    TrainingCache local;
    TrainingCache& trained = options.cache ? *options.cache : local;
    for (const AblationCellSpec& cs : cells) {
        const auto start = std::chrono::steady_clock::now();
        AblationCell cell;
        cell.name = cs.name;
        cell.overrides = cs.overrides;
        cell.train_db = train_set.manifest.dataset;
        cell.test_db = test_set.manifest.dataset;
        try {
            RunConfig cfg = base;
            for (const auto& [k, v] : cs.overrides) cfg.set(k, v);
            cfg.validate();
            const std::string key = train_set.manifest.dataset + "#" + std::to_string(train_set.manifest.records.size()) +
                                    "\n" + training_key(cfg);
            auto it = trained.find(key);
            if (it == trained.end()) {
                ModelBundle b = build_bundle(cfg);
                std::vector<EpochLoss> history;
                if (!partition_parameters(b).trainable.empty()) history = train(b, training_samples(b, train_set)).history;
                it = trained.emplace(key, TrainedModel{std::move(b), std::move(history)}).first;
            }
            ModelBundle b = it->second.bundle;
            b.config = cfg;
            cell.history = it->second.history;
            cell.trained = !partition_parameters(b).trainable.empty();
            cell.report = evaluate(b, test_set, EvalOptions{options.threads, {}});
        } catch (const Error& e) {
            cell.error = e.what();
        }
        cell.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (options.on_cell) options.on_cell(cell);
        result.cells.push_back(std::move(cell));
    }
    return result;
}

inline nlohmann::json cell_json(const AblationCell& c, const std::string& grid) {
    nlohmann::json j;
    j["cell_name"] = c.name;
    j["grid"] = grid;
    j["train_db"] = c.train_db;
    j["test_db"] = c.test_db;
    if (c.report && !c.report->degenerate) {
        j["srcc"] = c.report->srcc;
        j["plcc"] = c.report->plcc;
    } else {
        j["srcc"] = nullptr;
        j["plcc"] = nullptr;
    }
    j["degenerate"] = c.report ? c.report->degenerate : false;
    j["runtime_s"] = c.runtime_s;
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [k, v] : c.overrides) o[k] = v;
    j["overrides"] = o;
    if (!c.error.empty()) j["error"] = c.error;
    return j;
}

inline std::string results_jsonl(const AblationResult& r) {
    std::string out;
    for (const AblationCell& c : r.cells) out += cell_json(c, r.grid).dump() + "\n";
    return out;
}

inline std::string format_fixed(double v, int precision = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

/// Plain-text comparison table.
inline std::string render_table(const AblationResult& r) {
    std::size_t w = 4;
    for (const AblationCell& c : r.cells) w = std::max(w, c.name.size());
    std::ostringstream os;
    os << "grid: " << r.grid << "\n";
    os << std::left << std::setw(static_cast<int>(w)) << "cell" << "  " << std::right << std::setw(8) << "SRCC" << "  "
       << std::setw(8) << "PLCC" << "  " << std::setw(9) << "time (s)" << "  note\n";
    os << std::string(w + 40, '-') << "\n";
    for (const AblationCell& c : r.cells) {
        os << std::left << std::setw(static_cast<int>(w)) << c.name << "  " << std::right;
        if (c.report && !c.report->degenerate)
            os << std::setw(8) << format_fixed(c.report->srcc) << "  " << std::setw(8) << format_fixed(c.report->plcc);
        else
            os << std::setw(8) << "-" << "  " << std::setw(8) << "-";
        os << "  " << std::setw(9) << format_fixed(c.runtime_s, 1) << "  ";
        if (!c.error.empty())
            os << "failed: " << c.error;
        else if (c.report && c.report->degenerate)
            os << "degenerate (constant predictions)";
        else if (!c.trained)
            os << "no trainable parameters";
        os << "\n";
    }
    return os.str();
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

/// SRCC per cell as a line chart over the cell order.
inline std::string render_svg(const AblationResult& r) {
    const double W = 640, H = 400, left = 70, right = 20, top = 40, bottom = 80;
    std::vector<std::pair<std::size_t, double>> pts;
    for (std::size_t i = 0; i < r.cells.size(); ++i)
        if (r.cells[i].report && !r.cells[i].report->degenerate) pts.emplace_back(i, r.cells[i].report->srcc);
    double lo = 0.0, hi = 1.0;
    if (!pts.empty()) {
        lo = hi = pts.front().second;
        for (const auto& p : pts) {
            lo = std::min(lo, p.second);
            hi = std::max(hi, p.second);
        }
        lo = std::max(-1.0, lo - 0.05);
        hi = std::min(1.0, hi + 0.05);
        if (hi - lo < 0.1) hi = lo + 0.1;
    }
    const std::size_t n = std::max<std::size_t>(1, r.cells.size());
    const auto x_at = [&](std::size_t i) {
        return n == 1 ? left + (W - left - right) / 2 : left + (W - left - right) * static_cast<double>(i) / static_cast<double>(n - 1);
    };
    const auto y_at = [&](double v) { return top + (H - top - bottom) * (hi - v) / (hi - lo); };
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">SRCC vs " << xml_escape(r.axis) << " (" << xml_escape(r.grid) << ")</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        os << "<text x=\"" << left - 8 << "\" y=\"" << y_at(v) + 4 << "\" text-anchor=\"end\">" << format_fixed(v, 2) << "</text>\n";
        os << "<line x1=\"" << left << "\" y1=\"" << y_at(v) << "\" x2=\"" << W - right << "\" y2=\"" << y_at(v) << "\" stroke=\"#ddd\"/>\n";
    }
    for (std::size_t i = 0; i < r.cells.size(); ++i)
        os << "<text x=\"" << x_at(i) << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"middle\">" << xml_escape(r.cells[i].name) << "</text>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"" << H - 20 << "\" text-anchor=\"middle\">" << xml_escape(r.axis) << "</text>\n";
    if (!pts.empty()) {
        os << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
        for (const auto& p : pts) os << x_at(p.first) << "," << y_at(p.second) << " ";
        os << "\"/>\n";
        for (const auto& p : pts)
            os << "<circle cx=\"" << x_at(p.first) << "\" cy=\"" << y_at(p.second) << "\" r=\"4\" fill=\"#1f77b4\"/>\n"
               << "<text x=\"" << x_at(p.first) << "\" y=\"" << y_at(p.second) - 8 << "\" text-anchor=\"middle\">" << format_fixed(p.second, 3) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Feature export

struct FeatureRecord {
    std::string image_id;
    std::string split;
    double mos = 0.0;
    std::vector<double> features;  // length M, positive prompt
    std::vector<double> g_pos;     // per timestep
    std::vector<double> g_neg;     // per timestep, empty in single-prompt mode
};

inline FeatureRecord extract_features(const ModelBundle& bundle, const DatasetRecord& rec, const Image& image) {
    Rng rng = image_rng(bundle.config.seed, rec.image_id);
    const ScoreTrace trace = trace_image(image, bundle, rng);
    FeatureRecord f;
    f.image_id = rec.image_id;
    f.split = to_string(rec.split);
    f.mos = rec.mos;
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(trace.timesteps.front().profile.size());
    for (const TimestepTrace& t : trace.timesteps) {
        acc += t.profile;
        f.g_pos.push_back(t.g_pos);
        if (t.g_neg) f.g_neg.push_back(*t.g_neg);
    }
    acc /= static_cast<double>(trace.timesteps.size());
    f.features.assign(acc.data(), acc.data() + acc.size());
    return f;
}

inline std::string feature_json(const FeatureRecord& f) {
    nlohmann::json j;
    j["image_id"] = f.image_id;
    j["split"] = f.split;
    j["mos"] = f.mos;
    j["features"] = f.features;
    j["g_pos"] = f.g_pos;
    j["g_neg"] = f.g_neg;
    return j.dump();
}

/// One JSON object per line; returns the number of records written.
inline std::size_t export_features(const ModelBundle& bundle, const ImageSet& set, const std::filesystem::path& path,
                                   int threads = 1) {
    const auto& recs = set.manifest.records;
    std::vector<std::string> lines(recs.size());
    parallel_for(recs.size(), threads, [&](std::size_t i) {
        if (set.images[i]) lines[i] = feature_json(extract_features(bundle, recs[i], *set.images[i]));
    });
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    std::size_t n = 0;
    for (const std::string& l : lines) {
        if (l.empty()) continue;
        out << l << "\n";
        ++n;
    }
    require(static_cast<bool>(out), ErrorKind::Io, "short write to " + path.string());
    return n;
}

} // namespace liqa
