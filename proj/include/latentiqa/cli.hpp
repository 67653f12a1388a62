#pragma once

// Command-line surface: liqa <train|eval|score|ablate|synth-data|export-features>.
//
// Configuration is layered: defaults, then --config <file>, then LIQA_<KEY>
// environment variables, then --set key=value in order. Subcommands that load
// a checkpoint take the model from its sidecar and only accept changes to
// evaluation keys; differing training keys are reported and ignored.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "config.hpp"
#include "evaluation.hpp"
#include "manifest.hpp"
#include "synthetic.hpp"
#include "training.hpp"

namespace liqa {

namespace cli_detail {

struct Common {
    std::string config_file;
    std::vector<std::string> sets;
    std::string out_dir = "liqa-out";
};

/// Ordered key/value assignments from the config file, environment and --set.
inline std::vector<std::pair<std::string, std::string>> gather_assignments(const Common& c) {
    std::vector<std::pair<std::string, std::string>> out;
    RunConfig probe;
    if (!c.config_file.empty()) {
        RunConfig file_cfg = load_config(c.config_file);  // validates syntax and keys
        std::ifstream in(c.config_file);
        std::string line;
        while (std::getline(in, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            out.emplace_back(config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
        }
    }
    for (const std::string& key : probe.keys())
        if (const char* v = std::getenv(env_key(key).c_str())) out.emplace_back(key, v);
    for (const std::string& s : c.sets) {
        const auto eq = s.find('=');
        require(eq != std::string::npos, ErrorKind::InvalidConfig, "override '" + s + "' is not key=value");
        out.emplace_back(config_detail::trim(s.substr(0, eq)), config_detail::trim(s.substr(eq + 1)));
    }
    return out;
}

inline RunConfig resolve_config(const Common& c) {
    RunConfig cfg;
    for (const auto& [k, v] : gather_assignments(c)) cfg.set(k, v);
    cfg.validate();
    return cfg;
}

/// Loads a checkpoint and applies evaluation-only assignments on top.
inline ModelBundle load_for_inference(const std::string& checkpoint, const Common& c, std::ostream& err) {
    ModelBundle b = load_checkpoint(checkpoint);
    for (const auto& [k, v] : gather_assignments(c)) {
        if (is_eval_only_key(k)) {
            b.config.set(k, v);
            continue;
        }
        RunConfig probe = b.config;
        probe.set(k, v);
        if (probe.get(k) != b.config.get(k))
            err << "note: '" << k << "' is fixed by the checkpoint (" << b.config.get(k) << "); ignoring " << v << "\n";
    }
    b.config.validate();
    return b;
}

/// Records produced files in <out-dir>/outputs.json, merging with earlier runs.
class OutputLog {
public:
    OutputLog(std::filesystem::path root, std::string command) : root_(std::move(root)), command_(std::move(command)) {}

    std::filesystem::path path(const std::string& rel) {
        std::filesystem::create_directories((root_ / rel).parent_path());
        files_.push_back(rel);
        return root_ / rel;
    }

    void write_text(const std::string& rel, const std::string& text) {
        const std::filesystem::path p = path(rel);
        std::ofstream out(p, std::ios::binary);
        require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + p.string());
        out << text;
        require(static_cast<bool>(out), ErrorKind::Io, "short write to " + p.string());
    }

    void commit() {
        const std::filesystem::path index = root_ / "outputs.json";
        nlohmann::json doc = {{"files", nlohmann::json::array()}};
        if (std::filesystem::exists(index)) {
            try {
                doc = nlohmann::json::parse(read_file_bytes(index));
            } catch (const nlohmann::json::exception&) {
            }
        }
        nlohmann::json kept = nlohmann::json::array();
        for (const auto& f : doc.value("files", nlohmann::json::array()))
            if (std::find(files_.begin(), files_.end(), f.value("path", "")) == files_.end()) kept.push_back(f);
        for (const std::string& rel : files_) {
            const std::filesystem::path p = root_ / rel;
            if (!std::filesystem::exists(p)) continue;
            kept.push_back({{"path", rel}, {"bytes", std::filesystem::file_size(p)}, {"command", command_}});
        }
        doc["files"] = kept;
        std::filesystem::create_directories(root_);
        write_file_bytes(index, doc.dump(2) + "\n");
    }

private:
    std::filesystem::path root_;
    std::string command_;
    std::vector<std::string> files_;
};

inline Manifest select_split(const Manifest& m, const std::string& split) {
    return split == "all" ? m : m.subset(parse_split(split));
}

inline std::string report_json(const EvalReport& r, const std::string& name, const std::string& train_db) {
    nlohmann::json j;
    j["cell_name"] = name;
    j["train_db"] = train_db;
    j["test_db"] = r.dataset;
    j["srcc"] = r.degenerate ? nlohmann::json(nullptr) : nlohmann::json(r.srcc);
    j["plcc"] = r.degenerate ? nlohmann::json(nullptr) : nlohmann::json(r.plcc);
    j["degenerate"] = r.degenerate;
    j["count"] = r.records.size();
    j["failures"] = r.failures.size();
    j["runtime_s"] = r.runtime_s;
    return j.dump();
}

} // namespace cli_detail

/// Runs the CLI; returns the process exit code. Output goes to `out`,
/// diagnostics to `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace cli_detail;
    CLI::App app{"Latent-diffusion cross-attention image quality assessment", "liqa"};
    app.require_subcommand(1, 1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    Common common;
    auto add_common = [&](CLI::App* sub, bool out_dir) {
        sub->add_option("--config", common.config_file, "Config file of key = value lines")->check(CLI::ExistingFile);
        sub->add_option("--set", common.sets, "Override one key (key=value); repeatable");
        if (out_dir) sub->add_option("--out-dir", common.out_dir, "Root directory for produced files")->capture_default_str();
    };

    std::string manifest_path, test_manifest_path, checkpoint, image, grid, split = "test";

    CLI::App* synth = app.add_subcommand("synth-data", "Generate the synthetic distortion dataset");
    add_common(synth, true);

    CLI::App* train_cmd = app.add_subcommand("train", "Train on the train split of a manifest and save a checkpoint");
    add_common(train_cmd, true);
    train_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();

    CLI::App* eval_cmd = app.add_subcommand("eval", "Score a manifest split and report SRCC/PLCC");
    add_common(eval_cmd, true);
    eval_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint archive")->required();
    eval_cmd->add_option("--split", split, "train, val, test or all")->capture_default_str();

    CLI::App* score_cmd = app.add_subcommand("score", "Print the quality score of one image");
    add_common(score_cmd, false);
    score_cmd->add_option("--image", image, "Image file")->required();
    score_cmd->add_option("--checkpoint", checkpoint, "Checkpoint archive")->required();

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate an ablation grid");
    add_common(ablate_cmd, true);
    ablate_cmd->add_option("--grid", grid, "Grid name (" + [] {
        std::string s;
        for (const std::string& n : ablation_grid_names()) s += (s.empty() ? "" : ", ") + n;
        return s;
    }() + ", empty) or a grid file")->required();
    ablate_cmd->add_option("--manifest", manifest_path, "Manifest providing the train split")->required();
    ablate_cmd->add_option("--test-manifest", test_manifest_path, "Manifest providing the test split (default: --manifest)");

    CLI::App* export_cmd = app.add_subcommand("export-features", "Write per-image attention features as JSONL");
    add_common(export_cmd, true);
    export_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    export_cmd->add_option("--checkpoint", checkpoint, "Checkpoint archive")->required();
    export_cmd->add_option("--split", split, "train, val, test or all")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (score_cmd->parsed()) {
            const ModelBundle b = load_for_inference(checkpoint, common, err);
            const std::filesystem::path p(image);
            Rng rng = image_rng(b.config.seed, p.stem().string());
            const double s = score_image(read_image(p), b, rng);
            out << std::setprecision(std::numeric_limits<double>::max_digits10) << s << "\n";
            return 0;
        }

        const std::filesystem::path root(common.out_dir);
        if (synth->parsed()) {
            const RunConfig cfg = resolve_config(common);
            OutputLog log(root, "synth-data");
            SyntheticSpec spec;
            spec.count = cfg.synth_count;
            spec.distortion = parse_distortion(cfg.synth_distortion);
            spec.levels = cfg.synth_levels;
            spec.resolution = cfg.resolution;
            spec.seed = cfg.seed;
            const Manifest m = generate_synthetic_dataset(spec, root / "data");
            log.path("data/manifest.tsv");
            for (const DatasetRecord& r : m.records) log.path("data/" + r.path);
            log.commit();
            out << (root / "data" / "manifest.tsv").string() << "\n";
            return 0;
        }

        if (train_cmd->parsed()) {
            const RunConfig cfg = resolve_config(common);
            OutputLog log(root, "train");
            const Manifest m = load_manifest(manifest_path);
            ModelBundle b = build_bundle(cfg);
            const ImageSet set = load_images(m.subset(Split::Train));
            for (std::size_t i = 0; i < set.errors.size(); ++i)
                if (!set.images[i]) err << "skipping " << set.manifest.records[i].image_id << ": " << set.errors[i] << "\n";
            const std::vector<TrainSample> samples = training_samples(b, set);
            TrainOptions options;
            options.on_epoch = [&](const EpochLoss& e) { err << "epoch " << e.epoch << " loss " << e.mean_loss << "\n"; };
            const TrainResult tr = train(b, samples, options);
            save_checkpoint(b, log.path("checkpoint.liqa"));
            log.path("checkpoint.liqa.cfg");
            std::string hist;
            for (const EpochLoss& e : tr.history) hist += nlohmann::json{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}}.dump() + "\n";
            log.write_text("train_history.jsonl", hist);
            log.commit();
            out << (root / "checkpoint.liqa").string() << "\n";
            return 0;
        }

        if (eval_cmd->parsed()) {
            const ModelBundle b = load_for_inference(checkpoint, common, err);
            OutputLog log(root, "eval");
            const Manifest m = select_split(load_manifest(manifest_path), split);
            const EvalReport r = evaluate(b, m, EvalOptions{b.config.threads, {}});
            for (const EvalFailure& f : r.failures) err << "failed " << f.image_id << ": " << f.message << "\n";
            std::string preds;
            for (const EvalRecord& rec : r.records)
                preds += nlohmann::json{{"image_id", rec.image_id}, {"mos", rec.mos}, {"predicted", rec.predicted}}.dump() + "\n";
            log.write_text("predictions.jsonl", preds);
            log.write_text("results.jsonl", report_json(r, "eval-" + split, b.train_db) + "\n");
            std::ostringstream table;
            table << "dataset: " << r.dataset << " (" << split << ", " << r.records.size() << " images)\n";
            if (r.degenerate)
                table << "SRCC: -\nPLCC: -\n(degenerate: constant predictions)\n";
            else
                table << "SRCC: " << format_fixed(r.srcc) << "\nPLCC: " << format_fixed(r.plcc) << "\n";
            log.write_text("results.txt", table.str());
            log.commit();
            out << table.str();
            return 0;
        }

        if (ablate_cmd->parsed()) {
            const RunConfig cfg = resolve_config(common);
            OutputLog log(root, "ablate");
            const AblationSpec spec = std::filesystem::exists(grid) ? parse_ablation_file(grid) : named_ablation(grid);
            spec.validate(cfg);
            const Manifest m = load_manifest(manifest_path);
            const Manifest tm = test_manifest_path.empty() ? m : load_manifest(test_manifest_path);
            const ImageSet train_set = load_images(m.subset(Split::Train));
            const ImageSet test_set = load_images(tm.subset(Split::Test));
            AblationOptions options;
            options.threads = cfg.threads;
            options.on_cell = [&](const AblationCell& c) {
                err << "cell " << c.name << ": ";
                if (!c.error.empty()) err << "failed: " << c.error;
                else if (c.report && !c.report->degenerate) err << "srcc " << format_fixed(c.report->srcc);
                else err << "degenerate";
                err << " (" << format_fixed(c.runtime_s, 1) << "s)\n";
            };
            const AblationResult result = run_ablation(cfg, spec, train_set, test_set, options);
            const std::string stem = "ablation_" + spec.name;
            log.write_text(stem + ".jsonl", results_jsonl(result));
            const std::string table = render_table(result);
            log.write_text(stem + ".txt", table);
            log.write_text(stem + ".svg", render_svg(result));
            log.commit();
            out << table;
            return 0;
        }

        if (export_cmd->parsed()) {
            const ModelBundle b = load_for_inference(checkpoint, common, err);
            OutputLog log(root, "export-features");
            const ImageSet set = load_images(select_split(load_manifest(manifest_path), split));
            const std::size_t n = export_features(b, set, log.path("features.jsonl"), b.config.threads);
            log.commit();
            out << n << " records -> " << (root / "features.jsonl").string() << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    err << app.help();
    return 2;
}

} // namespace liqa
