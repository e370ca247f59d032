#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "capiqa/checkpoint.hpp"
#include "capiqa/datagen.hpp"
#include "capiqa/metrics.hpp"
#include "capiqa/model.hpp"
#include "capiqa/training.hpp"

namespace capiqa {

inline constexpr const char* kToolName = "capiqa";
inline constexpr const char* kToolVersion = "0.1.0";

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int usage = 2;
inline constexpr int io = 3;
inline constexpr int numerical = 4;
}  // namespace exit_code

struct PriorSource {
    enum class Kind { pseudo, file, descriptions };
    Kind kind = Kind::pseudo;
    std::string path;
    std::uint64_t seed = 0;

    bool operator==(const PriorSource&) const = default;
};

inline void to_json(nlohmann::json& j, const PriorSource& p) {
    switch (p.kind) {
        case PriorSource::Kind::pseudo: j = {{"source", "pseudo"}, {"seed", p.seed}}; break;
        case PriorSource::Kind::file: j = {{"source", "file"}, {"path", p.path}}; break;
        case PriorSource::Kind::descriptions: j = {{"source", "descriptions"}, {"path", p.path}, {"seed", p.seed}}; break;
    }
}

inline void from_json(const nlohmann::json& j, PriorSource& p) {
    p = PriorSource{};
    const auto kind = j.value("source", std::string("pseudo"));
    if (kind == "pseudo") {
        p.kind = PriorSource::Kind::pseudo;
    } else if (kind == "file") {
        p.kind = PriorSource::Kind::file;
    } else if (kind == "descriptions") {
        p.kind = PriorSource::Kind::descriptions;
    } else {
        throw ConfigError("unknown prior source '" + kind + "' (expected pseudo|file|descriptions)");
    }
    p.path = j.value("path", std::string());
    p.seed = j.value("seed", std::uint64_t{0});
    if (p.kind != PriorSource::Kind::pseudo && p.path.empty()) throw ConfigError("prior source '" + kind + "' needs a path");
}

inline TextPrior resolve_prior(const PriorSource& src, std::size_t dim) {
    switch (src.kind) {
        case PriorSource::Kind::file: return load_prior(src.path, dim);
        case PriorSource::Kind::descriptions: return pseudo_prior(load_descriptions(src.path), src.seed, dim);
        case PriorSource::Kind::pseudo: break;
    }
    return default_prior(dim, src.seed);
}

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    PriorSource prior;
    double val_fraction = 0.2;

    bool operator==(const RunConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"model", c.model}, {"train", c.train}, {"prior", c.prior}, {"val_fraction", c.val_fraction}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    c = RunConfig{};
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (key != "model" && key != "train" && key != "prior" && key != "val_fraction") {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("prior")) c.prior = j.at("prior").get<PriorSource>();
    c.val_fraction = j.value("val_fraction", c.val_fraction);
}

inline RunConfig parse_run_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    try {
        auto cfg = j.get<RunConfig>();
        cfg.model.validate();
        cfg.train.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline RunConfig load_run_config(const std::string& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const IoError&) {
        throw ConfigError("cannot read config '" + path + "'");
    }
    return parse_run_config(text);
}

/// Fields every report carries.
inline nlohmann::json report_header(const std::string& command, const nlohmann::json& config, const std::string& digest,
                                    double seconds) {
    return {{"tool", kToolName},
            {"version", kToolVersion},
            {"command", command},
            {"config", config},
            {"dataset_digest", digest},
            {"duration_seconds", seconds}};
}

inline std::string predictions_csv(const ScorePairs& p) {
    std::string out = "index,truth,pred,abs_error\n";
    char buf[160];
    for (std::size_t i = 0; i < p.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g\n", i, p.truth[i], p.pred[i], std::abs(p.pred[i] - p.truth[i]));
        out += buf;
    }
    return out;
}

/// Reads the "pred" column of a predictions CSV (header required).
inline std::vector<double> parse_predictions_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("predictions: empty file");
    std::vector<std::string> header;
    {
        std::istringstream h(line);
        for (std::string cell; std::getline(h, cell, ',');) header.push_back(cell);
    }
    const auto col = std::find(header.begin(), header.end(), "pred");
    if (col == header.end()) throw ParseError("predictions: no 'pred' column");
    const auto idx = static_cast<std::size_t>(col - header.begin());
    std::vector<double> out;
    for (std::size_t row = 1; std::getline(in, line); ++row) {
        if (line.empty()) continue;
        std::istringstream r(line);
        std::vector<std::string> cells;
        for (std::string cell; std::getline(r, cell, ',');) cells.push_back(cell);
        if (cells.size() <= idx) throw ParseError("predictions: row " + std::to_string(row) + " is short");
        try {
            std::size_t used = 0;
            out.push_back(std::stod(cells[idx], &used));
            if (used != cells[idx].size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw ParseError("predictions: row " + std::to_string(row) + " has a bad value '" + cells[idx] + "'");
        }
    }
    return out;
}

/// 600x600 scatter of pred against truth with a y = x guide.
inline std::string scatter_svg(const ScorePairs& p) {
    constexpr double size = 600, margin = 60, span = size - 2 * margin;
    auto sx = [&](double v) { return margin + std::clamp(v, 0.0, kScoreMax) / kScoreMax * span; };
    auto sy = [&](double v) { return size - margin - std::clamp(v, 0.0, kScoreMax) / kScoreMax * span; };
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(2);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"600\" viewBox=\"0 0 600 600\">\n";
    s << "<rect width=\"600\" height=\"600\" fill=\"white\"/>\n";
    s << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(4) << "\" y2=\"" << sy(0)
      << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(0) << "\" y2=\"" << sy(4)
      << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        s << "<line x1=\"" << sx(t) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(t) << "\" y2=\"" << sy(0) + 6
          << "\" stroke=\"black\"/>";
        s << "<text x=\"" << sx(t) << "\" y=\"" << sy(0) + 22 << "\" text-anchor=\"middle\" font-size=\"14\">" << t
          << "</text>\n";
        s << "<line x1=\"" << sx(0) - 6 << "\" y1=\"" << sy(t) << "\" x2=\"" << sx(0) << "\" y2=\"" << sy(t)
          << "\" stroke=\"black\"/>";
        s << "<text x=\"" << sx(0) - 12 << "\" y=\"" << sy(t) + 5 << "\" text-anchor=\"end\" font-size=\"14\">" << t
          << "</text>\n";
    }
    s << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(4) << "\" y2=\"" << sy(4)
      << "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";
    s << "<text x=\"300\" y=\"590\" text-anchor=\"middle\" font-size=\"16\">truth</text>\n";
    s << "<text x=\"18\" y=\"300\" text-anchor=\"middle\" font-size=\"16\" transform=\"rotate(-90 18 300)\">pred</text>\n";
    for (std::size_t i = 0; i < p.size(); ++i) {
        s << "<circle cx=\"" << sx(p.truth[i]) << "\" cy=\"" << sy(p.pred[i])
          << "\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.7\"/>\n";
    }
    s << "</svg>\n";
    return s.str();
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

inline void check_image_size(const ModelConfig& cfg, std::size_t size) {
    if (cfg.encoder.input_height != size || cfg.encoder.input_width != size) {
        throw ConfigError("model expects " + std::to_string(cfg.encoder.input_height) + "x" +
                          std::to_string(cfg.encoder.input_width) + " images, dataset has " + std::to_string(size) +
                          "x" + std::to_string(size));
    }
}

}  // namespace detail

struct GenArgs {
    std::string out;
    std::size_t count = 512;
    std::size_t size = 64;
    std::uint64_t seed = 0;
};

inline int cmd_gen(const GenArgs& a, std::ostream& out) {
    const auto m = generate_dataset(a.count, a.size, a.seed, a.out);
    out << "wrote " << m.count << " samples of " << m.size << "x" << m.size << " to " << a.out << "\n";
    return exit_code::ok;
}

struct TrainArgs {
    std::string data;
    std::string config;
    std::string out;
    std::optional<double> val_fraction;
    bool quiet = false;
};

inline std::string history_path(const std::string& ckpt) { return ckpt + ".history.json"; }

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    if (a.val_fraction) cfg.val_fraction = *a.val_fraction;
    const auto ds = load_dataset(a.data);
    detail::check_image_size(cfg.model, ds.manifest.size);
    const auto [train, val] = split_dataset(ds.examples, cfg.val_fraction, cfg.train.seed);

    CapIqaModel<float> model(cfg.model, resolve_prior(cfg.prior, cfg.model.prompt_dim));
    History history;
    try {
        history = fit(train, val, model, cfg.train, [&](const EpochRecord& e) {
            if (a.quiet) return;
            err << "epoch " << e.epoch + 1 << "/" << cfg.train.epochs << " lr " << e.lr << " loss " << e.train_loss;
            if (e.val) err << " val_s " << e.val->s;
            err << "\n";
        });
    } catch (const TrainingDiverged& e) {
        err << e.diagnostic().dump(2) << "\n";
        throw;
    }

    const nlohmann::json resolved = cfg;
    save(model, a.out, {{"run_config", resolved}, {"best_epoch", history.best_epoch}});
    auto report = report_header("train", resolved, ds.digest, detail::seconds_since(t0));
    report["history"] = to_json(history);
    detail::write_json(history_path(a.out), report);
    out << "trained " << history.epochs.size() << " epochs on " << history.n_train << "/" << history.n_val
        << " split; best epoch " << history.best_epoch + 1 << "; checkpoint " << a.out << "\n";
    return exit_code::ok;
}

struct EvalArgs {
    std::string data;
    std::string ckpt;
    std::string report;
    std::string csv;
    std::string scatter;
    std::string predictions;  // score a predictions CSV instead of running a model
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto ds = load_dataset(a.data);
    ScorePairs pairs;
    for (const auto& e : ds.examples) pairs.truth.push_back(e.score);
    nlohmann::json config = {{"data", a.data}};
    if (!a.predictions.empty()) {
        pairs.pred = parse_predictions_csv(read_file(a.predictions));
        if (pairs.pred.size() != pairs.truth.size()) {
            throw ConfigError("predictions file has " + std::to_string(pairs.pred.size()) + " rows, dataset has " +
                              std::to_string(pairs.truth.size()));
        }
        config["predictions"] = a.predictions;
    } else {
        if (a.ckpt.empty()) throw ConfigError("eval needs --ckpt or --predictions");
        const auto ck = load_checkpoint(a.ckpt);
        detail::check_image_size(ck.config, ds.manifest.size);
        const auto model = model_from_checkpoint<float>(ck);
        pairs.pred = predict_all(model, ds.examples);
        config["checkpoint"] = a.ckpt;
        config["model"] = ck.config;
        if (ck.meta.contains("run_config")) config["run_config"] = ck.meta.at("run_config");
    }
    if (!a.csv.empty()) write_file(a.csv, predictions_csv(pairs));
    if (!a.scatter.empty()) write_file(a.scatter, scatter_svg(pairs));

    const auto rep = evaluate(pairs);
    auto report = report_header("eval", config, ds.digest, detail::seconds_since(t0));
    report["metrics"] = to_json(rep);
    detail::write_json(a.report, report);
    char buf[160];
    std::snprintf(buf, sizeof buf, "n=%zu r=%.4f rho=%.4f tau=%.4f s=%.4f\n", rep.n, rep.r, rep.rho, rep.tau, rep.s);
    out << buf;
    return exit_code::ok;
}

struct ScoreArgs {
    std::string ckpt;
    std::string image;
    std::size_t size = 64;
};

inline int cmd_score(const ScoreArgs& a, std::ostream& out) {
    const auto pixels = parse_raster(read_file(a.image), a.size * a.size, a.image);
    const auto ck = load_checkpoint(a.ckpt);
    detail::check_image_size(ck.config, a.size);
    const auto model = model_from_checkpoint<float>(ck);
    const float s = model.score(Tensor<float>({1, a.size, a.size}, pixels));
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f\n", static_cast<double>(s));
    out << buf;
    return exit_code::ok;
}

/// Fusion rows of the ablation grid, in table order.
inline std::vector<std::array<FusionOp, 3>> table4_rows() {
    using F = FusionOp;
    return {{F::sum, F::sum, F::sum},
            {F::concat, F::sum, F::sum},
            {F::concat, F::concat, F::sum},
            {F::concat, F::concat, F::concat},
            {F::concat, F::sum, F::concat}};
}

struct AblationRow {
    std::string label;
    ModelConfig model;
};

inline std::vector<AblationRow> ablation_grid(const std::string& grid, const ModelConfig& base) {
    std::vector<AblationRow> rows;
    if (grid == "table4") {
        for (const auto& [cpa, ffn, up] : table4_rows()) {
            ModelConfig m = base;
            m.dcpa.cpa_out = cpa;
            m.dcpa.ffn_out = ffn;
            m.up_out = up;
            m.head_input = HeadInput::decoder;  // the upsampling path must be live for Up-Out to matter
            rows.push_back({m.fusion_label(), m});
        }
    } else if (grid == "norm") {
        for (const auto mode : {NormMode::dyt, NormMode::layer_norm}) {
            ModelConfig m = base;
            m.dcpa.norm_mode = mode;
            rows.push_back({mode == NormMode::dyt ? "DyT" : "LayerNorm", m});
        }
    } else {
        throw ConfigError("unknown grid '" + grid + "' (expected table4|norm)");
    }
    return rows;
}

struct AblateArgs {
    std::string data;
    std::string grid;
    std::string out;
    std::string config;
    bool quiet = false;
};

inline int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    const auto rows = ablation_grid(a.grid, cfg.model);
    const auto ds = load_dataset(a.data);
    detail::check_image_size(cfg.model, ds.manifest.size);
    const auto [train, val] = split_dataset(ds.examples, cfg.val_fraction, cfg.train.seed);

    std::error_code ec;
    std::filesystem::create_directories(a.out, ec);
    if (ec) throw IoError("cannot create '" + a.out + "': " + ec.message());

    nlohmann::json table = nlohmann::json::array();
    std::string csv = "label,parameters,pearson,spearman,kendall,overall,best_epoch\n";
    for (const auto& row : rows) {
        if (!a.quiet) err << "ablation: " << row.label << "\n";
        CapIqaModel<float> model(row.model, resolve_prior(cfg.prior, row.model.prompt_dim));
        const auto history = fit(train, val, model, cfg.train);
        const auto rep = evaluate_model(model, val);
        table.push_back({{"label", row.label},
                         {"model", row.model},
                         {"parameters", model.parameter_count()},
                         {"best_epoch", history.best_epoch},
                         {"metrics", to_json(rep)}});
        char buf[256];
        std::snprintf(buf, sizeof buf, "\"%s\",%zu,%.10g,%.10g,%.10g,%.10g,%zu\n", row.label.c_str(),
                      model.parameter_count(), rep.r, rep.rho, rep.tau, rep.s, history.best_epoch);
        csv += buf;
    }
    const nlohmann::json resolved = cfg;
    auto report = report_header("ablate", resolved, ds.digest, detail::seconds_since(t0));
    report["grid"] = a.grid;
    report["split"] = {{"n_train", train.size()}, {"n_val", val.size()}};
    report["rows"] = table;
    const auto dir = std::filesystem::path(a.out);
    detail::write_json((dir / "ablation.json").string(), report);
    write_file((dir / "ablation.csv").string(), csv);
    out << "wrote " << rows.size() << " rows to " << a.out << "\n";
    return exit_code::ok;
}

/// Maps the error hierarchy to the stable exit codes.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericalError*>(&e)) return exit_code::numerical;
    if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ParseError*>(&e)) return exit_code::io;
    return exit_code::usage;
}

/// Full command-line entry point; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Prompt-conditioned no-reference CT image quality scoring", kToolName};
    app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Generate a synthetic degraded-phantom dataset");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--count", gen.count, "Number of samples")->required();
    g->add_option("--size", gen.size, "Image side length")->required();
    g->add_option("--seed", gen.seed, "Dataset seed")->required();

    TrainArgs train;
    double val_fraction = 0;
    auto* t = app.add_subcommand("train", "Train a model and write the best checkpoint");
    t->add_option("--data", train.data, "Dataset directory")->required();
    t->add_option("--config", train.config, "Run config JSON")->required();
    t->add_option("--out", train.out, "Checkpoint path")->required();
    auto* vf = t->add_option("--val-fraction", val_fraction, "Validation fraction");
    t->add_flag("--quiet", train.quiet, "No per-epoch progress");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    e->add_option("--data", eval.data, "Dataset directory")->required();
    auto* ck = e->add_option("--ckpt", eval.ckpt, "Checkpoint path");
    auto* pr = e->add_option("--predictions", eval.predictions, "Predictions CSV to score instead of a checkpoint");
    ck->excludes(pr);
    e->add_option("--report", eval.report, "Report JSON path")->required();
    e->add_option("--csv", eval.csv, "Per-sample CSV path");
    e->add_option("--scatter", eval.scatter, "Scatter SVG path");

    ScoreArgs score;
    auto* s = app.add_subcommand("score", "Score one raw f32 raster");
    s->add_option("--ckpt", score.ckpt, "Checkpoint path")->required();
    s->add_option("--image", score.image, "Raster path")->required();
    s->add_option("--size", score.size, "Image side length")->required();

    AblateArgs ablate;
    auto* ab = app.add_subcommand("ablate", "Train and compare an ablation grid");
    ab->add_option("--data", ablate.data, "Dataset directory")->required();
    ab->add_option("--grid", ablate.grid, "table4 or norm")->required()->check(CLI::IsMember({"table4", "norm"}));
    ab->add_option("--out", ablate.out, "Output directory")->required();
    ab->add_option("--config", ablate.config, "Run config JSON");
    ab->add_flag("--quiet", ablate.quiet, "No progress output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& pe) {
        if (pe.get_exit_code() == 0) {
            app.exit(pe, out, err);
            return exit_code::ok;
        }
        err << pe.what() << "\n" << app.help();
        return exit_code::usage;
    }

    try {
        if (g->parsed()) return cmd_gen(gen, out);
        if (t->parsed()) {
            if (vf->count() > 0) train.val_fraction = val_fraction;
            return cmd_train(train, out, err);
        }
        if (e->parsed()) return cmd_eval(eval, out);
        if (s->parsed()) return cmd_score(score, out);
        if (ab->parsed()) return cmd_ablate(ablate, out, err);
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return exit_code_for(ex);
    }
    return exit_code::usage;
}

}  // namespace capiqa
