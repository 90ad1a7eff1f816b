#include "consisid/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "consisid/config.hpp"
#include "consisid/errors.hpp"
#include "consisid/io.hpp"

namespace csid::cli {

namespace fs = std::filesystem;
using config::Json;
using config::RunConfig;

namespace {

// Thrown after partial outputs are written for a run flagged unstable.
struct DivergedRun {
    std::string message;
};

std::string header_json(const RunConfig& cfg) {
    Json h;
    h["version"] = config::kVersion;
    h["config"] = cfg.doc;
    return h.dump();
}

std::string path_in(const std::string& dir, const std::string& file) { return (fs::path(dir) / file).string(); }

std::pair<std::vector<synth::VideoSample>, std::vector<synth::VideoSample>> datasets(const RunConfig& cfg) {
    auto train = cfg.paths.train_data.empty() ? synth::make_dataset(cfg.dataset, 0) : synth::load_dataset(cfg.paths.train_data);
    auto held = cfg.paths.held_out_data.empty() ? synth::make_dataset(cfg.dataset, 1) : synth::load_dataset(cfg.paths.held_out_data);
    if (train.empty() || held.empty()) throw std::runtime_error("empty dataset");
    return {std::move(train), std::move(held)};
}

struct TowerBundle {
    std::unique_ptr<nn::ParamStore> ps;
    std::unique_ptr<extract::Towers> towers;
    train::TowerTrainReport report;
    bool trained = false;
};

TowerBundle towers_for(const RunConfig& cfg, std::span<const synth::VideoSample> train_set) {
    TowerBundle b;
    b.ps = std::make_unique<nn::ParamStore>(derive_seed(cfg.seed, "towers"));
    b.towers = std::make_unique<extract::Towers>(*b.ps, cfg.dataset.identities, synth::vocab::kSize);
    if (!cfg.paths.towers.empty()) {
        nn::load_into(nn::read_checkpoint(cfg.paths.towers), *b.ps);
    } else {
        b.report = train::pretrain_towers(*b.towers, *b.ps, train_set, cfg.towers);
        b.trained = true;
    }
    b.ps->set_trainable("", false);
    return b;
}

train::TrainedModel load_model(const RunConfig& cfg, const extract::Towers& towers) {
    if (cfg.paths.checkpoint.empty()) throw config::ConfigError("paths.checkpoint is required for this command");
    auto m = train::make_model(cfg.model, train::effective_plan(cfg.plan, cfg.train.flags), &towers, cfg.seed);
    nn::load_into(nn::read_checkpoint(cfg.paths.checkpoint), *m.params);
    return m;
}

void write_table(const std::string& out, const std::string& stem, const analysis::TableReport& table, const RunConfig& cfg) {
    io::write_text_atomic(path_in(out, stem + ".csv"), analysis::to_csv(table));
    io::write_text_atomic(path_in(out, stem + ".jsonl"), analysis::to_jsonl(table, cfg.doc.dump(), config::kVersion));
}

void write_json(const std::string& out, const std::string& file, Json body, const RunConfig& cfg) {
    body["version"] = config::kVersion;
    body["config"] = cfg.doc;
    io::write_text_atomic(path_in(out, file), body.dump(2) + "\n");
}

void cmd_gen_data(const RunConfig& cfg, const std::string& out) {
    const auto train = synth::make_dataset(cfg.dataset, 0);
    const auto held = synth::make_dataset(cfg.dataset, 1);
    synth::save_dataset(path_in(out, "train.csid"), train);
    synth::save_dataset(path_in(out, "held_out.csid"), held);
    write_json(out, "gen_data.json", {{"train_videos", train.size()}, {"held_out_videos", held.size()}}, cfg);
}

void cmd_train_towers(const RunConfig& cfg, const std::string& out) {
    auto [train, held] = datasets(cfg);
    RunConfig fresh = cfg;
    fresh.paths.towers.clear();
    const auto b = towers_for(fresh, train);
    nn::save_checkpoint(path_in(out, "towers.ckpt"), header_json(cfg), {b.ps.get()});
    write_json(out, "towers_report.json",
               {{"face_loss", b.report.face_loss},
                {"metric_a_loss", b.report.metric_a_loss},
                {"metric_b_loss", b.report.metric_b_loss},
                {"caption_loss", b.report.caption_loss}},
               cfg);
}

void cmd_train(const RunConfig& cfg, const std::string& out) {
    auto [train, held] = datasets(cfg);
    const auto b = towers_for(cfg, train);
    const auto res = train::run_training(cfg.train, cfg.model, cfg.plan, train, b.towers.get(), cfg.schedule(), out, header_json(cfg));
    const auto& st = res.state;
    Json body{{"plan", cfg.plan.name},
              {"steps_completed", st.step},
              {"diverged", st.diverged},
              {"checkpoints", res.checkpoints}};
    if (st.diverged) {
        body["divergence_step"] = st.divergence_step;
        body["divergence_reason"] = st.divergence_reason;
    }
    if (!st.history.empty() && std::isfinite(st.history.back().loss)) body["final_loss"] = st.history.back().loss;
    write_json(out, "train_report.json", body, cfg);
    if (st.diverged) throw DivergedRun{"training diverged at step " + std::to_string(st.divergence_step) + ": " + st.divergence_reason};
}

void cmd_sample(const RunConfig& cfg, const std::string& out) {
    auto [train, held] = datasets(cfg);
    const auto b = towers_for(cfg, train);
    const auto m = load_model(cfg, *b.towers);
    const auto& src = held.at(cfg.inputs.reference_video);
    const int frame = cfg.inputs.reference_frame < 0 ? src.frames - 1 : cfg.inputs.reference_frame;
    const auto ref = train::reference_from_frame(src, frame);
    const auto caption = cfg.inputs.prompt.empty() ? src.caption_tokens : synth::vocab::parse_caption(cfg.inputs.prompt);
    const auto video = analysis::generate(m.model, cfg.schedule(), ref, caption, cfg.eval.sampler);
    synth::save_video(path_in(out, "video.csvd"), video.frames);
    for (std::size_t t = 0; t < video.frames.size(); ++t) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%03zu.ppm", t);
        io::write_text_atomic(path_in(out, name), synth::to_ppm(video.frames[t]));
    }
    io::write_text_atomic(path_in(out, "reference.ppm"), synth::to_ppm(ref.face));
    write_json(out, "sample.json", {{"caption", synth::vocab::caption_text(caption)}, {"frames", video.frames.size()}}, cfg);
}

void cmd_evaluate(const RunConfig& cfg, const std::string& out) {
    auto [train, held] = datasets(cfg);
    const auto b = towers_for(cfg, train);
    const auto m = load_model(cfg, *b.towers);
    const auto pairs = analysis::make_eval_pairs(held, cfg.eval_pairs, cfg.dataset.identities, cfg.model.dit.frames);
    const auto ev = analysis::evaluate(m.model, *b.towers, cfg.schedule(), held, pairs, cfg.eval);
    analysis::TableReport table;
    table.title = "evaluate";
    analysis::AblationRow row;
    row.key = cfg.plan.name;
    row.metrics = ev.report;
    row.paper = analysis::paper_injection_row(cfg.plan.name);
    table.rows.push_back(row);
    write_table(out, "metrics", table, cfg);
}

void cmd_ablate_injection(const RunConfig& cfg, const std::string& out) {
    auto [train, held] = datasets(cfg);
    const auto b = towers_for(cfg, train);
    analysis::InjectionAblationSpec spec;
    spec.plans = cfg.ablation_plans;
    spec.train = cfg.train;
    spec.model = cfg.model;
    spec.eval = cfg.eval;
    spec.eval_pairs = cfg.eval_pairs;
    spec.identities = cfg.dataset.identities;
    const auto res = analysis::run_injection_ablation(spec, train, held, *b.towers, cfg.schedule(), out, header_json(cfg));
    write_table(out, "injection", res.table, cfg);
    if (res.any_unstable) throw DivergedRun{"one or more plans were unstable"};
}

void cmd_ablate_steps(const RunConfig& cfg, const std::string& out) {
    auto [train, held] = datasets(cfg);
    const auto b = towers_for(cfg, train);
    train::TrainedModel trained;
    const inject::ConditionedModel* model = nullptr;
    std::optional<train::TrainResult> inline_run;
    if (!cfg.paths.checkpoint.empty()) {
        trained = load_model(cfg, *b.towers);
        model = &trained.model;
    } else {
        inline_run.emplace(train::run_training(cfg.train, cfg.model, cfg.plan, train, b.towers.get(), cfg.schedule(),
                                               path_in(out, "train"), header_json(cfg)));
        if (inline_run->state.diverged) throw DivergedRun{"training for the step sweep diverged"};
        model = &inline_run->state.net.model;
    }
    const auto pairs = analysis::make_eval_pairs(held, cfg.eval_pairs, cfg.dataset.identities, cfg.model.dit.frames);
    const auto table = analysis::run_steps_ablation(*model, *b.towers, cfg.schedule(), held, pairs, cfg.ablation_steps, cfg.eval);
    write_table(out, "steps", table, cfg);
}

void cmd_spectrum(const RunConfig& cfg, const std::string& out) {
    std::vector<synth::Image> frames;
    std::vector<std::vector<std::uint8_t>> masks;
    const auto held = cfg.paths.mask_data.empty() ? synth::make_dataset(cfg.dataset, 1) : synth::load_dataset(cfg.paths.mask_data);
    const auto& src = held.at(cfg.inputs.spectrum_video);
    if (!cfg.paths.video.empty()) {
        frames = synth::load_video(cfg.paths.video);
    } else {
        for (int t = 0; t < src.frames; ++t) frames.push_back(src.frame(t));
    }
    if (frames.front().height == src.height && frames.front().width == src.width &&
        static_cast<int>(frames.size()) <= src.frames) {
        for (std::size_t t = 0; t < frames.size(); ++t) {
            const auto m = src.frame_mask(static_cast<int>(t));
            masks.emplace_back(m.begin(), m.end());
        }
    }
    const auto spec = analysis::fourier_spectrum(frames, masks);
    const auto band = analysis::band_energy(spec.profile, cfg.eval.split_radius);
    std::ostringstream csv;
    csv << "radius,log_amplitude,relative\n";
    for (std::size_t i = 0; i < spec.profile.radial_bins.size(); ++i)
        csv << spec.profile.radial_bins[i] << ',' << spec.profile.log_amplitude[i] << ',' << spec.profile.relative[i] << '\n';
    io::write_text_atomic(path_in(out, "spectrum.csv"), csv.str());
    io::write_text_atomic(path_in(out, "spectrum.pgm"), analysis::spectrum_pgm(spec));
    Json j{{"size", spec.size},
           {"masked", !masks.empty()},
           {"low_band", band.low},
           {"high_band", band.high},
           {"relative", spec.profile.relative},
           {"version", config::kVersion},
           {"config", cfg.doc}};
    io::write_text_atomic(path_in(out, "spectrum.jsonl"), j.dump() + "\n");
}

int cmd_curate(const RunConfig& cfg, const std::string& out) {
    std::ifstream file;
    if (!cfg.paths.curate_input.empty()) {
        file.open(cfg.paths.curate_input);
        if (!file) throw std::runtime_error("cannot open " + cfg.paths.curate_input);
    }
    std::istream& in = cfg.paths.curate_input.empty() ? std::cin : file;
    curate::CurateStats st;
    if (out.empty()) {
        st = curate::curate(in, std::cout, cfg.curation);
    } else {
        std::ostringstream buf;
        st = curate::curate(in, buf, cfg.curation);
        io::write_text_atomic(path_in(out, "curated.jsonl"), buf.str());
    }
    std::cerr << "curate: " << st.records << " records, " << st.accepted << " accepted, " << st.errors << " errors\n";
    return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Identity-preserving text-to-video toolkit at desk scale", "consisid"};
    app.require_subcommand(1);
    app.set_version_flag("--version", config::kVersion);

    std::string config_path, out_dir, params_path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-data", "generate the synthetic train and held-out datasets"},
        {"train-towers", "pretrain the frozen face, semantic, caption and metric towers"},
        {"train", "train a model for the configured injection plan"},
        {"sample", "generate one video for a held-out reference"},
        {"evaluate", "score a checkpoint on the held-out pairs"},
        {"ablate-injection", "train and score every configured injection plan"},
        {"ablate-steps", "sweep the number of sampling steps"},
        {"spectrum", "radial Fourier profile of a video's face region"},
        {"curate", "filter and track detection records (stdin to stdout)"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--set", sets, "override a dotted key, e.g. train.alpha=0.5")->allow_extra_args(false);
        sub->add_option("--seed", seed, "root seed");
        sub->add_option("--out", out_dir, "output directory");
        if (name == "curate") sub->add_option("--params", params_path, "JSON file with curation parameters");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();

    RunConfig cfg;
    try {
        Json doc = config::load_layered(config_path, sets, seed);
        if (!params_path.empty()) {
            std::ifstream in(params_path);
            if (!in) throw config::ConfigError("cannot open params file: " + params_path);
            Json p;
            try {
                p = Json::parse(in);
            } catch (const Json::parse_error& e) {
                throw config::ConfigError(std::string("params file is not valid JSON: ") + e.what());
            }
            config::merge_into(doc["curation"], p, "curation");
        }
        cfg = config::resolve(doc);
        if (out_dir.empty() && cmd != "curate") throw config::ConfigError("--out is required");
    } catch (const config::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    }

    try {
        if (!out_dir.empty()) fs::create_directories(out_dir);
        if (cmd == "gen-data") cmd_gen_data(cfg, out_dir);
        else if (cmd == "train-towers") cmd_train_towers(cfg, out_dir);
        else if (cmd == "train") cmd_train(cfg, out_dir);
        else if (cmd == "sample") cmd_sample(cfg, out_dir);
        else if (cmd == "evaluate") cmd_evaluate(cfg, out_dir);
        else if (cmd == "ablate-injection") cmd_ablate_injection(cfg, out_dir);
        else if (cmd == "ablate-steps") cmd_ablate_steps(cfg, out_dir);
        else if (cmd == "spectrum") cmd_spectrum(cfg, out_dir);
        else if (cmd == "curate") return cmd_curate(cfg, out_dir);
    } catch (const DivergedRun& d) {
        std::cerr << "unstable: " << d.message << '\n';
        return kExitDiverged;
    } catch (const NumericDivergenceError& e) {
        std::cerr << "unstable: " << e.what() << '\n';
        return kExitDiverged;
    } catch (const config::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace csid::cli
