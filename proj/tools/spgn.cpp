// spgn: command-line front end for training, evaluation and the experiment
// harnesses. Metric records are appended to --out as JSON lines.

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "spgn/config.hpp"
#include "spgn/engine.hpp"
#include "spgn/synthetic.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Options {
    std::string data;
    std::string target;
    std::string config;
    std::string out;
    std::string csv;
    std::string checkpoint;
    std::string strategy;
    std::string distance = "dtw";
    std::string noise_band = "mid";
    double snr_db = 10.0;
    std::vector<std::size_t> values;
    std::size_t train_way = 0, eval_way = 0;
    std::size_t series_index = 0;
    std::optional<std::size_t> window;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> way, shot, queries, bands, layers, epochs, episodes, eval_episodes, workers;
    std::optional<double> lr;
};

fs::path env_dir(const char* var) {
    const char* v = std::getenv(var);
    return v && *v ? fs::path(v) : fs::path();
}

fs::path resolve_in(const fs::path& p, const char* var) {
    if (p.empty() || p.is_absolute()) return p;
    const auto base = env_dir(var);
    return base.empty() ? p : base / p;
}

struct Splits {
    spgn::Dataset train;
    spgn::Dataset test;
    std::string name;
};

// `synthetic`, a UCR file (its sibling split is picked up when present), a
// directory holding NAME_TRAIN/NAME_TEST files, or a dataset name looked up
// under SPGN_DATA_DIR.
Splits load_splits(const std::string& spec, std::uint64_t seed) {
    if (spec == "synthetic") {
        auto task = spgn::synthetic::make_confounder_task({}, seed);
        return {std::move(task.train), std::move(task.test), "synthetic"};
    }
    fs::path p = resolve_in(spec, "SPGN_DATA_DIR");
    if (fs::is_directory(p)) {
        const std::string name = p.filename().string();
        for (const char* ext : {".tsv", ".csv", ".txt", ""}) {
            const auto tr = p / (name + "_TRAIN" + ext), te = p / (name + "_TEST" + ext);
            if (fs::exists(tr) && fs::exists(te)) return {spgn::load_ucr(tr), spgn::load_ucr(te), name};
        }
        throw spgn::LoadError("no " + name + "_TRAIN/" + name + "_TEST pair in " + p.string());
    }
    if (!fs::exists(p)) throw spgn::LoadError("data source not found: " + p.string());
    auto first = spgn::load_ucr(p);
    std::string stem = p.stem().string();
    for (const char* tag : {"_TRAIN", "_TEST"}) {
        const auto pos = stem.rfind(tag);
        if (pos == std::string::npos || pos + std::strlen(tag) != stem.size()) continue;
        const std::string other = std::string(tag) == "_TRAIN" ? "_TEST" : "_TRAIN";
        const auto sibling = p.parent_path() / (stem.substr(0, pos) + other + p.extension().string());
        const std::string name = stem.substr(0, pos);
        if (!fs::exists(sibling)) break;
        auto second = spgn::load_ucr(sibling);
        if (other == "_TEST") return {std::move(first), std::move(second), name};
        return {std::move(second), std::move(first), name};
    }
    auto copy = first;
    return {std::move(first), std::move(copy), stem};
}

spgn::RunConfig build_config(const Options& o) {
    spgn::RunConfig cfg;
    if (!o.config.empty()) spgn::apply_config(cfg, spgn::load_config(resolve_in(o.config, "SPGN_DATA_DIR")));
    if (o.seed) cfg.seed = *o.seed;
    if (o.way) cfg.way = *o.way;
    if (o.shot) cfg.shot = *o.shot;
    if (o.queries) cfg.queries = *o.queries;
    if (o.bands) cfg.bands = *o.bands;
    if (o.layers) cfg.layers = *o.layers;
    if (o.epochs) cfg.epochs = *o.epochs;
    if (o.episodes) cfg.episodes_per_epoch = *o.episodes;
    if (o.eval_episodes) cfg.eval_episodes = *o.eval_episodes;
    if (o.workers) cfg.workers = *o.workers;
    if (o.lr) cfg.lr = *o.lr;
    if (!o.strategy.empty()) cfg.strategy = spgn::spectral::parse_strategy(o.strategy);
    cfg.validate();
    return cfg;
}

json record(const std::string& dataset, const spgn::RunConfig& cfg, const spgn::RunMetrics& m) {
    json r;
    r["dataset"] = dataset;
    r["way"] = cfg.way;
    r["shot"] = cfg.shot;
    r["s"] = cfg.bands;
    r["T"] = cfg.layers;
    r["mean_acc"] = m.mean_acc;
    r["ci95"] = m.ci95;
    r["seed"] = cfg.seed;
    r["wall_clock_s"] = m.wall_clock_s;
    return r;
}

class Sink {
public:
    explicit Sink(const std::string& out) {
        if (out.empty()) return;
        path_ = resolve_in(out, "SPGN_OUT_DIR");
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        file_.open(path_, std::ios::app);
        if (!file_) throw spgn::Error("cannot write " + path_.string());
    }

    void emit(const json& r) {
        const std::string line = r.dump();
        std::cout << line << '\n';
        if (file_.is_open()) file_ << line << '\n' << std::flush;
    }

private:
    fs::path path_;
    std::ofstream file_;
};

void write_csv(const std::string& path, const std::string& column, const std::vector<spgn::SweepRow>& rows) {
    std::ostringstream os;
    os << column << ",mean_acc,ci95\n";
    for (const auto& r : rows) os << r.value << ',' << r.metrics.mean_acc << ',' << r.metrics.ci95 << '\n';
    if (path.empty()) {
        std::cout << os.str();
        return;
    }
    const auto p = resolve_in(path, "SPGN_OUT_DIR");
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    if (!f) throw spgn::Error("cannot write " + p.string());
    f << os.str();
}

std::string sweep_csv_path(const Options& o, const char* suffix) {
    if (!o.csv.empty()) return o.csv;
    if (o.out.empty()) return {};
    fs::path p = o.out;
    return (p.parent_path() / (p.stem().string() + suffix + ".csv")).string();
}

int grad_check_command(const Options& o, Sink& sink) {
    // Toy 2-way 1-shot task, two bands, two propagation layers, float64.
    spgn::ModelConfig mc;
    mc.bands = 2;
    mc.graph.layers = 2;
    mc.graph.embedding = 8;
    mc.graph.relation_hidden = 6;
    mc.graph.edge_hidden = 4;
    mc.encoder.widths = {4, 4};
    mc.encoder.layers_per_block = 1;
    mc.encoder.kernel = 3;
    const std::uint64_t seed = o.seed.value_or(0);
    spgn::Model<double> model(mc, seed);
    auto task = spgn::synthetic::make_confounder_task({.length = 16, .train_classes = 2, .test_classes = 2,
                                                       .per_class = 3, .tones = 2, .mid_lo = 3, .mid_hi = 6},
                                                      seed);
    spgn::Rng rng(seed);
    const auto ep = spgn::sample_episode(task.train, 2, 1, 1, rng);
    const auto in = model.prepare(ep);
    auto loss = [&](spgn::ad::Tape<double>& tape) {
        return model.loss(model.forward(tape, in, spgn::ad::Mode::train), in);
    };
    const auto res = spgn::nn::grad_check_params(loss, model.params(), {.max_coords = 0, .seed = seed});
    json r;
    r["command"] = "grad-check";
    r["checked"] = res.checked;
    r["max_rel_error"] = res.max_rel_error;
    r["max_abs_error"] = res.max_abs_error;
    r["pass"] = res.max_rel_error < 1e-3;
    sink.emit(r);
    return res.max_rel_error < 1e-3 ? 0 : 1;
}

int inspect_spectrum(const Options& o, const spgn::RunConfig& cfg) {
    const auto ds = spgn::load_ucr(resolve_in(o.data, "SPGN_DATA_DIR"));
    if (o.series_index >= ds.series.size())
        throw spgn::ContractError("--index " + std::to_string(o.series_index) + " out of range (" +
                                  std::to_string(ds.series.size()) + " series)");
    const auto psd = spgn::spectral::compute_psd(ds.series[o.series_index]);
    const auto part = spgn::spectral::split_frequencies(psd, cfg.bands, cfg.strategy);
    const auto energy = spgn::spectral::band_energies(psd, part);
    std::ostringstream os;
    os << std::setprecision(17) << "band,f_lo,f_hi,power\n";
    for (std::size_t j = 0; j < part.s; ++j) os << j << ',' << part.lo(j) << ',' << part.hi(j) << ',' << energy[j] << '\n';
    if (o.out.empty()) {
        std::cout << os.str();
    } else {
        const auto p = resolve_in(o.out, "SPGN_OUT_DIR");
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        std::ofstream f(p);
        if (!f) throw spgn::Error("cannot write " + p.string());
        f << os.str();
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spectral propagation graph network for few-shot time-series classification"};
    app.require_subcommand(1, 1);
    Options o;

    auto common = [&](CLI::App* c, bool needs_data = true) {
        auto* d = c->add_option("--data", o.data, "'synthetic', a UCR file, or a dataset directory");
        if (needs_data) d->required();
        c->add_option("--config", o.config, "key = value run configuration");
        c->add_option("--seed", o.seed, "seed for every stochastic choice");
        c->add_option("--way", o.way)->check(CLI::PositiveNumber);
        c->add_option("--shot", o.shot)->check(CLI::PositiveNumber);
        c->add_option("--queries", o.queries, "queries per class")->check(CLI::PositiveNumber);
        c->add_option("--bands", o.bands, "spectral bands s")->check(CLI::PositiveNumber);
        c->add_option("--layers", o.layers, "propagation layers T")->check(CLI::PositiveNumber);
        c->add_option("--strategy", o.strategy, "equal_power | equal_freq | exponential")
            ->check(CLI::IsMember({"equal_power", "power", "ours", "equal_freq", "freq", "average", "exponential", "exp"}));
        c->add_option("--epochs", o.epochs);
        c->add_option("--episodes", o.episodes, "training episodes per epoch")->check(CLI::PositiveNumber);
        c->add_option("--eval-episodes", o.eval_episodes)->check(CLI::PositiveNumber);
        c->add_option("--lr", o.lr)->check(CLI::PositiveNumber);
        c->add_option("--workers", o.workers, "evaluation threads (0 = all cores)");
        c->add_option("--out", o.out, "JSON-lines metrics file (appended)");
    };

    auto* train = app.add_subcommand("train", "train, then evaluate on the test split");
    common(train);
    train->add_option("--checkpoint", o.checkpoint, "write trained parameters here");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    common(eval);
    eval->add_option("--checkpoint", o.checkpoint)->required();
    auto* ablate = app.add_subcommand("ablate", "baseline, +SRA, +SP and full model");
    common(ablate);
    auto* cross_domain = app.add_subcommand("cross-domain", "train on --data, evaluate on --target");
    common(cross_domain);
    cross_domain->add_option("--target", o.target)->required();
    auto* cross_way = app.add_subcommand("cross-way", "evaluate at a different way than trained");
    common(cross_way);
    cross_way->add_option("--train-way", o.train_way)->required()->check(CLI::PositiveNumber);
    cross_way->add_option("--eval-way", o.eval_way)->required()->check(CLI::PositiveNumber);
    auto* split_sweep = app.add_subcommand("split-sweep", "accuracy per band count");
    common(split_sweep);
    split_sweep->add_option("--values", o.values, "band counts")->required()->delimiter(',');
    split_sweep->add_option("--csv", o.csv);
    auto* k_sweep = app.add_subcommand("k-sweep", "accuracy per support count");
    common(k_sweep);
    k_sweep->add_option("--values", o.values, "shot counts")->required()->delimiter(',');
    k_sweep->add_option("--csv", o.csv);
    auto* noise = app.add_subcommand("noise-eval", "clean versus band-noise accuracy, model and DTW");
    common(noise);
    noise->add_option("--noise-band", o.noise_band)->check(CLI::IsMember({"low", "mid", "middle", "high"}));
    noise->add_option("--snr", o.snr_db, "dB");
    auto* baseline = app.add_subcommand("baseline", "1-NN with Euclidean or DTW distance");
    common(baseline);
    baseline->add_option("--distance", o.distance)->check(CLI::IsMember({"euclid", "euclidean", "ed", "dtw"}));
    baseline->add_option("--window", o.window, "Sakoe-Chiba half-width");
    auto* inspect = app.add_subcommand("inspect-spectrum", "band boundaries of one series as CSV");
    common(inspect);
    inspect->add_option("--index", o.series_index, "row of the file");
    auto* grad = app.add_subcommand("grad-check", "finite-difference check of the full model");
    common(grad, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        Sink sink(inspect->parsed() ? std::string() : o.out);
        if (grad->parsed()) return grad_check_command(o, sink);
        const auto cfg = build_config(o);
        if (inspect->parsed()) return inspect_spectrum(o, cfg);
        const auto data = load_splits(o.data, cfg.seed);

        if (train->parsed()) {
            auto trained = spgn::train(data.train, cfg);
            auto m = spgn::evaluate(data.test, trained.model, cfg);
            m.wall_clock_s += trained.metrics.wall_clock_s;
            if (!o.checkpoint.empty())
                spgn::nn::save_checkpoint(resolve_in(o.checkpoint, "SPGN_OUT_DIR"), trained.model.params());
            auto r = record(data.name, cfg, m);
            r["final_loss"] = trained.metrics.loss_curve.empty() ? 0.0 : trained.metrics.loss_curve.back();
            sink.emit(r);
        } else if (eval->parsed()) {
            spgn::Model<float> model(cfg.model_config(), 0);
            spgn::nn::load_checkpoint(resolve_in(o.checkpoint, "SPGN_OUT_DIR"), model.params());
            sink.emit(record(data.name, cfg, spgn::evaluate(data.test, model, cfg)));
        } else if (ablate->parsed()) {
            const auto t = spgn::ablate(data.train, data.test, cfg);
            for (const auto& [name, m] : {std::pair{"baseline", &t.baseline}, std::pair{"sra", &t.sra},
                                          std::pair{"sp", &t.sp}, std::pair{"full", &t.full}}) {
                auto r = record(data.name, cfg, *m);
                r["variant"] = name;
                sink.emit(r);
            }
        } else if (cross_domain->parsed()) {
            const auto target = load_splits(o.target, cfg.seed);
            auto r = record(data.name + "->" + target.name, cfg, spgn::cross_domain(data.train, target.test, cfg));
            sink.emit(r);
        } else if (cross_way->parsed()) {
            auto c = cfg;
            const auto m = spgn::cross_way(data.train, data.test, o.train_way, o.eval_way, c);
            c.way = o.eval_way;
            auto r = record(data.name, c, m);
            r["train_way"] = o.train_way;
            sink.emit(r);
        } else if (split_sweep->parsed() || k_sweep->parsed()) {
            const bool split = split_sweep->parsed();
            const auto rows = split ? spgn::split_sweep(data.train, data.test, cfg, o.values)
                                    : spgn::k_sweep(data.train, data.test, cfg, o.values);
            for (const auto& row : rows) {
                auto c = cfg;
                (split ? c.bands : c.shot) = row.value;
                sink.emit(record(data.name, c, row.metrics));
            }
            write_csv(sweep_csv_path(o, split ? "_split" : "_k"), split ? "s" : "k", rows);
        } else if (noise->parsed()) {
            const auto spec = spgn::NoiseSpec::preset(spgn::parse_noise_band(o.noise_band), o.snr_db);
            auto trained = spgn::train(data.train, cfg);
            const auto cmp = spgn::noise_eval(data.test, trained.model, cfg, spec);
            for (const auto& [method, cond, m] :
                 {std::tuple{"spgn", "clean", &cmp.spgn_clean}, std::tuple{"spgn", "noisy", &cmp.spgn_noisy},
                  std::tuple{"dtw", "clean", &cmp.dtw_clean}, std::tuple{"dtw", "noisy", &cmp.dtw_noisy}}) {
                auto r = record(data.name, cfg, *m);
                r["method"] = method;
                r["condition"] = cond;
                r["noise_band"] = o.noise_band;
                r["snr_db"] = o.snr_db;
                sink.emit(r);
            }
        } else if (baseline->parsed()) {
            spgn::baselines::DtwConfig dtw{o.window};
            const auto dist = spgn::baselines::parse_distance(o.distance);
            auto r = record(data.name, cfg, spgn::evaluate_nn(data.test, cfg, dist, dtw));
            r["method"] = dist == spgn::baselines::Distance::dtw ? "dtw" : "euclid";
            sink.emit(r);
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
