#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "protomsl/http.hpp"
#include "protomsl/protomsl.hpp"

using namespace protomsl;
namespace fs = std::filesystem;

namespace {

void print_counts(const DatasetIndex& idx) {
    auto counts = idx.counts_per_class_per_split();
    size_t w = 5;
    for (const auto& c : idx.class_names) w = std::max(w, c.size());
    std::printf("%-*s %7s %7s %7s %10s\n", static_cast<int>(w), "class", "train", "val", "test", "unassigned");
    std::array<int, 4> total{};
    for (size_t c = 0; c < counts.size(); ++c) {
        std::printf("%-*s %7d %7d %7d %10d\n", static_cast<int>(w), idx.class_names[c].c_str(), counts[c][0],
                    counts[c][1], counts[c][2], counts[c][3]);
        for (int s = 0; s < 4; ++s) total[s] += counts[c][s];
    }
    std::printf("%-*s %7d %7d %7d %10d\n", static_cast<int>(w), "total", total[0], total[1], total[2], total[3]);
}

std::vector<Vector> logits_of(const Model& m, const std::vector<Sample>& samples, std::vector<int>& labels) {
    std::vector<Vector> out;
    for (const auto& s : samples) {
        out.push_back(m.forward(s.image).logits);
        labels.push_back(s.label);
    }
    return out;
}

std::optional<Split> split_arg(const std::string& s) {
    if (s == "all") return std::nullopt;
    auto sp = parse_split(s);
    if (!sp) throw Error("unknown split '" + s + "' (train, val, test or all)");
    return sp;
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
}

httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype-based classification of Mars surface images"};
    app.require_subcommand(1);

    // dataset ---------------------------------------------------------------
    auto* dataset = app.add_subcommand("dataset", "Inspect, split and import manifests");
    dataset->require_subcommand(1);
    std::string manifest, out_path;

    auto* validate = dataset->add_subcommand("validate", "Parse a manifest and check every referenced file");
    validate->add_option("--manifest", manifest)->required();

    auto* stats = dataset->add_subcommand("stats", "Per-class counts per split");
    stats->add_option("--manifest", manifest)->required();

    double val_fraction = 0.1, test_fraction = 0.1;
    auto* split = dataset->add_subcommand("split", "Assign splits chronologically by sol");
    split->add_option("--manifest", manifest)->required();
    split->add_option("--out", out_path, "output manifest")->required();
    split->add_option("--val", val_fraction, "validation fraction")->capture_default_str();
    split->add_option("--test", test_fraction, "test fraction")->capture_default_str();

    std::string class_map, train_list, val_list, test_list, image_dir;
    auto* import_cmd = dataset->add_subcommand("import-msl", "Build a manifest from the published MSL file lists");
    import_cmd->add_option("--class-map", class_map)->required();
    import_cmd->add_option("--train", train_list)->required();
    import_cmd->add_option("--val", val_list)->required();
    import_cmd->add_option("--test", test_list)->required();
    import_cmd->add_option("--images", image_dir)->required();
    import_cmd->add_option("--out", out_path)->required();

    // toy-data -----------------------------------------------------------------
    int toy_n = 50, toy_size = 56;
    uint64_t seed = 7;
    auto* toy_cmd = app.add_subcommand("toy-data", "Write the synthetic coloured-shapes dataset");
    toy_cmd->add_option("--out", out_path)->required();
    toy_cmd->add_option("--images", toy_n)->capture_default_str();
    toy_cmd->add_option("--size", toy_size)->capture_default_str();
    toy_cmd->add_option("--seed", seed)->capture_default_str();

    // train --------------------------------------------------------------------
    std::string backbone, config_path, pretrained, checkpoint;
    auto* train_cmd = app.add_subcommand("train", "Train a prototype network");
    train_cmd->add_option("--manifest", manifest)->required();
    train_cmd->add_option("--backbone", backbone)->check(CLI::IsMember(nn::backbone_names()));
    train_cmd->add_option("--config", config_path, "JSON overrides of schedule, loss weights and model shape");
    train_cmd->add_option("--pretrained", pretrained, "backbone weights from export_torchvision_weights.py");
    train_cmd->add_option("--out", out_path)->required();

    // calibrate ----------------------------------------------------------------
    std::string kind_name = "temperature";
    auto* cal_cmd = app.add_subcommand("calibrate", "Fit a calibrator on the validation split");
    cal_cmd->add_option("--checkpoint", checkpoint)->required();
    cal_cmd->add_option("--manifest", manifest)->required();
    cal_cmd->add_option("--kind", kind_name)->check(CLI::IsMember({"none", "temperature", "vector"}))->capture_default_str();
    cal_cmd->add_option("--out", out_path, "calibrated checkpoint")->required();

    // predict ------------------------------------------------------------------
    std::string split_name = "test", traces_path, model_name;
    double threshold = kConfidenceThreshold;
    int trace_k = 5;
    auto* predict_cmd = app.add_subcommand("predict", "Write prediction and evidence-trace records");
    predict_cmd->add_option("--checkpoint", checkpoint)->required();
    predict_cmd->add_option("--manifest", manifest)->required();
    predict_cmd->add_option("--split", split_name, "train, val, test or all")->capture_default_str();
    predict_cmd->add_option("--out", out_path, "predictions (line-delimited JSON)")->required();
    predict_cmd->add_option("--traces", traces_path, "evidence traces (line-delimited JSON)");
    predict_cmd->add_option("--trace-k", trace_k)->capture_default_str();
    predict_cmd->add_option("--model-name", model_name, "row label used by report");
    predict_cmd->add_option("--threshold", threshold)->capture_default_str();

    // explain ------------------------------------------------------------------
    std::string image_id, json_out;
    int k = 4;
    auto* explain_cmd = app.add_subcommand("explain", "Top-k prototype evidence for one image");
    explain_cmd->add_option("--checkpoint", checkpoint)->required();
    explain_cmd->add_option("--manifest", manifest)->required();
    explain_cmd->add_option("--image-id", image_id)->required();
    explain_cmd->add_option("-k", k)->capture_default_str();
    explain_cmd->add_option("--out", out_path, "panel PNG");
    explain_cmd->add_option("--json", json_out, "explanation JSON (default: stdout)");

    // report -------------------------------------------------------------------
    std::vector<std::string> prediction_files, trace_files;
    std::string plots_dir;
    int decimals = 1;
    bool inclass_correct_only = false;
    auto* report_cmd = app.add_subcommand("report", "Accuracy table and evidence curves from stored records");
    report_cmd->add_option("--predictions", prediction_files)->required();
    report_cmd->add_option("--traces", trace_files);
    report_cmd->add_option("--threshold", threshold)->capture_default_str();
    report_cmd->add_option("--plots", plots_dir, "directory for SVG/CSV curves");
    report_cmd->add_option("--manifest", manifest, "adds the most-common-class baseline row and class names");
    report_cmd->add_option("--decimals", decimals)->capture_default_str();
    report_cmd->add_flag("--inclass-correct-only", inclass_correct_only, "restrict the in-class curve to correct images");
    report_cmd->add_option("--out", out_path, "write the table here as well");

    // serve --------------------------------------------------------------------
    std::string host = "127.0.0.1", db_path = "feedback.sqlite", static_dir;
    int port = 8080;
    auto* serve_cmd = app.add_subcommand("serve", "HTTP+JSON classification, explanation and feedback service");
    serve_cmd->add_option("--checkpoint", checkpoint)->required();
    serve_cmd->add_option("--manifest", manifest)->required();
    serve_cmd->add_option("--port", port)->capture_default_str();
    serve_cmd->add_option("--host", host)->capture_default_str();
    serve_cmd->add_option("--db", db_path)->capture_default_str();
    serve_cmd->add_option("--static", static_dir, "directory of UI assets served at /");

    // review -------------------------------------------------------------------
    std::string model_version;
    auto* review = app.add_subcommand("review", "Feedback review artifacts");
    review->require_subcommand(1);
    auto* review_export = review->add_subcommand("export", "Grouped tables, label patch and prototype complaints");
    review_export->add_option("--db", db_path)->required();
    review_export->add_option("--model-version", model_version)->required();
    review_export->add_option("--out", out_path)->required();
    review_export->add_option("--manifest", manifest, "for class names");

    CLI11_PARSE(app, argc, argv);

    try {
        if (validate->parsed()) {
            auto idx = load_manifest(manifest);
            int missing = 0;
            for (const auto& e : idx.entries)
                if (!fs::exists(e.path)) {
                    std::cerr << "missing file for " << e.image_id << ": " << e.path << "\n";
                    ++missing;
                }
            std::cout << idx.entries.size() << " images, " << idx.num_classes() << " classes"
                      << (idx.fully_split() ? ", fully split" : ", not fully split") << "\n";
            return missing ? 1 : 0;
        }
        if (stats->parsed()) {
            print_counts(load_manifest(manifest));
            return 0;
        }
        if (split->parsed()) {
            auto idx = sol_split(load_manifest(manifest), val_fraction, test_fraction);
            save_manifest(idx, out_path);
            print_counts(idx);
            return 0;
        }
        if (import_cmd->parsed()) {
            auto idx = import_msl(class_map, {{Split::TRAIN, train_list}, {Split::VAL, val_list}, {Split::TEST, test_list}},
                                  image_dir);
            save_manifest(idx, out_path);
            print_counts(idx);
            return 0;
        }
        if (toy_cmd->parsed()) {
            std::cout << toy::write_dataset(out_path, toy_n, toy_size, seed).string() << "\n";
            return 0;
        }
        if (train_cmd->parsed()) {
            auto idx = load_manifest(manifest);
            TrainConfig tc;
            LossWeights w;
            ModelConfig mc;
            if (!config_path.empty()) {
                std::ifstream in(config_path);
                if (!in) throw Error("cannot read config " + config_path);
                apply_config(nlohmann::json::parse(in), tc, w, mc);
            }
            if (!backbone.empty()) mc.backbone = backbone;
            std::optional<TensorArchive> weights;
            if (!pretrained.empty()) weights = TensorArchive::load(pretrained);
            Model model = make_model(mc, idx.class_names, weights ? &*weights : nullptr);
            TrainOptions opt;
            opt.out_dir = out_path;
            opt.on_epoch = [](const nlohmann::json& rec) { std::cout << rec.dump() << std::endl; };
            fs::create_directories(out_path);
            std::ofstream(fs::path(out_path) / "config.json")
                << nlohmann::json{{"train", to_json(tc)}, {"loss", to_json(w)}, {"model", to_json(mc)}}.dump(2) << "\n";
            auto state = train(std::move(model), idx, tc, w, opt);
            std::cerr << "best validation accuracy " << state.best_val_acc << " at epoch " << state.best_epoch << " -> "
                      << state.best_checkpoint.string() << "\n";
            return 0;
        }
        if (cal_cmd->parsed()) {
            auto ck = load_checkpoint(checkpoint);
            auto idx = load_manifest(manifest);
            auto val = load_samples(idx, Split::VAL, ck.model.input_size(), false);
            std::vector<int> labels;
            auto logits = logits_of(ck.model, val, labels);
            auto before = mean_nll(Calibrator::identity(), logits, labels);
            ck.model.calibrator = fit_calibrator(parse_calibration_kind(kind_name), logits, labels);
            auto after = mean_nll(ck.model.calibrator, logits, labels);
            auto meta = ck.meta.value("extra", nlohmann::json::object());
            meta["calibrated_from"] = ck.model_version;
            auto version = save_checkpoint(ck.model, out_path, meta);
            std::cout << nlohmann::json{{"kind", kind_name},
                                        {"calibrator", to_json(ck.model.calibrator)},
                                        {"val_nll_before", before},
                                        {"val_nll_after", after},
                                        {"model_version", version}}
                             .dump(2)
                      << "\n";
            return 0;
        }
        if (predict_cmd->parsed()) {
            auto ck = load_checkpoint(checkpoint);
            auto idx = load_manifest(manifest);
            std::vector<PredictionRecord> records;
            std::vector<EvidenceTrace> traces;
            auto wanted = split_arg(split_name);
            for (Split s : kAllSplits) {
                if (wanted && s != *wanted) continue;
                auto samples = load_samples(idx, s, ck.model.input_size(), false);
                evaluate(ck.model, samples, to_string(s), records, traces_path.empty() ? nullptr : &traces, trace_k,
                         threshold);
            }
            if (!model_name.empty())
                for (auto& r : records) r.model = model_name;
            write_jsonl(out_path, records);
            if (!traces_path.empty()) write_jsonl(traces_path, traces);
            std::cout << records.size() << " predictions written to " << out_path << "\n";
            return 0;
        }
        if (explain_cmd->parsed()) {
            auto ck = load_checkpoint(checkpoint);
            auto idx = load_manifest(manifest);
            const int size = ck.model.input_size();
            Image img = load_source_image(idx, image_id, size);
            ExplainOptions opt;
            opt.k = k;
            auto ex = explain(ck.model, img, image_id, opt);
            if (!ex.warning.empty()) std::cerr << "warning: " << ex.warning << "\n";
            auto text = to_json(ex, ck.model_version).dump(2) + "\n";
            if (json_out.empty()) std::cout << text;
            else write_text(json_out, text);
            if (!out_path.empty()) {
                auto panel = render_panel(ex, img, ck.model,
                                          [&](const std::string& id) { return load_source_image(idx, id, size); });
                save_image(panel, out_path);
            }
            return 0;
        }
        if (report_cmd->parsed()) {
            std::vector<PredictionRecord> records;
            for (const auto& f : prediction_files) {
                auto part = read_predictions(f);
                for (auto& r : part)
                    if (r.model.empty()) r.model = fs::path(f).stem().string();
                records.insert(records.end(), part.begin(), part.end());
            }
            std::vector<TableRow> rows;
            std::vector<std::string> class_names;
            if (!manifest.empty()) {
                auto idx = load_manifest(manifest);
                class_names = idx.class_names;
                TableRow base;
                base.name = "Most common (baseline)";
                for (int s = 0; s < 3; ++s)
                    if (!idx.in_split(kAllSplits[s]).empty()) base.plain[s] = most_common_baseline(idx, kAllSplits[s]);
                rows.push_back(base);
            }
            for (auto& r : table_rows(records, threshold)) rows.push_back(std::move(r));
            auto table = render_table(rows, threshold, decimals);
            std::cout << table;
            if (!out_path.empty()) write_text(out_path, table);

            if (!trace_files.empty()) {
                std::vector<EvidenceTrace> traces;
                for (const auto& f : trace_files) {
                    auto part = read_traces(f);
                    traces.insert(traces.end(), part.begin(), part.end());
                }
                int C = static_cast<int>(class_names.size());
                for (const auto& t : traces) C = std::max(C, t.true_label + 1);
                for (int c = static_cast<int>(class_names.size()); c < C; ++c) class_names.push_back("class " + std::to_string(c));
                auto div = diversity_curve(traces, C);
                auto inc = inclass_curve(traces, C, 5, inclass_correct_only);
                for (const auto& n : div.notices) std::cerr << "diversity: " << n << "\n";
                for (const auto& n : inc.notices) std::cerr << "in-class: " << n << "\n";
                auto dump = [&](const char* title, const CurveSet& set) {
                    std::cout << "\n" << title << "\n";
                    for (const auto& c : set.curves) {
                        std::cout << "  " << class_names[c.class_id] << ":";
                        for (double v : c.values) std::printf(" %.3f", v);
                        std::cout << "\n";
                    }
                };
                dump("Unique source images among top-k prototypes (correct only), k=1..5", div);
                dump(inclass_correct_only ? "In-class prototypes among top-k (correct only), k=1..5"
                                          : "In-class prototypes among top-k, k=1..5",
                     inc);
                if (!plots_dir.empty()) {
                    fs::path dir(plots_dir);
                    write_text(dir / "diversity.svg", curves_svg(div, class_names, "Prototype diversity", "unique source images"));
                    write_text(dir / "diversity.csv", curves_csv(div, class_names));
                    write_text(dir / "inclass.svg", curves_svg(inc, class_names, "In-class prototypes", "in-class prototypes"));
                    write_text(dir / "inclass.csv", curves_csv(inc, class_names));
                }
            }
            return 0;
        }
        if (serve_cmd->parsed()) {
            auto ck = load_checkpoint(checkpoint);
            auto idx = load_manifest(manifest);
            auto store = std::make_shared<FeedbackStore>(db_path);
            Service svc(idx, store, Engine{std::make_shared<const Model>(std::move(ck.model)), ck.model_version});
            auto server = make_http_server(svc, static_dir);
            g_server = server.get();
            std::signal(SIGINT, [](int) {
                if (g_server) g_server->stop();
            });
            std::signal(SIGTERM, [](int) {
                if (g_server) g_server->stop();
            });
            std::cerr << "serving model " << ck.model_version << " on http://" << host << ":" << port << "\n";
            if (!server->listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
            return 0;
        }
        if (review_export->parsed()) {
            FeedbackStore store(db_path);
            std::vector<std::string> names;
            if (!manifest.empty()) names = load_manifest(manifest).class_names;
            auto ex = Service::review_export(store.list(model_version), model_version, names);
            fs::path dir(out_path);
            write_text(dir / "review.json", ex.dump(2) + "\n");
            std::string patch = "image_id\tsuggested_label\n", unresolved = "image_id\tvotes\n",
                        complaints = "prototype_id\tcount\n", groups = "class\tkind\tprototype_id\tcount\tsample_images\n";
            for (const auto& p : ex["label_patch"])
                patch += p["image_id"].get<std::string>() + "\t" + std::to_string(p["suggested_label"].get<int>()) + "\n";
            for (const auto& u : ex["unresolved"]) unresolved += u["image_id"].get<std::string>() + "\t" + u["votes"].dump() + "\n";
            for (const auto& c : ex["prototype_complaints"])
                complaints += std::to_string(c["prototype_id"].get<int>()) + "\t" + std::to_string(c["count"].get<int>()) + "\n";
            for (const auto& g : ex["groups"]) {
                std::string samples;
                for (const auto& s : g["sample_images"]) samples += (samples.empty() ? "" : ",") + s.get<std::string>();
                groups += std::to_string(g["class"].get<int>()) + "\t" + g["kind"].get<std::string>() + "\t" +
                          (g["prototype_id"].is_null() ? "-" : std::to_string(g["prototype_id"].get<int>())) + "\t" +
                          std::to_string(g["count"].get<int>()) + "\t" + samples + "\n";
            }
            write_text(dir / "label_patch.tsv", patch);
            write_text(dir / "unresolved.tsv", unresolved);
            write_text(dir / "prototype_complaints.tsv", complaints);
            write_text(dir / "groups.tsv", groups);
            if (ex["empty"].get<bool>()) std::cout << "no feedback for model version " << model_version << "\n";
            else std::cout << ex["total"] << " feedback records exported to " << dir.string() << "\n";
            return 0;
        }
    } catch (const ManifestError& e) {
        std::cerr << "manifest error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
