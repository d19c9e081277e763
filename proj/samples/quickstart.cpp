// Train a small prototype network on the synthetic shapes data, then explain
// one test image and write its evidence panel.
//
//   sample_quickstart [out_dir]

#include <filesystem>
#include <iostream>

#include "protomsl/protomsl.hpp"

using namespace protomsl;

int main(int argc, char** argv) {
    const std::filesystem::path out = argc > 1 ? argv[1] : "quickstart_out";
    auto index = load_manifest(toy::write_dataset(out / "data", 30, 56, 7));

    ModelConfig mc;
    mc.backbone = "tiny";
    mc.prototype_dim = 32;
    mc.prototypes_per_class = 4;
    TrainConfig tc;
    tc.lr_phase1 = 1e-3;
    tc.lr_phase2 = 1e-4;
    tc.epochs_phase1 = 10;
    tc.epochs_phase2 = 10;
    tc.batch_size = 10;
    TrainOptions opt;
    opt.out_dir = out / "run";
    auto state = train(make_model(mc, index.class_names), index, tc, LossWeights{}, opt);
    std::cout << "best validation accuracy " << state.best_val_acc << " (epoch " << state.best_epoch << ")\n";

    Model& model = *state.best_model;
    auto test = load_samples(index, Split::TEST, model.input_size(), false);
    std::vector<PredictionRecord> records;
    evaluate(model, test, "test", records);
    auto report = accuracy_report(records);
    std::cout << "test accuracy " << format_percent(report.acc) << ", abstained " << format_percent(report.abstention_rate)
              << "\n";

    const auto& first = test.front();
    ExplainOptions eo;
    eo.k = 3;
    auto ex = explain(model, first.image, first.image_id, eo);
    for (const auto& item : ex.items)
        std::cout << "  #" << item.rank << " prototype " << item.prototype_id << " (class "
                  << index.class_names[item.prototype_class] << ") score " << item.similarity_score << " from "
                  << item.source_image_id << (item.negative_evidence() ? "  [negative evidence]" : "") << "\n";
    auto panel = render_panel(ex, first.image, model, [&](const std::string& id) {
        return load_source_image(index, id, model.input_size());
    });
    save_image(panel, out / "panel.png");
    std::cout << "panel written to " << (out / "panel.png").string() << "\n";
}
