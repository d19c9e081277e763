#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomsl/dataset.hpp"
#include "protomsl/error.hpp"
#include "protomsl/protonet.hpp"
#include "protomsl/samples.hpp"

namespace protomsl {

inline constexpr double kConfidenceThreshold = 0.9;

struct PredictionRecord {
    std::string image_id;
    int true_label = 0;
    int predicted_label = 0;
    double confidence = 0;  // max calibrated probability
    std::vector<double> logits;
    bool abstained = false;
    std::string split;  // optional: "train", "val" or "test"
    std::string model;  // optional row label for reports

    bool correct() const { return predicted_label == true_label; }
};

struct TracePrototype {
    int prototype_id = 0;
    int prototype_class = 0;
    std::string source_image_id;
};

struct EvidenceTrace {
    std::string image_id;
    int true_label = 0;
    bool correct = false;
    std::vector<TracePrototype> top_prototypes;  // similarity descending
};

inline PredictionRecord make_record(const std::string& image_id, int true_label, const Vector& logits,
                                    const Vector& probabilities, double threshold = kConfidenceThreshold) {
    PredictionRecord r;
    r.image_id = image_id;
    r.true_label = true_label;
    Eigen::Index arg;
    r.confidence = probabilities.maxCoeff(&arg);
    r.predicted_label = static_cast<int>(arg);
    r.logits.assign(logits.data(), logits.data() + logits.size());
    r.abstained = r.confidence < threshold;
    return r;
}

/// Top-`k` prototypes of one image by similarity score; ties keep the lower prototype id.
inline EvidenceTrace make_trace(const std::string& image_id, int true_label, int predicted_label,
                                const HeadOutput& head, const PrototypeLayer& layer, int k) {
    EvidenceTrace t;
    t.image_id = image_id;
    t.true_label = true_label;
    t.correct = predicted_label == true_label;
    std::vector<int> order(layer.size());
    for (int j = 0; j < layer.size(); ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return head.similarity_scores(a) > head.similarity_scores(b);
    });
    for (int r = 0; r < std::min(k, layer.size()); ++r) {
        const int j = order[r];
        const auto& src = layer.sources[j];
        t.top_prototypes.push_back({j, layer.class_ids[j], src ? src->image_id : std::string()});
    }
    return t;
}

/// Predictions and evidence traces of `model` over `samples`.
inline void evaluate(const Model& model, const std::vector<Sample>& samples, const std::string& split,
                     std::vector<PredictionRecord>& records, std::vector<EvidenceTrace>* traces = nullptr,
                     int trace_k = 5, double threshold = kConfidenceThreshold) {
    for (const auto& s : samples) {
        HeadOutput head = model.forward(s.image);
        auto rec = make_record(s.image_id, s.label, head.logits, model.probabilities(head.logits), threshold);
        rec.split = split;
        if (traces) traces->push_back(make_trace(s.image_id, s.label, rec.predicted_label, head, model.prototypes, trace_k));
        records.push_back(std::move(rec));
    }
}

// Accuracy family --------------------------------------------------------------

struct AccuracyReport {
    size_t count = 0;
    size_t confident = 0;
    double acc = 0;                         // percent
    std::optional<double> acc_at_threshold; // percent; empty when every record abstained
    double abstention_rate = 0;             // percent
};

inline AccuracyReport accuracy_report(const std::vector<PredictionRecord>& records,
                                      double threshold = kConfidenceThreshold) {
    if (records.empty()) throw MetricsError("accuracy_report needs at least one record");
    AccuracyReport r;
    r.count = records.size();
    size_t correct = 0, confident_correct = 0;
    for (const auto& rec : records) {
        correct += rec.correct();
        if (rec.confidence >= threshold) {
            ++r.confident;
            confident_correct += rec.correct();
        }
    }
    const double n = static_cast<double>(r.count);
    r.acc = 100.0 * correct / n;
    r.abstention_rate = 100.0 * (r.count - r.confident) / n;
    if (r.confident > 0) r.acc_at_threshold = 100.0 * confident_correct / r.confident;
    return r;
}

/// Accuracy of always predicting the most frequent TRAIN class (lowest label on ties).
inline double most_common_baseline(const DatasetIndex& index, Split split) {
    auto train = index.in_split(Split::TRAIN);
    auto target = index.in_split(split);
    if (target.empty()) throw MetricsError("split '" + to_string(split) + "' is empty");
    if (train.empty()) throw MetricsError("no TRAIN images to take the majority class from");
    std::map<int, size_t> counts;
    for (const auto* e : train) ++counts[e->label];
    int majority = counts.begin()->first;
    for (const auto& [label, n] : counts)
        if (n > counts[majority]) majority = label;
    size_t hits = std::count_if(target.begin(), target.end(), [&](const ImageEntry* e) { return e->label == majority; });
    return 100.0 * hits / target.size();
}

// Evidence curves ---------------------------------------------------------------

struct ClassCurve {
    int class_id = 0;
    size_t traces = 0;
    std::vector<double> values;  // values[k-1] for k = 1..k_max
};

struct CurveSet {
    std::vector<ClassCurve> curves;
    std::vector<std::string> notices;

    const ClassCurve* find(int class_id) const {
        for (const auto& c : curves)
            if (c.class_id == class_id) return &c;
        return nullptr;
    }
};

namespace detail {

inline void check_trace_length(const EvidenceTrace& t, int k_max) {
    if (static_cast<int>(t.top_prototypes.size()) < k_max)
        throw MetricsError("trace for '" + t.image_id + "' has " + std::to_string(t.top_prototypes.size()) +
                           " prototypes, fewer than k_max=" + std::to_string(k_max));
}

template <class Count>
CurveSet class_curves(const std::vector<EvidenceTrace>& traces, int num_classes, int k_max, bool correct_only,
                      Count count) {
    if (k_max < 1) throw MetricsError("k_max must be at least 1");
    CurveSet out;
    for (int c = 0; c < num_classes; ++c) {
        ClassCurve curve{c, 0, std::vector<double>(k_max, 0.0)};
        for (const auto& t : traces) {
            if (t.true_label != c || (correct_only && !t.correct)) continue;
            check_trace_length(t, k_max);
            ++curve.traces;
            for (int k = 1; k <= k_max; ++k) curve.values[k - 1] += count(t, k);
        }
        if (curve.traces == 0) {
            out.notices.push_back("class " + std::to_string(c) + " has no " +
                                  (correct_only ? "correctly classified " : "") + "traces; omitted");
            continue;
        }
        for (auto& v : curve.values) v /= static_cast<double>(curve.traces);
        out.curves.push_back(std::move(curve));
    }
    return out;
}

}  // namespace detail

/// Mean number of distinct source images among the top-k prototypes, per
/// class, over correctly classified traces only.
inline CurveSet diversity_curve(const std::vector<EvidenceTrace>& traces, int num_classes, int k_max = 5) {
    return detail::class_curves(traces, num_classes, k_max, true, [](const EvidenceTrace& t, int k) {
        std::set<std::string> ids;
        for (int i = 0; i < k; ++i) ids.insert(t.top_prototypes[i].source_image_id);
        return static_cast<double>(ids.size());
    });
}

/// Mean number of top-k prototypes belonging to the trace's true class.
inline CurveSet inclass_curve(const std::vector<EvidenceTrace>& traces, int num_classes, int k_max = 5,
                              bool correct_only = false) {
    return detail::class_curves(traces, num_classes, k_max, correct_only, [](const EvidenceTrace& t, int k) {
        double n = 0;
        for (int i = 0; i < k; ++i) n += t.top_prototypes[i].prototype_class == t.true_label;
        return n;
    });
}

/// Class whose curve value at `k` is smallest (lowest class id on ties).
inline std::optional<int> least_curve_class(const CurveSet& set, int k) {
    std::optional<int> best;
    double best_v = 0;
    for (const auto& c : set.curves) {
        double v = c.values.at(k - 1);
        if (!best || v < best_v) {
            best = c.class_id;
            best_v = v;
        }
    }
    return best;
}

// Table rendering ----------------------------------------------------------------

/// "81.3%", with a trailing ".0" dropped ("12%").
inline std::string format_percent(double v, int decimals = 1) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(decimals);
    os << v;
    std::string s = os.str();
    if (decimals > 0) {
        auto dot = s.find('.');
        if (s.find_first_not_of('0', dot + 1) == std::string::npos) s.erase(dot);
    }
    return s + "%";
}

struct TableRow {
    std::string name;
    std::array<std::optional<AccuracyReport>, 3> splits;  // train, val, test
    std::array<std::optional<double>, 3> plain;           // rows with a single accuracy (baselines)
};

inline std::vector<std::string> table_cells(const TableRow& row, int decimals = 1) {
    std::vector<std::string> cells{row.name};
    for (int s = 0; s < 3; ++s) {
        if (row.splits[s]) {
            const auto& r = *row.splits[s];
            cells.push_back(format_percent(r.acc, decimals));
            cells.push_back(r.acc_at_threshold ? format_percent(*r.acc_at_threshold, decimals) : "undefined");
            cells.push_back(format_percent(r.abstention_rate, decimals));
        } else if (row.plain[s]) {
            cells.push_back(format_percent(*row.plain[s], decimals));
            cells.push_back("-");
            cells.push_back("-");
        } else {
            cells.insert(cells.end(), {"-", "-", "-"});
        }
    }
    return cells;
}

/// Aligned text table with the nine accuracy columns (three per split).
inline std::string render_table(const std::vector<TableRow>& rows, double threshold = kConfidenceThreshold,
                                int decimals = 1) {
    std::string at = "Acc (" + [&] {
        std::ostringstream os;
        os << threshold;
        return os.str();
    }() + ")";
    std::vector<std::vector<std::string>> grid;
    grid.push_back({"", "Train", "", "", "Val", "", "", "Test", "", ""});
    grid.push_back({"Model"});
    for (int s = 0; s < 3; ++s) grid.back().insert(grid.back().end(), {"Acc", at, "Abst Rate"});
    for (const auto& r : rows) grid.push_back(table_cells(r, decimals));
    std::vector<size_t> width(10, 0);
    for (const auto& line : grid)
        for (size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    std::ostringstream os;
    for (const auto& line : grid) {
        std::string text;
        for (size_t i = 0; i < line.size(); ++i) {
            std::string cell = line[i];
            cell.resize(width[i], ' ');
            text += (i == 0 ? "" : i % 3 == 1 ? " | " : "  ") + cell;
        }
        while (!text.empty() && text.back() == ' ') text.pop_back();
        os << text << "\n";
    }
    return os.str();
}

/// Groups records by model label and split into table rows, in first-seen model order.
inline std::vector<TableRow> table_rows(const std::vector<PredictionRecord>& records,
                                        double threshold = kConfidenceThreshold) {
    std::vector<std::string> order;
    std::map<std::string, std::array<std::vector<PredictionRecord>, 3>> grouped;
    for (const auto& r : records) {
        auto split = parse_split(r.split);
        if (!split) throw MetricsError("record '" + r.image_id + "' has unknown split '" + r.split + "'");
        if (!grouped.count(r.model)) order.push_back(r.model);
        grouped[r.model][static_cast<int>(*split)].push_back(r);
    }
    std::vector<TableRow> rows;
    for (const auto& name : order) {
        TableRow row;
        row.name = name.empty() ? "model" : name;
        for (int s = 0; s < 3; ++s)
            if (!grouped[name][s].empty()) row.splits[s] = accuracy_report(grouped[name][s], threshold);
        rows.push_back(std::move(row));
    }
    return rows;
}

// Line-delimited record files ------------------------------------------------------

inline nlohmann::json to_json(const PredictionRecord& r) {
    nlohmann::json j{{"image_id", r.image_id},     {"true_label", r.true_label}, {"predicted_label", r.predicted_label},
                     {"confidence", r.confidence}, {"logits", r.logits},         {"abstained", r.abstained}};
    if (!r.split.empty()) j["split"] = r.split;
    if (!r.model.empty()) j["model"] = r.model;
    return j;
}

inline PredictionRecord prediction_from_json(const nlohmann::json& j) {
    PredictionRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.true_label = j.at("true_label").get<int>();
    r.predicted_label = j.at("predicted_label").get<int>();
    r.confidence = j.at("confidence").get<double>();
    r.logits = j.value("logits", std::vector<double>{});
    r.abstained = j.value("abstained", false);
    r.split = j.value("split", "");
    r.model = j.value("model", "");
    return r;
}

inline nlohmann::json to_json(const EvidenceTrace& t) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& p : t.top_prototypes)
        items.push_back({{"prototype_id", p.prototype_id},
                         {"prototype_class", p.prototype_class},
                         {"source_image_id", p.source_image_id}});
    return {{"image_id", t.image_id}, {"true_label", t.true_label}, {"correct", t.correct}, {"top_prototypes", items}};
}

inline EvidenceTrace trace_from_json(const nlohmann::json& j) {
    EvidenceTrace t;
    t.image_id = j.at("image_id").get<std::string>();
    t.true_label = j.at("true_label").get<int>();
    t.correct = j.at("correct").get<bool>();
    for (const auto& p : j.at("top_prototypes"))
        t.top_prototypes.push_back({p.at("prototype_id").get<int>(), p.at("prototype_class").get<int>(),
                                    p.at("source_image_id").get<std::string>()});
    return t;
}

template <class T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& items) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& it : items) out << to_json(it).dump() << "\n";
}

namespace detail {

template <class T, class Parse>
std::vector<T> read_jsonl(const std::filesystem::path& path, Parse parse) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    std::vector<T> out;
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(parse(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw MetricsError(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace detail

inline std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
    return detail::read_jsonl<PredictionRecord>(path, prediction_from_json);
}

inline std::vector<EvidenceTrace> read_traces(const std::filesystem::path& path) {
    return detail::read_jsonl<EvidenceTrace>(path, trace_from_json);
}

// Plots ---------------------------------------------------------------------------

inline std::string curves_csv(const CurveSet& set, const std::vector<std::string>& class_names) {
    std::ostringstream os;
    os << "class,k,value\n";
    for (const auto& c : set.curves)
        for (size_t k = 0; k < c.values.size(); ++k)
            os << class_names.at(c.class_id) << "," << k + 1 << "," << c.values[k] << "\n";
    return os.str();
}

/// Value-versus-k line chart, one polyline per class.
inline std::string curves_svg(const CurveSet& set, const std::vector<std::string>& class_names,
                              const std::string& title, const std::string& y_label) {
    const double W = 520, H = 360, left = 60, right = 150, top = 40, bottom = 50;
    size_t k_max = 1;
    double y_max = 1;
    for (const auto& c : set.curves) {
        k_max = std::max(k_max, c.values.size());
        for (double v : c.values) y_max = std::max(y_max, v);
    }
    y_max = std::ceil(y_max);
    auto px = [&](double k) { return left + (k - 1) / std::max<double>(1, k_max - 1) * (W - left - right); };
    auto py = [&](double v) { return H - bottom - v / y_max * (H - top - bottom); };
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n"
       << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << W - right << "\" y2=\"" << py(0)
       << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << left << "\" y2=\"" << py(y_max)
       << "\" stroke=\"black\"/>\n";
    for (size_t k = 1; k <= k_max; ++k)
        os << "<text x=\"" << px(k) << "\" y=\"" << py(0) + 18 << "\" text-anchor=\"middle\" font-size=\"12\">" << k
           << "</text>\n";
    for (int v = 0; v <= static_cast<int>(y_max); ++v)
        os << "<text x=\"" << left - 8 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-size=\"12\">" << v
           << "</text>\n";
    os << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"13\">k</text>\n"
       << "<text x=\"16\" y=\"" << H / 2 << "\" transform=\"rotate(-90 16 " << H / 2
       << ")\" text-anchor=\"middle\" font-size=\"13\">" << y_label << "</text>\n";
    for (size_t i = 0; i < set.curves.size(); ++i) {
        const auto& c = set.curves[i];
        const char* colour = palette[i % 10];
        os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (size_t k = 0; k < c.values.size(); ++k) os << px(k + 1.0) << "," << py(c.values[k]) << " ";
        os << "\"/>\n";
        const double ly = top + 16 * i;
        os << "<line x1=\"" << W - right + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 30 << "\" y2=\"" << ly
           << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n"
           << "<text x=\"" << W - right + 35 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">"
           << class_names.at(c.class_id) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace protomsl
