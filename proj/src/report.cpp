#include "bdae/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bdae/dataset.hpp"
#include "bdae/errors.hpp"

namespace bdae {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string two(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string class_label(int c, int n_classes) {
    if (n_classes == kNumClasses) return age_class_name(c);
    return "class" + std::to_string(c);
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&')
            out += "&amp;";
        else if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else
            out += c;
    }
    return out;
}

ordered_json report_json(const EvalReport& r) {
    ordered_json j;
    j["label"] = r.label;
    j["n"] = r.n;
    if (r.cm.n_classes > 0) {
        auto rows = ordered_json::array();
        for (int t = 0; t < r.cm.n_classes; ++t) {
            auto row = ordered_json::array();
            for (int p = 0; p < r.cm.n_classes; ++p) row.push_back(r.cm.at(t, p));
            rows.push_back(std::move(row));
        }
        j["confusion_matrix"] = std::move(rows);
    } else {
        j["confusion_matrix"] = nullptr;
    }
    j["accuracy"] = r.cls.accuracy;
    if (!r.cls.tpr.empty()) {
        j["per_class"] = {{"tpr", r.cls.tpr},
                          {"ppv", r.cls.ppv},
                          {"tnr", r.cls.tnr},
                          {"f1", r.cls.f1}};
    } else {
        j["per_class"] = nullptr;
    }
    j["micro"] = {{"tpr", r.cls.micro_tpr},
                  {"ppv", r.cls.micro_ppv},
                  {"tnr", r.cls.micro_tnr},
                  {"f1", r.cls.micro_f1}};
    j["macro"] = {{"tpr", r.cls.macro_tpr},
                  {"ppv", r.cls.macro_ppv},
                  {"tnr", r.cls.macro_tnr},
                  {"f1", r.cls.macro_f1}};
    j["degenerate_rates"] = r.cls.any_degenerate;
    j["mcc"] = {{"value", r.mcc.value}, {"degenerate", r.mcc.degenerate}};
    ordered_json auroc;
    auroc["micro"] = r.auroc_micro;
    if (r.auroc_macro.degenerate)
        auroc["macro"] = nullptr;
    else
        auroc["macro"] = r.auroc_macro.value;
    j["auroc"] = std::move(auroc);
    if (r.kappa_present)
        j["kappa"] = {{"value", r.kappa.kappa},
                      {"low", r.kappa.low},
                      {"high", r.kappa.high},
                      {"degenerate", r.kappa.degenerate}};
    else
        j["kappa"] = nullptr;
    return j;
}

std::vector<double> dvec(const ordered_json& j) { return j.get<std::vector<double>>(); }

EvalReport report_from_json(const ordered_json& j) {
    EvalReport r;
    r.label = j.at("label").get<std::string>();
    r.n = j.at("n").get<int64_t>();
    if (j.contains("confusion_matrix") && !j.at("confusion_matrix").is_null()) {
        const auto& rows = j.at("confusion_matrix");
        r.cm.n_classes = static_cast<int>(rows.size());
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != r.cm.n_classes)
                throw ValueError("metrics file: confusion matrix is not square");
            for (const auto& v : row) r.cm.counts.push_back(v.get<int64_t>());
        }
    }
    r.cls.accuracy = j.at("accuracy").get<double>();
    if (j.contains("per_class") && !j.at("per_class").is_null()) {
        const auto& pc = j.at("per_class");
        r.cls.tpr = dvec(pc.at("tpr"));
        r.cls.ppv = dvec(pc.at("ppv"));
        r.cls.tnr = dvec(pc.at("tnr"));
        r.cls.f1 = dvec(pc.at("f1"));
    }
    const auto& mi = j.at("micro");
    r.cls.micro_tpr = mi.at("tpr").get<double>();
    r.cls.micro_ppv = mi.at("ppv").get<double>();
    r.cls.micro_tnr = mi.at("tnr").get<double>();
    r.cls.micro_f1 = mi.at("f1").get<double>();
    const auto& ma = j.at("macro");
    r.cls.macro_tpr = ma.at("tpr").get<double>();
    r.cls.macro_ppv = ma.at("ppv").get<double>();
    r.cls.macro_tnr = ma.at("tnr").get<double>();
    r.cls.macro_f1 = ma.at("f1").get<double>();
    r.cls.any_degenerate = j.value("degenerate_rates", false);
    r.mcc.value = j.at("mcc").at("value").get<double>();
    r.mcc.degenerate = j.at("mcc").at("degenerate").get<bool>();
    r.auroc_micro = j.at("auroc").at("micro").get<double>();
    if (j.at("auroc").contains("macro") && !j.at("auroc").at("macro").is_null()) {
        r.auroc_macro.value = j.at("auroc").at("macro").get<double>();
    } else {
        r.auroc_macro.degenerate = true;
    }
    if (j.contains("kappa") && !j.at("kappa").is_null()) {
        r.kappa.kappa = j.at("kappa").at("value").get<double>();
        r.kappa.low = j.at("kappa").at("low").get<double>();
        r.kappa.high = j.at("kappa").at("high").get<double>();
        r.kappa.degenerate = j.at("kappa").at("degenerate").get<bool>();
    } else {
        r.kappa_present = false;
    }
    return r;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << content;
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

// Linear blend through a white-to-dark-blue ramp for heatmap cells.
std::string heat_color(double v) {
    v = std::clamp(v, 0.0, 1.0);
    int r = static_cast<int>(std::lround(247 + v * (8 - 247)));
    int g = static_cast<int>(std::lround(251 + v * (48 - 251)));
    int b = static_cast<int>(std::lround(255 + v * (107 - 255)));
    char buf[32];
    std::snprintf(buf, sizeof buf, "rgb(%d,%d,%d)", r, g, b);
    return buf;
}

std::string confusion_csv(const ConfusionMatrix& cm) {
    std::ostringstream out;
    out << "true\\pred";
    for (int p = 0; p < cm.n_classes; ++p) out << "," << class_label(p, cm.n_classes);
    out << "\n";
    auto norm = cm.normalized();
    for (int t = 0; t < cm.n_classes; ++t) {
        out << class_label(t, cm.n_classes);
        for (int p = 0; p < cm.n_classes; ++p) {
            char buf[32];
            std::snprintf(buf, sizeof buf, ",%.4f",
                          norm[static_cast<size_t>(t * cm.n_classes + p)]);
            out << buf;
        }
        out << "\n";
    }
    return out.str();
}

std::string confusion_svg(const ConfusionMatrix& cm, const std::string& title) {
    const int n = cm.n_classes;
    const int cell = 80, left = 110, top = 70, bottom = 40, right = 30;
    const int width = left + n * cell + right, height = top + n * cell + bottom;
    auto norm = cm.normalized();

    std::ostringstream s;
    s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
      << "  <style>text { font-family: sans-serif; }</style>\n"
      << "  <text x=\"" << left + n * cell / 2 << "\" y=\"24\" font-size=\"16\" "
      << "text-anchor=\"middle\">" << xml_escape(title) << "</text>\n";
    for (int t = 0; t < n; ++t) {
        for (int p = 0; p < n; ++p) {
            double v = norm[static_cast<size_t>(t * n + p)];
            int x = left + p * cell, y = top + t * cell;
            s << "  <rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell
              << "\" height=\"" << cell << "\" fill=\"" << heat_color(v)
              << "\" stroke=\"white\"/>\n";
            s << "  <text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 5
              << "\" font-size=\"14\" text-anchor=\"middle\" fill=\""
              << (v > 0.5 ? "white" : "black") << "\">" << two(v) << "</text>\n";
        }
    }
    for (int c = 0; c < n; ++c) {
        s << "  <text x=\"" << left + c * cell + cell / 2 << "\" y=\"" << top + n * cell + 22
          << "\" font-size=\"12\" text-anchor=\"middle\">" << class_label(c, n) << "</text>\n";
        s << "  <text x=\"" << left - 8 << "\" y=\"" << top + c * cell + cell / 2 + 4
          << "\" font-size=\"12\" text-anchor=\"end\">" << class_label(c, n) << "</text>\n";
    }
    s << "  <text x=\"" << left + n * cell / 2 << "\" y=\"" << height - 8
      << "\" font-size=\"13\" text-anchor=\"middle\">predicted</text>\n";
    s << "  <text x=\"16\" y=\"" << top + n * cell / 2
      << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << top + n * cell / 2 << ")\">true</text>\n";
    s << "</svg>\n";
    return s.str();
}

std::string curves_csv(const CurveTable& c) {
    std::ostringstream out;
    out << "epoch,train_loss,train_acc,val_loss,val_acc\n";
    for (int e = 0; e < c.epochs; ++e) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f\n", e + 1,
                      c.train_loss[static_cast<size_t>(e)], c.train_acc[static_cast<size_t>(e)],
                      c.val_loss[static_cast<size_t>(e)], c.val_acc[static_cast<size_t>(e)]);
        out << buf;
    }
    return out.str();
}

// One panel: two polylines (train solid blue, validation solid orange) in an
// axis box with a fixed [lo, hi] y range.
void curve_panel(std::ostringstream& s, int ox, int oy, int w, int h, const std::string& title,
                 const std::vector<double>& train, const std::vector<double>& val, double lo,
                 double hi) {
    const int e = static_cast<int>(train.size());
    auto px = [&](int i) { return ox + (e < 2 ? 0.0 : static_cast<double>(i) * w / (e - 1)); };
    auto py = [&](double v) {
        double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
        return oy + h - t * h;
    };
    auto line = [&](const std::vector<double>& ys, const char* color) {
        s << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (int i = 0; i < e; ++i) {
            char buf[48];
            std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px(i), py(ys[static_cast<size_t>(i)]));
            s << buf;
        }
        s << "\"/>\n";
    };
    s << "  <rect x=\"" << ox << "\" y=\"" << oy << "\" width=\"" << w << "\" height=\"" << h
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    s << "  <text x=\"" << ox + w / 2 << "\" y=\"" << oy - 10
      << "\" font-size=\"14\" text-anchor=\"middle\">" << title << "</text>\n";
    for (int tick = 0; tick <= 4; ++tick) {
        double v = lo + (hi - lo) * tick / 4.0;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", v);
        s << "  <text x=\"" << ox - 6 << "\" y=\"" << py(v) + 4
          << "\" font-size=\"10\" text-anchor=\"end\">" << buf << "</text>\n";
    }
    s << "  <text x=\"" << ox << "\" y=\"" << oy + h + 16 << "\" font-size=\"10\" "
      << "text-anchor=\"middle\">1</text>\n";
    s << "  <text x=\"" << ox + w << "\" y=\"" << oy + h + 16 << "\" font-size=\"10\" "
      << "text-anchor=\"middle\">" << e << "</text>\n";
    s << "  <text x=\"" << ox + w / 2 << "\" y=\"" << oy + h + 30
      << "\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n";
    line(train, "#1f77b4");
    line(val, "#ff7f0e");
}

std::string curves_svg(const CurveTable& c) {
    const int pw = 340, ph = 230, gap = 90, left = 60, top = 50;
    const int width = left + pw + gap + pw + 40, height = top + ph + 60;
    double loss_hi = 0.0;
    for (double v : c.train_loss) loss_hi = std::max(loss_hi, v);
    for (double v : c.val_loss) loss_hi = std::max(loss_hi, v);
    if (loss_hi <= 0.0) loss_hi = 1.0;

    std::ostringstream s;
    s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
      << "  <style>text { font-family: sans-serif; }</style>\n";
    curve_panel(s, left, top, pw, ph, "accuracy", c.train_acc, c.val_acc, 0.0, 1.0);
    curve_panel(s, left + pw + gap, top, pw, ph, "loss", c.train_loss, c.val_loss, 0.0,
                loss_hi * 1.05);
    int lx = left + pw + gap / 2 - 30, ly = height - 18;
    s << "  <line x1=\"" << lx - 50 << "\" y1=\"" << ly - 4 << "\" x2=\"" << lx - 26
      << "\" y2=\"" << ly - 4 << "\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n"
      << "  <text x=\"" << lx - 20 << "\" y=\"" << ly << "\" font-size=\"12\">train</text>\n"
      << "  <line x1=\"" << lx + 30 << "\" y1=\"" << ly - 4 << "\" x2=\"" << lx + 54
      << "\" y2=\"" << ly - 4 << "\" stroke=\"#ff7f0e\" stroke-width=\"2\"/>\n"
      << "  <text x=\"" << lx + 60 << "\" y=\"" << ly << "\" font-size=\"12\">validation</text>\n";
    s << "</svg>\n";
    return s.str();
}

std::string csv_rows(const std::vector<EvalReport>& reports, const char* id_column) {
    std::ostringstream out;
    out << id_column << ",Acc,TPR,PPV,TNR,AUROC,F1,MCC,Kappa95CI\n";
    for (const auto& r : reports) {
        out << r.label << "," << two(r.cls.accuracy) << "," << two(r.cls.micro_tpr) << ","
            << two(r.cls.macro_ppv) << "," << two(r.cls.micro_tnr) << "," << two(r.auroc_micro)
            << "," << two(r.cls.macro_f1) << "," << two(r.mcc.value) << "," << kappa_ci_string(r)
            << "\n";
    }
    return out.str();
}

}  // namespace

CurveTable average_curves(const std::vector<TrainHistory>& folds) {
    CurveTable out;
    if (folds.empty()) return out;
    for (const auto& h : folds) {
        if (h.epochs() == 0) throw ValueError("average_curves: a fold history is empty");
        out.epochs = std::max(out.epochs, h.epochs());
    }
    auto padded_mean = [&](std::vector<double> TrainHistory::* member, int e) {
        double sum = 0.0;
        for (const auto& h : folds) {
            const auto& v = h.*member;
            sum += v[static_cast<size_t>(std::min<int>(e, static_cast<int>(v.size()) - 1))];
        }
        return sum / static_cast<double>(folds.size());
    };
    for (int e = 0; e < out.epochs; ++e) {
        out.train_loss.push_back(padded_mean(&TrainHistory::train_loss, e));
        out.train_acc.push_back(padded_mean(&TrainHistory::train_acc, e));
        out.val_loss.push_back(padded_mean(&TrainHistory::val_loss, e));
        out.val_acc.push_back(padded_mean(&TrainHistory::val_acc, e));
    }
    return out;
}

std::string metrics_json_string(const MetricsBundle& bundle) {
    if (bundle.reports.empty()) throw ValueError("metrics_json_string: no reports");
    ordered_json root;
    root["format"] = "bdae-metrics";
    root["version"] = 1;
    ordered_json ds;
    ds["n"] = bundle.reports.front().n;
    ds["class_counts"] = bundle.class_counts;
    root["dataset"] = std::move(ds);
    auto arr = ordered_json::array();
    for (const auto& r : bundle.reports) arr.push_back(report_json(r));
    root["reports"] = std::move(arr);
    return root.dump(2) + "\n";
}

MetricsBundle metrics_from_json_string(const std::string& text) {
    ordered_json root;
    try {
        root = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("metrics file: invalid JSON: ") + e.what());
    }
    try {
        if (root.at("format").get<std::string>() != "bdae-metrics")
            throw ValueError("metrics file: unrecognized format tag");
        if (root.at("version").get<int>() != 1)
            throw ValueError("metrics file: unsupported version");
        MetricsBundle b;
        b.class_counts = root.at("dataset").at("class_counts").get<std::vector<int64_t>>();
        for (const auto& j : root.at("reports")) b.reports.push_back(report_from_json(j));
        if (b.reports.empty()) throw ValueError("metrics file: no reports");
        return b;
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("metrics file: missing or mistyped field: ") + e.what());
    }
}

MetricsBundle load_metrics_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return metrics_from_json_string(buf.str());
    } catch (ValueError& e) {
        throw ValueError("'" + path + "': " + e.what());
    }
}

std::string kappa_ci_string(const EvalReport& rep) {
    if (!rep.kappa_present || rep.kappa.degenerate) return "-";
    char buf[48];
    std::snprintf(buf, sizeof buf, "(%.2f-%.2f)", rep.kappa.low, rep.kappa.high);
    return buf;
}

std::string metrics_csv(const std::vector<EvalReport>& reports) {
    return csv_rows(reports, "label");
}

std::string compare_table(const std::vector<MetricsBundle>& experiments) {
    if (experiments.empty()) throw ValueError("compare: no result files");
    std::vector<EvalReport> rows;
    for (const auto& b : experiments) {
        if (b.reports.empty()) throw ValueError("compare: result file has no reports");
        if (b.class_counts != experiments.front().class_counts)
            throw ValueError("compare: '" + b.reports.front().label +
                             "' was computed on a different dataset (class counts differ)");
        rows.push_back(b.reports.front());
    }
    return csv_rows(rows, "model");
}

void render_report(const MetricsBundle& bundle, const std::vector<TrainHistory>& histories,
                   const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir + "': " + ec.message());

    fs::path dir(out_dir);
    write_file(dir / "metrics.json", metrics_json_string(bundle));
    write_file(dir / "metrics.csv", metrics_csv(bundle.reports));
    const auto& head = bundle.reports.front();
    if (head.cm.n_classes > 0) {
        write_file(dir / "confusion_matrix.csv", confusion_csv(head.cm));
        write_file(dir / "confusion_matrix.svg", confusion_svg(head.cm, head.label));
    }
    if (!histories.empty()) {
        auto curves = average_curves(histories);
        write_file(dir / "curves.csv", curves_csv(curves));
        write_file(dir / "curves.svg", curves_svg(curves));
    }
}

}  // namespace bdae
