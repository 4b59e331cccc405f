#pragma once

#include <string>
#include <vector>

#include "bdae/metrics.hpp"

namespace bdae {

// Per-epoch record of one fold's training run. Wall time is for console
// output only and never reaches the serialized artifacts, which must be
// byte-identical across reruns.
struct TrainHistory {
    std::vector<double> train_loss, train_acc;
    std::vector<double> val_loss, val_acc;
    int best_epoch = -1;  // index of the best validation loss
    double wall_seconds = 0.0;

    int epochs() const { return static_cast<int>(val_loss.size()); }
};

// Fold histories averaged epoch-wise. Folds that stopped early are padded
// with their final value so every epoch averages over all folds.
struct CurveTable {
    int epochs = 0;
    std::vector<double> train_loss, train_acc, val_loss, val_acc;
};

CurveTable average_curves(const std::vector<TrainHistory>& folds);

// One experiment's scored reports plus the dataset identity used to decide
// whether two result files are comparable. reports[0] is the headline
// (pooled) entry; per-fold entries follow.
struct MetricsBundle {
    std::vector<int64_t> class_counts;  // true-label marginals of the dataset
    std::vector<EvalReport> reports;
};

// metrics.json serialization. Versioned, insertion-ordered keys, and no
// volatile fields, so identical results produce identical bytes.
std::string metrics_json_string(const MetricsBundle& bundle);
MetricsBundle metrics_from_json_string(const std::string& text);
MetricsBundle load_metrics_json(const std::string& path);

// "(0.79-0.92)"; "-" when the interval is unavailable.
std::string kappa_ci_string(const EvalReport& rep);

// One row per report, columns Acc, TPR, PPV, TNR, AUROC, F1, MCC, Kappa CI
// at 2 decimals. Overall rows use micro TPR/TNR and macro PPV/F1; both
// flavours are preserved in the JSON.
std::string metrics_csv(const std::vector<EvalReport>& reports);

// Side-by-side table of each bundle's headline report, same column layout.
// Bundles must describe the same dataset (equal class marginals).
std::string compare_table(const std::vector<MetricsBundle>& experiments);

// Writes metrics.json, metrics.csv, confusion_matrix.csv and .svg (from the
// headline report), and — when histories are present — curves.csv and .svg.
void render_report(const MetricsBundle& bundle, const std::vector<TrainHistory>& histories,
                   const std::string& out_dir);

}  // namespace bdae
