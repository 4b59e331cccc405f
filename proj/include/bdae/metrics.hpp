#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bdae/tensor.hpp"

namespace bdae {

// Square count matrix, rows = true class, columns = predicted class.
struct ConfusionMatrix {
    int n_classes = 0;
    std::vector<int64_t> counts;  // row-major n x n

    int64_t& at(int truth, int pred) { return counts[static_cast<size_t>(truth * n_classes + pred)]; }
    int64_t at(int truth, int pred) const {
        return counts[static_cast<size_t>(truth * n_classes + pred)];
    }
    int64_t total() const;
    int64_t row_sum(int truth) const;
    int64_t col_sum(int pred) const;
    int64_t trace() const;

    // Row-normalized view; rows with no samples stay all-zero.
    std::vector<double> normalized() const;
};

ConfusionMatrix confusion_matrix(const std::vector<int>& truths, const std::vector<int>& preds,
                                 int n_classes = 4);

// One-vs-rest rates per class plus micro (pooled counts) and macro (averaged
// rates) aggregates. Undefined ratios (0/0) are reported as 0 and flagged.
struct ClassificationMetrics {
    double accuracy = 0.0;
    std::vector<double> tpr, ppv, tnr, f1;  // per class
    double micro_tpr = 0, micro_ppv = 0, micro_tnr = 0, micro_f1 = 0;
    double macro_tpr = 0, macro_ppv = 0, macro_tnr = 0, macro_f1 = 0;
    bool any_degenerate = false;
};

ClassificationMetrics classification_metrics(const ConfusionMatrix& cm);

// Multiclass Matthews correlation in the covariance (count-matrix) form;
// binary input reduces to the familiar TP/TN/FP/FN expression.
struct MccResult {
    double value = 0.0;
    bool degenerate = false;  // zero denominator (e.g. single predicted class)
};

MccResult mcc(const ConfusionMatrix& cm);

// One-vs-rest AUROC by rank sum (Mann-Whitney), ties get averaged ranks.
// Micro flattens all (sample, class) indicator/score pairs into one ranking;
// macro averages per-class AUCs over classes with both positives and
// negatives present.
double auroc_micro(const std::vector<int>& truths, const Tensor<float>& probs);

struct MacroAuroc {
    double value = 0.5;
    bool degenerate = false;  // no class had both positives and negatives
};

MacroAuroc auroc_macro(const std::vector<int>& truths, const Tensor<float>& probs);

// Cohen's kappa with the asymptotic normal confidence interval
// kappa +/- z * sqrt(p_o (1 - p_o) / (N (1 - p_e)^2)), clamped to [-1, 1].
struct KappaResult {
    double kappa = 0.0;
    double low = 0.0;
    double high = 0.0;
    bool degenerate = false;  // p_e == 1
};

KappaResult kappa_with_ci(const ConfusionMatrix& cm, double alpha = 0.05);

// Inverse standard normal CDF (Acklam's approximation + one Halley
// refinement); normal_quantile(0.975) = 1.959963984540054.
double normal_quantile(double p);

// Everything above for one set of scored predictions. Reports loaded from
// external result files may lack a confusion matrix (cm.n_classes == 0),
// per-class rates, or a kappa interval when the source never published them.
struct EvalReport {
    std::string label;  // "fold-1", "pooled", ...
    int64_t n = 0;
    ConfusionMatrix cm;
    ClassificationMetrics cls;
    MccResult mcc;
    KappaResult kappa;
    bool kappa_present = true;
    double auroc_micro = 0.5;
    MacroAuroc auroc_macro;
};

EvalReport evaluate(const std::string& label, const std::vector<int>& truths,
                    const std::vector<int>& preds, const Tensor<float>& probs, int n_classes = 4);

}  // namespace bdae
