#include "bdae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bdae/errors.hpp"

namespace bdae {

int64_t ConfusionMatrix::total() const {
    return std::accumulate(counts.begin(), counts.end(), int64_t{0});
}

int64_t ConfusionMatrix::row_sum(int truth) const {
    int64_t s = 0;
    for (int p = 0; p < n_classes; ++p) s += at(truth, p);
    return s;
}

int64_t ConfusionMatrix::col_sum(int pred) const {
    int64_t s = 0;
    for (int t = 0; t < n_classes; ++t) s += at(t, pred);
    return s;
}

int64_t ConfusionMatrix::trace() const {
    int64_t s = 0;
    for (int k = 0; k < n_classes; ++k) s += at(k, k);
    return s;
}

std::vector<double> ConfusionMatrix::normalized() const {
    std::vector<double> out(counts.size(), 0.0);
    for (int t = 0; t < n_classes; ++t) {
        int64_t row = row_sum(t);
        if (row == 0) continue;
        for (int p = 0; p < n_classes; ++p)
            out[static_cast<size_t>(t * n_classes + p)] =
                static_cast<double>(at(t, p)) / static_cast<double>(row);
    }
    return out;
}

ConfusionMatrix confusion_matrix(const std::vector<int>& truths, const std::vector<int>& preds,
                                 int n_classes) {
    if (truths.size() != preds.size())
        throw ValueError("confusion_matrix: " + std::to_string(truths.size()) + " truths vs " +
                         std::to_string(preds.size()) + " predictions");
    if (n_classes < 2) throw ValueError("confusion_matrix: need at least 2 classes");
    ConfusionMatrix cm;
    cm.n_classes = n_classes;
    cm.counts.assign(static_cast<size_t>(n_classes) * static_cast<size_t>(n_classes), 0);
    for (size_t i = 0; i < truths.size(); ++i) {
        if (truths[i] < 0 || truths[i] >= n_classes || preds[i] < 0 || preds[i] >= n_classes)
            throw ValueError("confusion_matrix: label (" + std::to_string(truths[i]) + ", " +
                             std::to_string(preds[i]) + ") at sample " + std::to_string(i) +
                             " outside 0.." + std::to_string(n_classes - 1));
        ++cm.at(truths[i], preds[i]);
    }
    return cm;
}

namespace {

// 0/0 -> 0, flag raised.
double ratio(int64_t num, int64_t den, bool& degenerate) {
    if (den == 0) {
        degenerate = true;
        return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ClassificationMetrics classification_metrics(const ConfusionMatrix& cm) {
    const int64_t n = cm.total();
    if (n == 0) throw ValueError("classification_metrics: empty confusion matrix");
    ClassificationMetrics m;
    m.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(n);

    int64_t tp_sum = 0, fp_sum = 0, fn_sum = 0, tn_sum = 0;
    for (int k = 0; k < cm.n_classes; ++k) {
        int64_t tp = cm.at(k, k);
        int64_t fn = cm.row_sum(k) - tp;
        int64_t fp = cm.col_sum(k) - tp;
        int64_t tn = n - tp - fn - fp;
        m.tpr.push_back(ratio(tp, tp + fn, m.any_degenerate));
        m.ppv.push_back(ratio(tp, tp + fp, m.any_degenerate));
        m.tnr.push_back(ratio(tn, tn + fp, m.any_degenerate));
        m.f1.push_back(ratio(2 * tp, 2 * tp + fp + fn, m.any_degenerate));
        tp_sum += tp;
        fp_sum += fp;
        fn_sum += fn;
        tn_sum += tn;
    }

    m.micro_tpr = ratio(tp_sum, tp_sum + fn_sum, m.any_degenerate);
    m.micro_ppv = ratio(tp_sum, tp_sum + fp_sum, m.any_degenerate);
    m.micro_tnr = ratio(tn_sum, tn_sum + fp_sum, m.any_degenerate);
    m.micro_f1 = ratio(2 * tp_sum, 2 * tp_sum + fp_sum + fn_sum, m.any_degenerate);

    const double nc = cm.n_classes;
    m.macro_tpr = std::accumulate(m.tpr.begin(), m.tpr.end(), 0.0) / nc;
    m.macro_ppv = std::accumulate(m.ppv.begin(), m.ppv.end(), 0.0) / nc;
    m.macro_tnr = std::accumulate(m.tnr.begin(), m.tnr.end(), 0.0) / nc;
    m.macro_f1 = std::accumulate(m.f1.begin(), m.f1.end(), 0.0) / nc;
    return m;
}

MccResult mcc(const ConfusionMatrix& cm) {
    const double s = static_cast<double>(cm.total());
    if (s == 0.0) throw ValueError("mcc: empty confusion matrix");
    const double c = static_cast<double>(cm.trace());
    double tp_dot = 0.0, t2 = 0.0, p2 = 0.0;
    for (int k = 0; k < cm.n_classes; ++k) {
        double t = static_cast<double>(cm.row_sum(k));
        double p = static_cast<double>(cm.col_sum(k));
        tp_dot += t * p;
        t2 += t * t;
        p2 += p * p;
    }
    const double denom2 = (s * s - p2) * (s * s - t2);
    MccResult r;
    if (denom2 <= 0.0) {
        r.degenerate = true;
        return r;
    }
    r.value = (c * s - tp_dot) / std::sqrt(denom2);
    return r;
}

namespace {

// Rank-sum AUC over (score, is_positive) pairs; ties share averaged ranks.
double rank_auc(std::vector<std::pair<double, int>>& pairs, int64_t n_pos, int64_t n_neg) {
    std::sort(pairs.begin(), pairs.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double pos_rank_sum = 0.0;
    size_t i = 0;
    while (i < pairs.size()) {
        size_t j = i;
        while (j < pairs.size() && pairs[j].first == pairs[i].first) ++j;
        double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (size_t k = i; k < j; ++k)
            if (pairs[k].second) pos_rank_sum += avg_rank;
        i = j;
    }
    double u = pos_rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

void check_probs(const std::vector<int>& truths, const Tensor<float>& probs) {
    if (probs.ndim() != 2 || probs.shape[0] != static_cast<int64_t>(truths.size()))
        throw ValueError("auroc: probability matrix " + shape_str(probs.shape) +
                         " does not match " + std::to_string(truths.size()) + " truths");
    for (size_t i = 0; i < truths.size(); ++i)
        if (truths[i] < 0 || truths[i] >= static_cast<int>(probs.shape[1]))
            throw ValueError("auroc: label " + std::to_string(truths[i]) + " at sample " +
                             std::to_string(i) + " outside the score columns");
}

}  // namespace

double auroc_micro(const std::vector<int>& truths, const Tensor<float>& probs) {
    check_probs(truths, probs);
    const int64_t n = probs.shape[0], k = probs.shape[1];
    std::vector<std::pair<double, int>> pairs;
    pairs.reserve(static_cast<size_t>(n * k));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < k; ++c)
            pairs.emplace_back(static_cast<double>(probs.at(i, c)),
                               truths[static_cast<size_t>(i)] == static_cast<int>(c) ? 1 : 0);
    return rank_auc(pairs, n, n * (k - 1));
}

MacroAuroc auroc_macro(const std::vector<int>& truths, const Tensor<float>& probs) {
    check_probs(truths, probs);
    const int64_t n = probs.shape[0], k = probs.shape[1];
    double sum = 0.0;
    int used = 0;
    for (int64_t c = 0; c < k; ++c) {
        int64_t n_pos = 0;
        std::vector<std::pair<double, int>> pairs;
        pairs.reserve(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            int pos = truths[static_cast<size_t>(i)] == static_cast<int>(c) ? 1 : 0;
            n_pos += pos;
            pairs.emplace_back(static_cast<double>(probs.at(i, c)), pos);
        }
        if (n_pos == 0 || n_pos == n) continue;  // one-vs-rest undefined
        sum += rank_auc(pairs, n_pos, n - n_pos);
        ++used;
    }
    MacroAuroc r;
    if (used == 0) {
        r.degenerate = true;
        return r;
    }
    r.value = sum / used;
    return r;
}

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ValueError("normal_quantile: p must be in (0, 1)");
    // Acklam's rational approximation.
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    double x;
    if (p < plow) {
        double q = std::sqrt(-2 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    } else if (p <= 1 - plow) {
        double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    } else {
        double q = std::sqrt(-2 * std::log(1 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    // One Halley step against the exact CDF brings this to full precision.
    double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    double u = e * std::sqrt(2.0 * 3.14159265358979323846) * std::exp(x * x / 2.0);
    return x - u / (1 + x * u / 2);
}

KappaResult kappa_with_ci(const ConfusionMatrix& cm, double alpha) {
    const double n = static_cast<double>(cm.total());
    if (n < 2) throw ValueError("kappa: need at least 2 scored samples");
    double po = static_cast<double>(cm.trace()) / n;
    double pe = 0.0;
    for (int k = 0; k < cm.n_classes; ++k)
        pe += static_cast<double>(cm.row_sum(k)) * static_cast<double>(cm.col_sum(k)) / (n * n);

    KappaResult r;
    if (1.0 - pe < 1e-12) {
        r.degenerate = true;
        return r;
    }
    r.kappa = (po - pe) / (1.0 - pe);
    double se = std::sqrt(po * (1.0 - po) / (n * (1.0 - pe) * (1.0 - pe)));
    double z = normal_quantile(1.0 - alpha / 2.0);
    r.low = std::max(-1.0, r.kappa - z * se);
    r.high = std::min(1.0, r.kappa + z * se);
    return r;
}

EvalReport evaluate(const std::string& label, const std::vector<int>& truths,
                    const std::vector<int>& preds, const Tensor<float>& probs, int n_classes) {
    EvalReport rep;
    rep.label = label;
    rep.n = static_cast<int64_t>(truths.size());
    rep.cm = confusion_matrix(truths, preds, n_classes);
    rep.cls = classification_metrics(rep.cm);
    rep.mcc = mcc(rep.cm);
    rep.kappa = kappa_with_ci(rep.cm);
    rep.auroc_micro = bdae::auroc_micro(truths, probs);
    rep.auroc_macro = bdae::auroc_macro(truths, probs);
    return rep;
}

}  // namespace bdae
