#include "bdae/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <type_traits>

#include "bdae/adam.hpp"
#include "bdae/checkpoint.hpp"
#include "bdae/loss.hpp"

namespace bdae {

void validate_train_config(const TrainConfig& config) {
    if (config.lr < 0.0) throw ValueError("train config: lr must be >= 0");
    if (config.max_epochs < 1) throw ValueError("train config: max_epochs must be >= 1");
    if (config.batch_size < 1) throw ValueError("train config: batch_size must be >= 1");
    if (config.patience < 1) throw ValueError("train config: patience must be >= 1");
    if (config.precision != "float32" && config.precision != "float64")
        throw ValueError("train config: precision must be float32 or float64, got '" +
                         config.precision + "'");
}

namespace {

template <typename T>
Tensor<T> stack_range(const std::vector<Sample>& samples, const std::vector<int64_t>& order,
                      size_t start, size_t stop) {
    const Tensor<float>& first = samples[static_cast<size_t>(order[start])].tensor;
    Shape shape;
    shape.push_back(static_cast<int64_t>(stop - start));
    for (int64_t e : first.shape) shape.push_back(e);
    Tensor<T> batch(shape);
    const int64_t per = first.numel();
    for (size_t i = start; i < stop; ++i) {
        const Tensor<float>& t = samples[static_cast<size_t>(order[i])].tensor;
        if (t.shape != first.shape)
            throw ValueError("train: sample tensor " + shape_str(t.shape) +
                             " does not match batch shape " + shape_str(first.shape));
        T* dst = batch.ptr() + static_cast<int64_t>(i - start) * per;
        for (int64_t j = 0; j < per; ++j) dst[j] = static_cast<T>(t[j]);
    }
    return batch;
}

std::vector<int64_t> identity_order(size_t n) {
    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), int64_t{0});
    return order;
}

template <typename T>
bool graph_has_batchnorm(ModelGraph<T>& graph) {
    for (const auto& spec : graph.specs())
        if (spec.kind == LayerKind::BatchNorm) return true;
    return false;
}

int64_t argmax_row(const double* row, int64_t k) {
    int64_t best = 0;
    for (int64_t c = 1; c < k; ++c)
        if (row[c] > row[best]) best = c;
    return best;
}

}  // namespace

template <typename T>
EvalOutputs evaluate_samples(ModelGraph<T>& graph, const std::vector<Sample>& samples,
                             int batch_size) {
    if (samples.empty()) throw ValueError("evaluate: no samples");
    if (batch_size < 1) throw ValueError("evaluate: batch size must be >= 1");
    const int64_t n = static_cast<int64_t>(samples.size());
    const int64_t k = graph.output_shape().back();

    EvalOutputs out;
    out.probs = Tensor<float>(Shape{n, k});
    out.truths.reserve(static_cast<size_t>(n));
    out.preds.reserve(static_cast<size_t>(n));

    const ForwardCtx ctx{Mode::Infer, 0, 0};
    auto order = identity_order(samples.size());
    double total_loss = 0.0;
    int64_t correct = 0;
    std::vector<double> row(static_cast<size_t>(k));
    for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size)) {
        size_t stop = std::min(samples.size(), start + static_cast<size_t>(batch_size));
        auto logits = graph.forward(stack_range<T>(samples, order, start, stop), ctx);
        for (size_t i = start; i < stop; ++i) {
            const T* lrow = logits.ptr() + static_cast<int64_t>(i - start) * k;
            for (int64_t c = 0; c < k; ++c) row[static_cast<size_t>(c)] = static_cast<double>(lrow[c]);
            std::vector<double> probs(static_cast<size_t>(k));
            softmax_row(row.data(), probs.data(), k);
            for (int64_t c = 0; c < k; ++c)
                out.probs.at(static_cast<int64_t>(i), c) = static_cast<float>(probs[static_cast<size_t>(c)]);
            int label = samples[i].label;
            auto [loss, grad] = softmax_cross_entropy(row, label);
            (void)grad;
            total_loss += loss;
            int pred = static_cast<int>(argmax_row(probs.data(), k));
            out.truths.push_back(label);
            out.preds.push_back(pred);
            correct += pred == label;
        }
    }
    out.mean_loss = total_loss / static_cast<double>(n);
    out.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return out;
}

template <typename T>
TrainHistory train(ModelGraph<T>& graph, const std::vector<Sample>& train_set,
                   const std::vector<Sample>& val_set, const TrainConfig& config) {
    validate_train_config(config);
    if (train_set.empty()) throw ValueError("train: empty training set");
    if (val_set.empty()) throw ValueError("train: empty validation set");

    // A subject contributing to both sides would leak identity information
    // into validation; refuse before touching any weights.
    std::set<std::string> train_subjects;
    for (const auto& s : train_set) train_subjects.insert(s.subject_id);
    for (const auto& s : val_set)
        if (train_subjects.count(s.subject_id))
            throw ValueError("train: subject '" + s.subject_id +
                             "' appears in both training and validation sets");

    const bool has_bn = graph_has_batchnorm(graph);
    if (has_bn && config.batch_size < 2)
        throw ValueError("train: batchnorm models need batch size >= 2");

    const int64_t k = graph.output_shape().back();
    for (const auto& s : train_set)
        if (s.label < 0 || s.label >= static_cast<int>(k))
            throw ValueError("train: label " + std::to_string(s.label) + " outside the " +
                             std::to_string(k) + "-way output");

    // Optional inverse-frequency loss weights, normalized to mean 1 over the
    // raw training set.
    std::vector<double> class_weight(static_cast<size_t>(k), 1.0);
    if (config.class_weighting) {
        std::vector<int64_t> counts(static_cast<size_t>(k), 0);
        for (const auto& s : train_set) ++counts[static_cast<size_t>(s.label)];
        for (int64_t c = 0; c < k; ++c)
            class_weight[static_cast<size_t>(c)] =
                counts[static_cast<size_t>(c)] == 0
                    ? 0.0
                    : static_cast<double>(train_set.size()) /
                          (static_cast<double>(k) * static_cast<double>(counts[static_cast<size_t>(c)]));
    }

    AdamConfig acfg;
    acfg.lr = config.lr;
    Adam<T> adam(acfg);
    auto params = graph.params();
    adam.attach(params);

    TrainHistory hist;
    ParamSnapshot<T> best_state = graph.snapshot();
    double best_loss = std::numeric_limits<double>::infinity();
    int best_epoch = -1;

    const auto t0 = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        const std::vector<Sample>& pool =
            config.augment.enabled ? augment_expand(train_set, config.augment, config.seed,
                                                    epoch)
                                   : train_set;
        auto order = identity_order(pool.size());
        RngStream shuffler(mix_seed(mix_seed(config.seed, 0x73687566ULL), // "shuf"
                                    static_cast<uint64_t>(epoch)));
        shuffler.shuffle(order);

        double stream_loss = 0.0;
        int64_t stream_n = 0, stream_correct = 0;
        int64_t batch_index = 0;
        std::vector<double> lrow(static_cast<size_t>(k));
        for (size_t start = 0; start < order.size();
             start += static_cast<size_t>(config.batch_size), ++batch_index) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
            if (has_bn && stop - start < 2) break;  // batch statistics need >= 2 rows

            ForwardCtx ctx{Mode::Train, mix_seed(config.seed, 0x65706f6368ULL + epoch),
                           batch_index};
            auto batch = stack_range<T>(pool, order, start, stop);
            auto logits = graph.forward_cached(batch, ctx);

            // Weighted softmax cross entropy over the batch: each row's
            // gradient is scaled by weight / total weight.
            const int64_t b = static_cast<int64_t>(stop - start);
            Tensor<T> grad(logits.shape);
            double weight_total = 0.0;
            for (int64_t r = 0; r < b; ++r)
                weight_total +=
                    class_weight[static_cast<size_t>(pool[static_cast<size_t>(order[start + r])].label)];
            if (weight_total <= 0.0) continue;
            double batch_loss = 0.0;
            for (int64_t r = 0; r < b; ++r) {
                const Sample& smp = pool[static_cast<size_t>(order[start + static_cast<size_t>(r)])];
                const T* lp = logits.ptr() + r * k;
                for (int64_t c = 0; c < k; ++c) lrow[static_cast<size_t>(c)] = static_cast<double>(lp[c]);
                auto [loss, g] = softmax_cross_entropy(lrow, smp.label);
                double w = class_weight[static_cast<size_t>(smp.label)];
                batch_loss += w * loss;
                for (int64_t c = 0; c < k; ++c)
                    grad[r * k + c] = static_cast<T>(g[static_cast<size_t>(c)] * w / weight_total);
                stream_loss += loss;
                stream_correct += argmax_row(lrow.data(), k) == smp.label;
                ++stream_n;
            }
            if (!std::isfinite(batch_loss))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));

            graph.zero_grads();
            graph.backward(grad);
            graph.drop_cache();
            adam.step(params);
        }

        if (config.eval_train_each_epoch) {
            auto tr = evaluate_samples(graph, train_set, config.batch_size);
            hist.train_loss.push_back(tr.mean_loss);
            hist.train_acc.push_back(tr.accuracy);
        } else {
            hist.train_loss.push_back(stream_n ? stream_loss / static_cast<double>(stream_n) : 0.0);
            hist.train_acc.push_back(
                stream_n ? static_cast<double>(stream_correct) / static_cast<double>(stream_n) : 0.0);
        }
        auto val = evaluate_samples(graph, val_set, config.batch_size);
        hist.val_loss.push_back(val.mean_loss);
        hist.val_acc.push_back(val.accuracy);

        if (val.mean_loss < best_loss) {
            best_loss = val.mean_loss;
            best_epoch = epoch;
            best_state = graph.snapshot();
        }
        if (epoch - best_epoch >= config.patience) break;
    }

    graph.restore(best_state);
    hist.best_epoch = best_epoch;
    hist.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return hist;
}

template EvalOutputs evaluate_samples<float>(ModelGraph<float>&, const std::vector<Sample>&, int);
template EvalOutputs evaluate_samples<double>(ModelGraph<double>&, const std::vector<Sample>&,
                                              int);
template TrainHistory train<float>(ModelGraph<float>&, const std::vector<Sample>&,
                                   const std::vector<Sample>&, const TrainConfig&);
template TrainHistory train<double>(ModelGraph<double>&, const std::vector<Sample>&,
                                    const std::vector<Sample>&, const TrainConfig&);

std::vector<TrainHistory> CrossvalResult::histories() const {
    std::vector<TrainHistory> out;
    for (const auto& f : folds) out.push_back(f.history);
    return out;
}

MetricsBundle CrossvalResult::bundle() const {
    MetricsBundle b;
    for (int c = 0; c < pooled.cm.n_classes; ++c) b.class_counts.push_back(pooled.cm.row_sum(c));
    b.reports.push_back(pooled);
    for (const auto& f : folds) b.reports.push_back(f.report);
    return b;
}

namespace {

// One fold at a chosen precision: fresh graph, train, score validation.
template <typename T>
std::pair<EvalOutputs, TrainHistory> run_fold(const ModelConfig& model, const Shape& input_shape,
                                              const std::vector<Sample>& train_samples,
                                              const std::vector<Sample>& val_samples,
                                              const TrainConfig& fold_config,
                                              const std::string& checkpoint_path) {
    ModelGraph<T> graph = build_model<T>(model, input_shape);
    graph.init_params(fold_config.seed);
    TrainHistory hist = train(graph, train_samples, val_samples, fold_config);
    EvalOutputs ev = evaluate_samples(graph, val_samples, fold_config.batch_size);
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, graph, fold_config.seed);
    return {std::move(ev), std::move(hist)};
}

}  // namespace

CrossvalResult cross_validate(const StudyTable& table, const std::vector<Sample>& samples,
                              const ModelConfig& model, const TrainConfig& config,
                              const CrossvalOptions& options) {
    validate_model_config(model);
    validate_train_config(config);
    if (samples.size() != table.studies.size())
        throw ValueError("cross_validate: " + std::to_string(samples.size()) +
                         " samples for " + std::to_string(table.studies.size()) + " studies");
    for (size_t i = 0; i < samples.size(); ++i)
        if (samples[i].label != table.studies[i].age_class ||
            samples[i].subject_id != table.studies[i].subject_id)
            throw ValueError("cross_validate: sample " + std::to_string(i) +
                             " is not aligned with its manifest row");

    CrossvalResult result;
    result.split = make_folds(table, options.k, config.seed);

    std::vector<int> pooled_truths, pooled_preds;
    std::vector<std::vector<float>> pooled_probs;
    const bool f64 = config.precision == "float64";

    for (int f = 0; f < options.k; ++f) {
        std::vector<Sample> train_samples, val_samples;
        for (int64_t row : result.split.train_studies[static_cast<size_t>(f)]) {
            train_samples.push_back(samples[static_cast<size_t>(row)]);
            train_samples.back().from_validation = false;
        }
        for (int64_t row : result.split.val_studies[static_cast<size_t>(f)]) {
            val_samples.push_back(samples[static_cast<size_t>(row)]);
            val_samples.back().from_validation = true;
        }

        TrainConfig fold_config = config;
        fold_config.seed = mix_seed(config.seed, static_cast<uint64_t>(f));
        std::string ckpt;
        if (!options.checkpoint_dir.empty())
            ckpt = options.checkpoint_dir + "/fold-" + std::to_string(f + 1) + ".ckpt";

        const Shape& input_shape = val_samples.front().tensor.shape;
        std::pair<EvalOutputs, TrainHistory> fold_run;
        try {
            fold_run = f64 ? run_fold<double>(model, input_shape, train_samples, val_samples,
                                              fold_config, ckpt)
                           : run_fold<float>(model, input_shape, train_samples, val_samples,
                                             fold_config, ckpt);
        } catch (const ValueError& e) {
            throw ValueError("fold " + std::to_string(f + 1) + ": " + e.what());
        } catch (const NumericError& e) {
            throw NumericError("fold " + std::to_string(f + 1) + ": " + e.what());
        }
        auto& [ev, hist] = fold_run;

        FoldResult fr;
        fr.fold = f;
        fr.history = std::move(hist);
        fr.val_rows = result.split.val_studies[static_cast<size_t>(f)];
        fr.report = evaluate("fold-" + std::to_string(f + 1), ev.truths, ev.preds, ev.probs,
                             static_cast<int>(ev.probs.extent(1)));
        result.folds.push_back(std::move(fr));

        for (size_t i = 0; i < ev.truths.size(); ++i) {
            pooled_truths.push_back(ev.truths[i]);
            pooled_preds.push_back(ev.preds[i]);
            std::vector<float> row(static_cast<size_t>(ev.probs.extent(1)));
            for (int64_t c = 0; c < ev.probs.extent(1); ++c)
                row[static_cast<size_t>(c)] = ev.probs.at(static_cast<int64_t>(i), c);
            pooled_probs.push_back(std::move(row));
        }
    }

    const int64_t k_classes = static_cast<int64_t>(pooled_probs.front().size());
    Tensor<float> probs(Shape{static_cast<int64_t>(pooled_probs.size()), k_classes});
    for (size_t i = 0; i < pooled_probs.size(); ++i)
        for (int64_t c = 0; c < k_classes; ++c)
            probs.at(static_cast<int64_t>(i), c) = pooled_probs[i][static_cast<size_t>(c)];
    result.pooled =
        evaluate("pooled", pooled_truths, pooled_preds, probs, static_cast<int>(k_classes));
    return result;
}

}  // namespace bdae
