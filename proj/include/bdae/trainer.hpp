#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bdae/dataset.hpp"
#include "bdae/graph.hpp"
#include "bdae/models.hpp"
#include "bdae/preprocess.hpp"
#include "bdae/report.hpp"

namespace bdae {

struct TrainConfig {
    double lr = 0.001;
    int max_epochs = 300;
    int batch_size = 16;  // run configs use 8 for the 3d model
    int patience = 20;    // epochs without validation-loss improvement
    uint64_t seed = 1;
    AugmentPolicy augment{};            // .enabled toggles the 5-variant expansion
    std::string precision = "float32";  // "float32" | "float64"
    bool class_weighting = false;       // inverse-frequency loss weights, off by default
    // When set, per-epoch training loss/accuracy are measured by a separate
    // inference pass over the raw training samples (dropout off). Otherwise
    // the running average over the augmented training stream is recorded.
    bool eval_train_each_epoch = true;
};

void validate_train_config(const TrainConfig& config);

// Inference outputs over a sample list, in order.
struct EvalOutputs {
    std::vector<int> truths;
    std::vector<int> preds;
    Tensor<float> probs{Shape{1, 1}};  // [n, classes]
    double mean_loss = 0.0;
    double accuracy = 0.0;
};

template <typename T>
EvalOutputs evaluate_samples(ModelGraph<T>& graph, const std::vector<Sample>& samples,
                             int batch_size = 16);

// Adam + early stopping on validation loss; the graph ends holding the
// weights of the best validation epoch. Subject overlap between the two
// sets aborts before any step runs.
template <typename T>
TrainHistory train(ModelGraph<T>& graph, const std::vector<Sample>& train_set,
                   const std::vector<Sample>& val_set, const TrainConfig& config);

struct FoldResult {
    int fold = 0;
    EvalReport report;
    TrainHistory history;
    std::vector<int64_t> val_rows;  // manifest row of each scored prediction
};

struct CrossvalResult {
    FoldSplit split;
    std::vector<FoldResult> folds;
    EvalReport pooled;

    std::vector<TrainHistory> histories() const;
    // Pooled report first, folds after, class marginals from the pooled
    // confusion matrix — ready for render_report / compare_table.
    MetricsBundle bundle() const;
};

struct CrossvalOptions {
    int k = 5;
    std::string checkpoint_dir;  // when non-empty, writes fold-<i>.ckpt there
};

// Stratified subject-exclusive k-fold run: one fresh model per fold (seed
// derived from run seed and fold index), validation predictions pooled
// across folds for the overall report. `samples` must be row-aligned with
// `table.studies` (same index order).
CrossvalResult cross_validate(const StudyTable& table, const std::vector<Sample>& samples,
                              const ModelConfig& model, const TrainConfig& config,
                              const CrossvalOptions& options = {});

}  // namespace bdae
