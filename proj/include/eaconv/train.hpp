#pragma once

// SGD training harness, perturbation-robustness evaluation, and the
// three-model comparison protocol (standard network, elastic data
// augmentation, elastically-augmented network initialized by weight
// transfer). Everything is deterministic given the config seeds: shuffle
// order, flip decisions, augmentation fields, and perturbed evaluation sets
// all derive from explicit seeds, so repeated runs produce byte-identical
// reports.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "eaconv/data.hpp"
#include "eaconv/ealayers.hpp"
#include "eaconv/model.hpp"
#include "eaconv/ops.hpp"
#include "eaconv/perturb.hpp"
#include "eaconv/rng.hpp"
#include "eaconv/tensor.hpp"

namespace eaconv {

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

struct TrainConfig {
    int64_t epochs = 12;
    int64_t batch_size = 32;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;          // applied to conv/linear weights only
    std::vector<int64_t> lr_schedule;    // epochs at which the rate decays
    double lr_decay = 0.1;
    uint64_t seed = 1;
    bool horizontal_flip = true;         // the only baseline augmentation
    bool elastic_augment = false;        // elastic data-augmentation baseline
    double elastic_alpha = 0.06;
    double elastic_sigma = 1.28;

    void validate() const {
        if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (learning_rate < 0.0) {
            throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
        }
        if (momentum < 0.0 || momentum >= 1.0) {
            throw std::invalid_argument("TrainConfig: momentum must lie in [0, 1)");
        }
        if (weight_decay < 0.0) {
            throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
        }
        if (!(lr_decay > 0.0)) throw std::invalid_argument("TrainConfig: lr_decay must be > 0");
        for (size_t i = 1; i < lr_schedule.size(); ++i) {
            if (lr_schedule[i] <= lr_schedule[i - 1]) {
                throw std::invalid_argument("TrainConfig: lr_schedule epochs must be ascending");
            }
        }
        if (elastic_augment) {
            if (elastic_alpha < 0.0 || !(elastic_sigma > 0.0)) {
                throw std::invalid_argument("TrainConfig: elastic augmentation parameters invalid");
            }
        }
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
    return {{"epochs", cfg.epochs},
            {"batch_size", cfg.batch_size},
            {"learning_rate", cfg.learning_rate},
            {"momentum", cfg.momentum},
            {"weight_decay", cfg.weight_decay},
            {"lr_schedule", cfg.lr_schedule},
            {"lr_decay", cfg.lr_decay},
            {"seed", cfg.seed},
            {"horizontal_flip", cfg.horizontal_flip},
            {"elastic_augment", cfg.elastic_augment},
            {"elastic_alpha", cfg.elastic_alpha},
            {"elastic_sigma", cfg.elastic_sigma}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int64_t>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int64_t>();
    if (j.contains("learning_rate")) cfg.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("momentum")) cfg.momentum = j.at("momentum").get<double>();
    if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("lr_schedule")) {
        cfg.lr_schedule = j.at("lr_schedule").get<std::vector<int64_t>>();
    }
    if (j.contains("lr_decay")) cfg.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
    if (j.contains("horizontal_flip")) cfg.horizontal_flip = j.at("horizontal_flip").get<bool>();
    if (j.contains("elastic_augment")) cfg.elastic_augment = j.at("elastic_augment").get<bool>();
    if (j.contains("elastic_alpha")) cfg.elastic_alpha = j.at("elastic_alpha").get<double>();
    if (j.contains("elastic_sigma")) cfg.elastic_sigma = j.at("elastic_sigma").get<double>();
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochStats {
    double loss = 0.0;      // mean minibatch cross-entropy
    double accuracy = 0.0;  // percent, on the training batches as seen
};

using History = std::vector<EpochStats>;

namespace detail {

/// Copies the selected images into a batch tensor, optionally mirrored
/// left-to-right and optionally elastically distorted (one field per image).
inline Tensor gather_batch(const Dataset& ds, const std::vector<int64_t>& order, int64_t begin,
                           int64_t end, const std::vector<char>& flip,
                           const TrainConfig& cfg, Rng& aug_rng) {
    const int64_t c = ds.channels(), h = ds.height(), w = ds.width();
    Tensor batch({end - begin, c, h, w});
    for (int64_t b = begin; b < end; ++b) {
        const int64_t i = order[static_cast<size_t>(b)];
        Tensor img = ds.image(i);
        if (cfg.elastic_augment && cfg.elastic_alpha > 0.0) {
            img = elastic(img, cfg.elastic_alpha, cfg.elastic_sigma, aug_rng.next_u64());
        }
        double* dst = batch.data() + (b - begin) * c * h * w;
        if (flip[static_cast<size_t>(b)]) {
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x = 0; x < w; ++x)
                        dst[(ci * h + y) * w + x] = img[(ci * h + y) * w + (w - 1 - x)];
        } else {
            for (int64_t j = 0; j < c * h * w; ++j) dst[j] = img[j];
        }
    }
    return batch;
}

/// Predicted class per row: argmax over logits, lowest index on ties.
inline std::vector<int64_t> argmax_rows(const Tensor& logits) {
    const int64_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int64_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j) {
            if (logits[i * k + j] > logits[i * k + best]) best = j;
        }
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

}  // namespace detail

/// Activates dormant transformation paths: every path coefficient that is
/// exactly zero is set to epsilon so the per-pixel max (and therefore the
/// gradient) can reach it. Returns the number of coefficients seeded.
inline int64_t seed_dormant_paths(Model& model, double epsilon) {
    int64_t seeded = 0;
    for (auto& layer : model.layers) {
        Grad* beta = nullptr;
        if (auto* conv = dynamic_cast<EAConvLayer*>(layer.get())) {
            beta = &conv->beta();
        } else if (auto* block = dynamic_cast<EAResBlock*>(layer.get())) {
            beta = &block->beta();
        }
        if (!beta) continue;
        for (int64_t p = 0; p < beta->value.numel(); ++p) {
            if (beta->value[p] == 0.0) {
                beta->value[p] = epsilon;
                ++seeded;
            }
        }
    }
    return seeded;
}

/// Minibatch SGD with momentum and decoupled-from-beta weight decay. The
/// shuffle order, flip decisions, and augmentation fields all come from one
/// seeded generator, so a (model, dataset, config) triple fully determines
/// the result. Throws if the loss stops being finite.
inline History train(Model& model, const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    ds.validate();
    if (ds.size() == 0) throw std::invalid_argument("train: dataset is empty");

    auto params = model.named_params();
    std::vector<Tensor> velocity;
    velocity.reserve(params.size());
    for (auto& p : params) velocity.emplace_back(p.param->value.shape());

    Rng rng(cfg.seed);
    double lr = cfg.learning_rate;
    size_t next_decay = 0;
    History history;
    const int64_t n = ds.size();

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (next_decay < cfg.lr_schedule.size() && epoch == cfg.lr_schedule[next_decay]) {
            lr *= cfg.lr_decay;
            ++next_decay;
        }
        std::vector<int64_t> order = rng.permutation(n);
        std::vector<char> flip(static_cast<size_t>(n), 0);
        if (cfg.horizontal_flip) {
            for (int64_t i = 0; i < n; ++i) flip[static_cast<size_t>(i)] = rng.bernoulli(0.5);
        }

        double loss_sum = 0.0;
        int64_t correct = 0, batches = 0;
        for (int64_t begin = 0; begin < n; begin += cfg.batch_size) {
            const int64_t end = std::min(n, begin + cfg.batch_size);
            Tensor x = detail::gather_batch(ds, order, begin, end, flip, cfg, rng);
            std::vector<int64_t> labels(static_cast<size_t>(end - begin));
            for (int64_t b = begin; b < end; ++b) {
                labels[static_cast<size_t>(b - begin)] =
                    ds.labels[static_cast<size_t>(order[static_cast<size_t>(b)])];
            }

            Tensor logits = model.forward_train(x, true);
            auto ce = softmax_cross_entropy(logits, labels);
            if (!std::isfinite(ce.loss)) {
                throw std::runtime_error(
                    "train: loss diverged (non-finite) at epoch " + std::to_string(epoch) +
                    ", batch " + std::to_string(batches) + "; reduce the learning rate");
            }
            loss_sum += ce.loss;
            ++batches;
            auto preds = detail::argmax_rows(logits);
            for (size_t i = 0; i < labels.size(); ++i) {
                if (preds[i] == labels[i]) ++correct;
            }

            model.zero_grad();
            model.backward(ce.grad_logits);

            for (size_t pi = 0; pi < params.size(); ++pi) {
                Grad& g = *params[pi].param;
                Tensor& v = velocity[pi];
                const double wd = params[pi].weight_decay ? cfg.weight_decay : 0.0;
                for (int64_t i = 0; i < g.value.numel(); ++i) {
                    const double grad = g.gradient[i] + wd * g.value[i];
                    v[i] = cfg.momentum * v[i] + grad;
                    g.value[i] -= lr * v[i];
                }
            }
        }
        history.push_back({loss_sum / static_cast<double>(std::max<int64_t>(1, batches)),
                           100.0 * static_cast<double>(correct) / static_cast<double>(n)});
    }
    return history;
}

/// Top-1 accuracy in percent, batched, inference-mode batchnorm.
inline double evaluate(const Model& model, const Dataset& ds, int64_t batch_size = 64) {
    ds.validate();
    if (ds.size() == 0) throw std::invalid_argument("evaluate: dataset is empty");
    const int64_t n = ds.size(), c = ds.channels(), h = ds.height(), w = ds.width();
    const int64_t chw = c * h * w;
    int64_t correct = 0;
    for (int64_t begin = 0; begin < n; begin += batch_size) {
        const int64_t end = std::min(n, begin + batch_size);
        Tensor x({end - begin, c, h, w});
        for (int64_t i = begin; i < end; ++i) {
            const double* src = ds.images.data() + i * chw;
            double* dst = x.data() + (i - begin) * chw;
            for (int64_t j = 0; j < chw; ++j) dst[j] = src[j];
        }
        Tensor logits = model.forward_eval(x);
        auto preds = detail::argmax_rows(logits);
        for (int64_t i = begin; i < end; ++i) {
            if (preds[static_cast<size_t>(i - begin)] == ds.labels[static_cast<size_t>(i)]) {
                ++correct;
            }
        }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Severity schedules and the robustness report
// ---------------------------------------------------------------------------

struct SeverityPoint {
    double severity;                      // the figure-axis value for this row
    std::map<std::string, double> params;
};

struct Schedule {
    std::string kind;
    std::vector<SeverityPoint> points;
};

/// The six evaluation axes at desk scale (32×32 images).
inline std::vector<Schedule> default_schedules() {
    std::vector<Schedule> s;
    s.push_back({"elastic",
                 {{0.5, {{"alpha", 0.5}, {"sigma_field", 4.0}}},
                  {1.0, {{"alpha", 1.0}, {"sigma_field", 4.0}}},
                  {1.5, {{"alpha", 1.5}, {"sigma_field", 4.0}}},
                  {2.0, {{"alpha", 2.0}, {"sigma_field", 4.0}}}}});
    s.push_back({"gaussian",
                 {{1, {{"std", 0.02}}},
                  {2, {{"std", 0.04}}},
                  {3, {{"std", 0.06}}},
                  {4, {{"std", 0.08}}}}});
    s.push_back({"occlusion",
                 {{2, {{"radius", 2}}},
                  {4, {{"radius", 4}}},
                  {6, {{"radius", 6}}},
                  {8, {{"radius", 8}}}}});
    s.push_back({"rotation",
                 {{5, {{"theta", 5}}},
                  {10, {{"theta", 10}}},
                  {15, {{"theta", 15}}},
                  {20, {{"theta", 20}}}}});
    s.push_back({"cut",
                 {{4, {{"x0", 4}, {"y0", 4}}},
                  {8, {{"x0", 8}, {"y0", 8}}},
                  {12, {{"x0", 12}, {"y0", 12}}},
                  {16, {{"x0", 16}, {"y0", 16}}}}});
    s.push_back({"zoom",
                 {{1.1, {{"zeta", 1.1}}},
                  {1.2, {{"zeta", 1.2}}},
                  {1.35, {{"zeta", 1.35}}},
                  {1.5, {{"zeta", 1.5}}}}});
    return s;
}

struct EvalRow {
    std::string kind;   // "clean" or a perturbation kind
    double severity;    // 0 for clean
    std::string model;
    double accuracy;    // percent
    double drop;        // clean accuracy of the same model minus this accuracy
};

struct EvalReport {
    std::vector<EvalRow> rows;

    std::string to_csv() const {
        std::string out = "kind,severity,model,accuracy,drop\n";
        char buf[160];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%s,%.6g,%s,%.4f,%.4f\n", r.kind.c_str(), r.severity,
                          r.model.c_str(), r.accuracy, r.drop);
            out += buf;
        }
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json rows_json = nlohmann::json::array();
        for (const auto& r : rows) {
            rows_json.push_back({{"kind", r.kind},
                                 {"severity", r.severity},
                                 {"model", r.model},
                                 {"accuracy", r.accuracy},
                                 {"drop", r.drop}});
        }
        return {{"rows", rows_json}};
    }

    /// Accuracy of one (kind, severity, model) row; throws if absent.
    double accuracy_of(const std::string& kind, double severity,
                       const std::string& model) const {
        for (const auto& r : rows) {
            if (r.kind == kind && r.severity == severity && r.model == model) return r.accuracy;
        }
        throw std::invalid_argument("EvalReport: no row (" + kind + ", " +
                                    std::to_string(severity) + ", " + model + ")");
    }

    /// Mean accuracy over every severity of one kind for one model.
    double mean_accuracy_of(const std::string& kind, const std::string& model) const {
        double sum = 0.0;
        int64_t count = 0;
        for (const auto& r : rows) {
            if (r.kind == kind && r.model == model) {
                sum += r.accuracy;
                ++count;
            }
        }
        if (count == 0) {
            throw std::invalid_argument("EvalReport: no rows (" + kind + ", " + model + ")");
        }
        return sum / static_cast<double>(count);
    }
};

/// Evaluates every model on the clean test set and on one perturbed copy per
/// (kind, severity). Each perturbed set is built once with a seed derived
/// from sweep_seed and the schedule position, so all models see identical
/// images and repeated sweeps are bit-identical.
inline EvalReport robustness_sweep(const std::vector<std::pair<std::string, const Model*>>& models,
                                   const Dataset& test, const std::vector<Schedule>& schedules,
                                   uint64_t sweep_seed = 2024) {
    EvalReport report;
    std::map<std::string, double> clean;
    for (const auto& [name, model] : models) {
        const double acc = evaluate(*model, test);
        clean[name] = acc;
        report.rows.push_back({"clean", 0.0, name, acc, 0.0});
    }
    for (size_t k = 0; k < schedules.size(); ++k) {
        const Schedule& schedule = schedules[k];
        for (size_t p = 0; p < schedule.points.size(); ++p) {
            PerturbSpec spec;
            spec.kind = schedule.kind;
            spec.params = schedule.points[p].params;
            spec.seed = sweep_seed ^ (static_cast<uint64_t>(k + 1) * 0x100000001b3ULL +
                                      static_cast<uint64_t>(p));
            Dataset perturbed = perturb_dataset(test, spec);
            for (const auto& [name, model] : models) {
                const double acc = evaluate(*model, perturbed);
                report.rows.push_back(
                    {schedule.kind, schedule.points[p].severity, name, acc, clean[name] - acc});
            }
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Comparison protocol: standard / data augmentation / elastically augmented
// ---------------------------------------------------------------------------

struct CompareConfig {
    ModelConfig model;
    TrainConfig train;            // standard and data-augmentation training
    TrainConfig fine_tune;        // EA fine-tuning after weight transfer
    double beta_seed = 0.25;      // dormant-path activation before fine-tuning
    uint64_t sweep_seed = 2024;

    void validate() const {
        train.validate();
        fine_tune.validate();
        if (beta_seed < 0.0) throw std::invalid_argument("CompareConfig: beta_seed must be >= 0");
    }
};

inline nlohmann::json compare_config_to_json(const CompareConfig& cfg) {
    return {{"model", model_config_to_json(cfg.model)},
            {"train", train_config_to_json(cfg.train)},
            {"fine_tune", train_config_to_json(cfg.fine_tune)},
            {"beta_seed", cfg.beta_seed},
            {"sweep_seed", cfg.sweep_seed}};
}

inline CompareConfig compare_config_from_json(const nlohmann::json& j) {
    CompareConfig cfg;
    cfg.model = model_config_from_json(j.at("model"));
    cfg.train = train_config_from_json(j.at("train"));
    cfg.fine_tune = j.contains("fine_tune") ? train_config_from_json(j.at("fine_tune"))
                                            : cfg.train;
    if (j.contains("beta_seed")) cfg.beta_seed = j.at("beta_seed").get<double>();
    if (j.contains("sweep_seed")) cfg.sweep_seed = j.at("sweep_seed").get<uint64_t>();
    cfg.validate();
    return cfg;
}

struct CompareResult {
    Model standard;
    Model data_aug;
    Model ea;
    History standard_history;
    History data_aug_history;
    History ea_history;
    double transfer_check = -1.0;  // |clean(ea at epoch 0) - clean(standard)|, must be 0
    EvalReport report;
};

/// Table-style comparison: trains the standard network, a second standard
/// network with elastic data augmentation, and the EA network initialized by
/// weight transfer from the first (verified to evaluate identically before
/// fine-tuning, then fine-tuned with its dormant paths activated). All three
/// are swept over the same perturbed test sets.
inline CompareResult compare_protocol(const Dataset& train_set, const Dataset& test_set,
                                      const CompareConfig& cfg) {
    cfg.validate();
    CompareResult result;

    result.standard = build_model(cfg.model, false);
    result.standard_history = train(result.standard, train_set, cfg.train);

    TrainConfig aug_cfg = cfg.train;
    aug_cfg.elastic_augment = true;
    result.data_aug = build_model(cfg.model, false);
    result.data_aug_history = train(result.data_aug, train_set, aug_cfg);

    result.ea = build_model(cfg.model, true);
    transfer_weights(result.standard, result.ea);
    const double std_clean = evaluate(result.standard, test_set);
    const double ea_epoch0 = evaluate(result.ea, test_set);
    result.transfer_check = std::abs(ea_epoch0 - std_clean);
    if (result.transfer_check != 0.0) {
        throw std::runtime_error(
            "compare_protocol: transfer-initialized model evaluates to " +
            std::to_string(ea_epoch0) + "% but the source model evaluates to " +
            std::to_string(std_clean) + "%; weight transfer must be exact");
    }
    seed_dormant_paths(result.ea, cfg.beta_seed);
    result.ea_history = train(result.ea, train_set, cfg.fine_tune);

    result.report = robustness_sweep({{"standard", &result.standard},
                                      {"data_aug", &result.data_aug},
                                      {"eaconv", &result.ea}},
                                     test_set, default_schedules(), cfg.sweep_seed);
    return result;
}

/// Host CNN for desk-scale experiments: four 3×3 conv stages with batchnorm,
/// the first one elastically augmentable, global average pooling, and a
/// linear classifier.
inline ModelConfig desk_cnn_config(int64_t input_channels = 3, int64_t input_size = 32,
                                   int64_t num_classes = 4, uint64_t seed = 1234,
                                   double bank_alpha = 0.5) {
    ModelConfig cfg;
    cfg.input_channels = input_channels;
    cfg.input_size = input_size;
    cfg.num_classes = num_classes;
    cfg.seed = seed;
    cfg.basis = make_basis_config(3, 1.0, bank_alpha);
    cfg.layers = {
        {.type = "conv", .out_channels = 8, .kernel_size = 3, .augment = true},
        {.type = "batchnorm"},
        {.type = "relu"},
        {.type = "maxpool", .stride = 2, .window = 2},
        {.type = "conv", .out_channels = 16, .kernel_size = 3},
        {.type = "batchnorm"},
        {.type = "relu"},
        {.type = "maxpool", .stride = 2, .window = 2},
        {.type = "conv", .out_channels = 32, .kernel_size = 3},
        {.type = "batchnorm"},
        {.type = "relu"},
        {.type = "maxpool", .stride = 2, .window = 2},
        {.type = "conv", .out_channels = 32, .kernel_size = 3},
        {.type = "batchnorm"},
        {.type = "relu"},
        {.type = "gap"},
        {.type = "linear", .out_features = num_classes},
    };
    return cfg;
}

}  // namespace eaconv
