// Command-line front end for the elastically-augmented convolution library:
// basis generation and rendering, dataset generation and perturbation,
// training, weight transfer, evaluation, robustness sweeps, the three-model
// comparison protocol, and the finite-difference gradient check. Every
// subcommand prints a JSON result on stdout; failures exit nonzero with a
// one-line JSON error object on stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "eaconv/checkpoint.hpp"
#include "eaconv/data.hpp"
#include "eaconv/gradcheck.hpp"
#include "eaconv/model.hpp"
#include "eaconv/perturb.hpp"
#include "eaconv/pgm.hpp"
#include "eaconv/train.hpp"

namespace {

using nlohmann::json;

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return j;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path);
}

void print_result(const json& j) { std::cout << j.dump(2) << "\n"; }

/// Dataset source: either a path to a saved dataset, or an inline generator
/// object {"synthetic": {...}} / {"cifar": ["batch1.bin", ...]}.
eaconv::Dataset load_data_source(const json& j, const char* what) {
    if (j.is_string()) return eaconv::load_dataset(j.get<std::string>());
    if (j.is_object() && j.contains("synthetic")) {
        const json& s = j.at("synthetic");
        eaconv::SyntheticSpec spec;
        if (s.contains("image_size")) spec.image_size = s.at("image_size").get<int64_t>();
        if (s.contains("num_classes")) spec.num_classes = s.at("num_classes").get<int64_t>();
        if (s.contains("samples_per_class")) {
            spec.samples_per_class = s.at("samples_per_class").get<int64_t>();
        }
        if (s.contains("seed")) spec.seed = s.at("seed").get<uint64_t>();
        return eaconv::generate_synthetic(spec);
    }
    if (j.is_object() && j.contains("cifar")) {
        return eaconv::load_cifar10_binary(j.at("cifar").get<std::vector<std::string>>());
    }
    throw std::runtime_error(std::string(what) +
                             ": expected a dataset path, {\"synthetic\": {...}}, or "
                             "{\"cifar\": [...]}");
}

eaconv::BasisConfig basis_config_from_flags(const std::string& config_path, int64_t kernel_size,
                                            double sigma, double alpha, int64_t num_basis) {
    if (!config_path.empty()) {
        return eaconv::basis_config_from_json(read_json_file(config_path));
    }
    return eaconv::make_basis_config(kernel_size, sigma, alpha, num_basis);
}

std::string model_name_from_path(const std::string& path) {
    return std::filesystem::path(path).stem().string();
}

std::string report_json_path(const std::string& csv_path) {
    std::filesystem::path p(csv_path);
    if (p.extension() == ".csv") return p.replace_extension(".json").string();
    return csv_path + ".json";
}

void write_report(const eaconv::EvalReport& report, const std::string& csv_path) {
    write_text_file(csv_path, report.to_csv());
    write_text_file(report_json_path(csv_path), report.to_json().dump(2) + "\n");
}

int run_gen_basis(const std::string& config_path, int64_t kernel_size, double sigma, double alpha,
                  int64_t num_basis, const std::string& out_path) {
    const eaconv::BasisConfig cfg =
        basis_config_from_flags(config_path, kernel_size, sigma, alpha, num_basis);
    const eaconv::BasisBank bank = eaconv::build_basis_bank(cfg);
    json order = json::array();
    for (const auto& [n, m] : bank.order) order.push_back({n, m});
    json filters = json::array();
    for (int64_t p = 0; p < bank.num_paths(); ++p) {
        json per_path = json::array();
        for (int64_t b = 0; b < bank.num_basis(); ++b) {
            json rows = json::array();
            for (int64_t y = 0; y < bank.kernel_size(); ++y) {
                json row = json::array();
                for (int64_t x = 0; x < bank.kernel_size(); ++x) {
                    row.push_back(bank.filters[((p * bank.num_basis() + b) * bank.kernel_size() +
                                                y) * bank.kernel_size() + x]);
                }
                rows.push_back(row);
            }
            per_path.push_back(rows);
        }
        filters.push_back(per_path);
    }
    json doc = {{"config", eaconv::basis_config_to_json(cfg)},
                {"order", order},
                {"filters", filters}};
    if (out_path.empty()) {
        print_result(doc);
    } else {
        write_text_file(out_path, doc.dump(2) + "\n");
        print_result({{"out", out_path},
                      {"paths", bank.num_paths()},
                      {"basis", bank.num_basis()},
                      {"kernel_size", bank.kernel_size()}});
    }
    return 0;
}

int run_render_basis(const std::string& config_path, int64_t kernel_size, double sigma,
                     double alpha, int64_t num_basis, const std::string& out_dir) {
    const eaconv::BasisConfig cfg =
        basis_config_from_flags(config_path, kernel_size, sigma, alpha, num_basis);
    const eaconv::BasisBank bank = eaconv::build_basis_bank(cfg);
    std::filesystem::create_directories(out_dir);
    const int64_t k = bank.kernel_size();
    int64_t written = 0;
    for (int64_t p = 0; p < bank.num_paths(); ++p) {
        for (int64_t b = 0; b < bank.num_basis(); ++b) {
            eaconv::Tensor img({k, k});
            for (int64_t i = 0; i < k * k; ++i) {
                img[i] = bank.filters[(p * bank.num_basis() + b) * k * k + i];
            }
            const auto [n, m] = bank.order[static_cast<size_t>(b)];
            char name[64];
            std::snprintf(name, sizeof(name), "path%lld_basis%02lld_n%dm%d.pgm",
                          static_cast<long long>(p), static_cast<long long>(b), n, m);
            eaconv::write_pgm((std::filesystem::path(out_dir) / name).string(), img);
            ++written;
        }
    }
    print_result({{"dir", out_dir}, {"written", written}});
    return 0;
}

int run_gen_data(const std::string& out_path, int64_t size, int64_t classes, int64_t per_class,
                 uint64_t seed, const std::vector<std::string>& cifar_paths) {
    eaconv::Dataset ds;
    if (!cifar_paths.empty()) {
        ds = eaconv::load_cifar10_binary(cifar_paths);
    } else {
        eaconv::SyntheticSpec spec;
        spec.image_size = size;
        spec.num_classes = classes;
        spec.samples_per_class = per_class;
        spec.seed = seed;
        ds = eaconv::generate_synthetic(spec);
    }
    eaconv::save_dataset(ds, out_path);
    print_result({{"out", out_path},
                  {"n", ds.size()},
                  {"classes", ds.class_names},
                  {"meta", ds.meta}});
    return 0;
}

int run_train(const std::string& config_path, const std::string& out_path) {
    const json cfg = read_json_file(config_path);
    const eaconv::ModelConfig model_cfg = eaconv::model_config_from_json(cfg.at("model"));
    const eaconv::TrainConfig train_cfg =
        cfg.contains("train") ? eaconv::train_config_from_json(cfg.at("train"))
                              : eaconv::TrainConfig{};
    const bool augmented = cfg.contains("augmented") && cfg.at("augmented").get<bool>();
    const eaconv::Dataset ds = load_data_source(cfg.at("data"), "train: data");

    eaconv::Model model = eaconv::build_model(model_cfg, augmented);
    const eaconv::History history = eaconv::train(model, ds, train_cfg);
    eaconv::save_checkpoint(model, out_path);

    json hist = json::array();
    for (const auto& e : history) hist.push_back({{"loss", e.loss}, {"accuracy", e.accuracy}});
    print_result({{"checkpoint", out_path},
                  {"augmented", augmented},
                  {"epochs", static_cast<int64_t>(history.size())},
                  {"history", hist}});
    return 0;
}

int run_transfer(const std::string& from_path, const std::string& to_path) {
    eaconv::Model source = eaconv::load_checkpoint(from_path);
    eaconv::Model target = eaconv::build_model(source.config, true);
    eaconv::transfer_weights(source, target);
    eaconv::save_checkpoint(target, to_path);
    print_result({{"from", from_path},
                  {"to", to_path},
                  {"params", target.param_count()}});
    return 0;
}

int run_perturb(const std::string& spec_path, const std::string& in_path,
                const std::string& out_path) {
    const eaconv::PerturbSpec spec = eaconv::perturb_spec_from_json(read_json_file(spec_path));
    const eaconv::Dataset ds = eaconv::load_dataset(in_path);
    const eaconv::Dataset out = eaconv::perturb_dataset(ds, spec);
    eaconv::save_dataset(out, out_path);
    print_result({{"out", out_path},
                  {"kind", spec.kind},
                  {"n", out.size()},
                  {"spec", eaconv::perturb_spec_to_json(spec)}});
    return 0;
}

int run_evaluate(const std::string& ckpt_path, const std::string& data_path, int64_t batch) {
    const eaconv::Model model = eaconv::load_checkpoint(ckpt_path);
    const eaconv::Dataset ds = eaconv::load_dataset(data_path);
    const double acc = eaconv::evaluate(model, ds, batch);
    print_result({{"checkpoint", ckpt_path},
                  {"data", data_path},
                  {"n", ds.size()},
                  {"accuracy", acc}});
    return 0;
}

int run_sweep(const std::vector<std::string>& ckpt_paths, const std::string& data_path,
              const std::string& report_path, uint64_t seed) {
    const eaconv::Dataset ds = eaconv::load_dataset(data_path);
    std::vector<eaconv::Model> models;
    models.reserve(ckpt_paths.size());
    for (const auto& p : ckpt_paths) models.push_back(eaconv::load_checkpoint(p));
    std::vector<std::pair<std::string, const eaconv::Model*>> named;
    for (size_t i = 0; i < models.size(); ++i) {
        named.emplace_back(model_name_from_path(ckpt_paths[i]), &models[i]);
    }
    const eaconv::EvalReport report =
        eaconv::robustness_sweep(named, ds, eaconv::default_schedules(), seed);
    write_report(report, report_path);
    print_result({{"report", report_path},
                  {"json", report_json_path(report_path)},
                  {"rows", static_cast<int64_t>(report.rows.size())}});
    return 0;
}

int run_compare(const std::string& config_path, const std::string& report_path,
                const std::string& save_dir) {
    const json j = read_json_file(config_path);
    const eaconv::CompareConfig cfg = eaconv::compare_config_from_json(j);
    const eaconv::Dataset train_set = load_data_source(j.at("train_data"), "compare: train_data");
    const eaconv::Dataset test_set = load_data_source(j.at("test_data"), "compare: test_data");

    eaconv::CompareResult result = eaconv::compare_protocol(train_set, test_set, cfg);
    write_report(result.report, report_path);
    if (!save_dir.empty()) {
        std::filesystem::create_directories(save_dir);
        const std::filesystem::path dir(save_dir);
        eaconv::save_checkpoint(result.standard, (dir / "standard.ckpt").string());
        eaconv::save_checkpoint(result.data_aug, (dir / "data_aug.ckpt").string());
        eaconv::save_checkpoint(result.ea, (dir / "eaconv.ckpt").string());
    }
    json clean = json::object();
    json elastic = json::object();
    for (const char* name : {"standard", "data_aug", "eaconv"}) {
        clean[name] = result.report.accuracy_of("clean", 0.0, name);
        elastic[name] = result.report.mean_accuracy_of("elastic", name);
    }
    print_result({{"report", report_path},
                  {"json", report_json_path(report_path)},
                  {"transfer_check", result.transfer_check},
                  {"clean", clean},
                  {"elastic_mean", elastic}});
    return 0;
}

int run_gradcheck(uint64_t seed, int64_t instances, double tolerance) {
    const auto results = eaconv::run_gradient_suite(seed, instances, tolerance);
    json rows = json::array();
    bool all = true;
    for (const auto& r : results) {
        rows.push_back({{"op", r.op},
                        {"instances", r.instances},
                        {"max_rel_err", r.max_rel_err},
                        {"pass", r.pass}});
        all = all && r.pass;
    }
    print_result({{"results", rows}, {"pass", all}, {"tolerance", tolerance}});
    if (!all) throw std::runtime_error("gradient check failed");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"elastically augmented convolutions: basis banks, training, "
                 "perturbation robustness"};
    app.require_subcommand(1);
    std::function<int()> action;

    // --- gen-basis ---------------------------------------------------------
    std::string gb_config, gb_out;
    int64_t gb_k = 3, gb_nb = -1;
    double gb_sigma = 1.0, gb_alpha = 0.5;
    auto* gen_basis = app.add_subcommand("gen-basis", "Generate a basis bank as JSON");
    gen_basis->add_option("--config", gb_config, "BasisConfig JSON file (overrides flags)");
    gen_basis->add_option("--kernel-size", gb_k, "Odd kernel size (default 3)");
    gen_basis->add_option("--sigma", gb_sigma, "Gaussian scale in pixels (default 1.0)");
    gen_basis->add_option("--alpha", gb_alpha, "Elasticity of the default transforms (default 0.5)");
    gen_basis->add_option("--num-basis", gb_nb, "Basis count (default k*k)");
    gen_basis->add_option("--out", gb_out, "Output JSON path (default: stdout)");
    gen_basis->callback([&]() {
        action = [&]() { return run_gen_basis(gb_config, gb_k, gb_sigma, gb_alpha, gb_nb, gb_out); };
    });

    // --- render-basis ------------------------------------------------------
    std::string rb_config, rb_out;
    int64_t rb_k = 3, rb_nb = -1;
    double rb_sigma = 1.0, rb_alpha = 0.5;
    auto* render_basis =
        app.add_subcommand("render-basis", "Render every basis filter as an 8-bit PGM image");
    render_basis->add_option("--config", rb_config, "BasisConfig JSON file (overrides flags)");
    render_basis->add_option("--kernel-size", rb_k, "Odd kernel size (default 3)");
    render_basis->add_option("--sigma", rb_sigma, "Gaussian scale in pixels (default 1.0)");
    render_basis->add_option("--alpha", rb_alpha, "Elasticity of the default transforms (default 0.5)");
    render_basis->add_option("--num-basis", rb_nb, "Basis count (default k*k)");
    render_basis->add_option("--out", rb_out, "Output directory")->required();
    render_basis->callback([&]() {
        action = [&]() {
            return run_render_basis(rb_config, rb_k, rb_sigma, rb_alpha, rb_nb, rb_out);
        };
    });

    // --- gen-data ----------------------------------------------------------
    std::string gd_out;
    int64_t gd_size = 32, gd_classes = 4, gd_per_class = 500;
    uint64_t gd_seed = 7;
    std::vector<std::string> gd_cifar;
    auto* gen_data =
        app.add_subcommand("gen-data", "Generate a synthetic dataset (or convert CIFAR-10 binary)");
    gen_data->add_option("--out", gd_out, "Output dataset path")->required();
    gen_data->add_option("--size", gd_size, "Image size (default 32)");
    gen_data->add_option("--classes", gd_classes, "Number of classes, up to 4 (default 4)");
    gen_data->add_option("--per-class", gd_per_class, "Samples per class (default 500)");
    gen_data->add_option("--seed", gd_seed, "Generator seed (default 7)");
    gen_data->add_option("--cifar", gd_cifar,
                         "CIFAR-10 binary batch files to convert instead of generating");
    gen_data->callback([&]() {
        action = [&]() {
            return run_gen_data(gd_out, gd_size, gd_classes, gd_per_class, gd_seed, gd_cifar);
        };
    });

    // --- train -------------------------------------------------------------
    std::string tr_config, tr_out;
    auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
    train_cmd->add_option("--config", tr_config, "Config JSON: model, train, data, augmented")
        ->required();
    train_cmd->add_option("--out", tr_out, "Checkpoint output path")->required();
    train_cmd->callback([&]() {
        action = [&]() { return run_train(tr_config, tr_out); };
    });

    // --- transfer ----------------------------------------------------------
    std::string tf_from, tf_to;
    auto* transfer_cmd = app.add_subcommand(
        "transfer", "Initialize an elastically augmented model from a standard checkpoint");
    transfer_cmd->add_option("--from", tf_from, "Source (standard) checkpoint")->required();
    transfer_cmd->add_option("--to", tf_to, "Destination (augmented) checkpoint")->required();
    transfer_cmd->callback([&]() {
        action = [&]() { return run_transfer(tf_from, tf_to); };
    });

    // --- perturb -----------------------------------------------------------
    std::string pb_spec, pb_in, pb_out;
    auto* perturb_cmd = app.add_subcommand("perturb", "Apply a perturbation spec to a dataset");
    perturb_cmd->add_option("--spec", pb_spec, "PerturbSpec JSON file")->required();
    perturb_cmd->add_option("--in", pb_in, "Input dataset path")->required();
    perturb_cmd->add_option("--out", pb_out, "Output dataset path")->required();
    perturb_cmd->callback([&]() {
        action = [&]() { return run_perturb(pb_spec, pb_in, pb_out); };
    });

    // --- evaluate ----------------------------------------------------------
    std::string ev_ckpt, ev_data;
    int64_t ev_batch = 64;
    auto* eval_cmd = app.add_subcommand("evaluate", "Top-1 accuracy of a checkpoint on a dataset");
    eval_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
    eval_cmd->add_option("--data", ev_data, "Dataset path")->required();
    eval_cmd->add_option("--batch", ev_batch, "Evaluation batch size (default 64)");
    eval_cmd->callback([&]() {
        action = [&]() { return run_evaluate(ev_ckpt, ev_data, ev_batch); };
    });

    // --- sweep -------------------------------------------------------------
    std::vector<std::string> sw_ckpts;
    std::string sw_data, sw_report;
    uint64_t sw_seed = 2024;
    auto* sweep_cmd = app.add_subcommand(
        "sweep", "Evaluate checkpoints across the perturbation severity schedules");
    sweep_cmd->add_option("--ckpt", sw_ckpts, "Checkpoint path (repeatable)")->required();
    sweep_cmd->add_option("--data", sw_data, "Clean test dataset path")->required();
    sweep_cmd->add_option("--report", sw_report, "CSV report path (JSON written alongside)")
        ->required();
    sweep_cmd->add_option("--seed", sw_seed, "Perturbation seed (default 2024)");
    sweep_cmd->callback([&]() {
        action = [&]() { return run_sweep(sw_ckpts, sw_data, sw_report, sw_seed); };
    });

    // --- compare -----------------------------------------------------------
    std::string cp_config, cp_report, cp_save;
    auto* compare_cmd = app.add_subcommand(
        "compare", "Train standard / data-augmented / transfer-initialized models and sweep all");
    compare_cmd->add_option("--config", cp_config, "CompareConfig JSON with train_data/test_data")
        ->required();
    compare_cmd->add_option("--report", cp_report, "CSV report path (JSON written alongside)")
        ->required();
    compare_cmd->add_option("--save-dir", cp_save, "Directory for the three checkpoints");
    compare_cmd->callback([&]() {
        action = [&]() { return run_compare(cp_config, cp_report, cp_save); };
    });

    // --- gradcheck ---------------------------------------------------------
    uint64_t gc_seed = 2718;
    int64_t gc_instances = 20;
    double gc_tol = 1e-4;
    auto* gradcheck_cmd = app.add_subcommand(
        "gradcheck", "Verify every backward pass against central finite differences");
    gradcheck_cmd->add_option("--seed", gc_seed, "Instance seed (default 2718)");
    gradcheck_cmd->add_option("--instances", gc_instances, "Instances per op (default 20)");
    gradcheck_cmd->add_option("--tolerance", gc_tol, "Max relative error (default 1e-4)");
    gradcheck_cmd->callback([&]() {
        action = [&]() { return run_gradcheck(gc_seed, gc_instances, gc_tol); };
    });

    try {
        app.parse(argc, argv);
        return action ? action() : 0;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << json({{"error", e.what()}}).dump() << "\n";
        return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
    } catch (const std::exception& e) {
        std::cerr << json({{"error", e.what()}}).dump() << "\n";
        return 1;
    }
}
