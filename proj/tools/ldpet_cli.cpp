#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <limits>
#include <filesystem>
#include <iostream>
#include <string>

#include "ldpet/gradient_suite.hpp"
#include "ldpet/io/checkpoint.hpp"
#include "ldpet/io/png.hpp"
#include "ldpet/io/tensor_file.hpp"
#include "ldpet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ldpet;

namespace {

pipeline::RunConfig resolve(const std::string& path) {
    if (path.empty()) return pipeline::RunConfig{};
    return pipeline::load_run_config(path);
}

fs::path or_default(const std::string& given, const pipeline::RunConfig& cfg, const char* sub) {
    return given.empty() ? fs::path(cfg.output_dir) / sub : fs::path(given);
}

pipeline::StepCallback progress(const char* tag, std::size_t total) {
    const std::size_t every = std::max<std::size_t>(1, total / 20);
    return [tag, every, total](std::size_t step, double loss) {
        if (step % every == 0 || step + 1 == total) std::fprintf(stderr, "[%s] step %zu/%zu loss %.6g\n", tag, step + 1, total, loss);
    };
}

ImageGrid load_grid(const std::string& path, double pixel_mm) {
    return pipeline::grid_from(io::load_tensor(path), pixel_mm);
}

// Same sentinel as the metrics report: +inf PSNR becomes DBL_MAX.
double json_number(double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::max(); }

void print_json(const nlohmann::json& j, const std::string& out) {
    if (out.empty())
        std::cout << j.dump(2) << "\n";
    else
        io::write_text_atomic(out, j.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-dose PET restoration pipeline on synthetic phantoms"};
    app.require_subcommand(1);
    std::string config, data, out, stage1, stage2, recon, input, reference;
    std::vector<std::string> inputs;
    double dose = 0.0;
    bool use_dcs = true, mip = false, symmetric = false;
    std::vector<double> window;
    std::uint64_t seed = 0;

    auto* phantom_cmd = app.add_subcommand("phantom", "Generate ground-truth phantoms");
    auto* lowdose_cmd = app.add_subcommand("lowdose", "Simulate low-dose realizations for every configured dose");
    auto* train1_cmd = app.add_subcommand("train-transformer", "Train the JCP extractor and transformer jointly");
    auto* train2_cmd = app.add_subcommand("train-diffusion", "Train the prior-space denoiser with a frozen JCP");
    auto* recon_cmd = app.add_subcommand("reconstruct", "Sampler, U-net and optional DCS on held-out inputs");
    auto* eval_cmd = app.add_subcommand("evaluate", "Metrics for low, f_hat and f_hat+DCS against truth");
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    auto* png_cmd = app.add_subcommand("export-png", "Write an 8-bit grayscale PNG");

    for (auto* c : {phantom_cmd, lowdose_cmd, train1_cmd, train2_cmd, recon_cmd, eval_cmd})
        c->add_option("--config", config, "Run config (JSON)")->check(CLI::ExistingFile);
    for (auto* c : {phantom_cmd, lowdose_cmd, train1_cmd, train2_cmd, recon_cmd, eval_cmd})
        c->add_option("--data", data, "Dataset directory (default <output_dir>/data)");
    train1_cmd->add_option("--out", out, "Checkpoint directory (default <output_dir>/stage1)");
    train2_cmd->add_option("--stage1", stage1, "Stage-1 checkpoint (default <output_dir>/stage1)");
    train2_cmd->add_option("--out", out, "Checkpoint directory (default <output_dir>/stage2)");
    for (auto* c : {recon_cmd}) {
        c->add_option("--stage1", stage1, "Stage-1 checkpoint");
        c->add_option("--stage2", stage2, "Diffusion checkpoint");
        c->add_option("--out", out, "Reconstruction directory (default <output_dir>/recon)");
        c->add_option("--input", input, "Single low-dose tensor instead of the test split");
        c->add_option("--output", reference, "Output tensor for --input (f_hat, or f_hat+DCS)");
    }
    recon_cmd->add_option("--dose", dose, "Dose fraction")->required();
    recon_cmd->add_flag("--use-dcs,!--no-dcs", use_dcs, "Run the data-consistency stage (default on)");
    eval_cmd->add_option("--recon", recon, "Reconstruction directory (default <output_dir>/recon)");
    eval_cmd->add_option("--dose", dose, "Dose fraction");
    eval_cmd->add_option("--input", input, "Single image tensor (pair mode)");
    eval_cmd->add_option("--reference", reference, "Reference tensor (pair mode)");
    eval_cmd->add_option("--out", out, "Report path (default stdout)");
    grad_cmd->add_option("--seed", seed, "Seed for random instances");
    png_cmd->add_option("--input", inputs, "Tensor file(s); several form a stack")->required();
    png_cmd->add_option("--out", out, "PNG path")->required();
    png_cmd->add_option("--window", window, "lo hi")->expected(2);
    png_cmd->add_flag("--symmetric", symmetric, "Window [-max|x|, max|x|] for residuals");
    png_cmd->add_flag("--mip", mip, "Maximum projection over the stack");
    png_cmd->add_option("--reference", reference, "Subtract this tensor first (residual panel)");

    CLI11_PARSE(app, argc, argv);

    std::string stage = "config";
    try {
        const auto cfg = resolve(config);
        const fs::path data_dir = or_default(data, cfg, "data");

        if (phantom_cmd->parsed()) {
            stage = "phantom";
            pipeline::write_phantoms(cfg, data_dir);
            std::cerr << "[phantom] wrote " << cfg.dataset.n_train << " train and " << cfg.dataset.n_test
                      << " test phantoms to " << data_dir << "\n";
        } else if (lowdose_cmd->parsed()) {
            stage = "lowdose";
            pipeline::write_lowdose(cfg, data_dir);
            std::cerr << "[lowdose] wrote " << cfg.dataset.dose_fractions.size() << " dose levels to " << data_dir << "\n";
        } else if (train1_cmd->parsed()) {
            stage = "train-transformer";
            const auto ds = pipeline::load_dataset(cfg, data_dir);
            const auto r = pipeline::train_stage1(cfg, ds, progress("train-transformer", cfg.stage1_train.steps));
            pipeline::save_stage(or_default(out, cfg, "stage1"), r, pipeline::kStage1Tag, cfg.stage1_section(), cfg);
        } else if (train2_cmd->parsed()) {
            stage = "train-diffusion";
            const auto ds = pipeline::load_dataset(cfg, data_dir);
            const auto p1 = pipeline::load_stage1(cfg, or_default(stage1, cfg, "stage1"));
            const auto r = pipeline::train_stage2(cfg, ds, p1, progress("train-diffusion", cfg.stage2_train.steps));
            pipeline::save_stage(or_default(out, cfg, "stage2"), r, pipeline::kStage2Tag, cfg.stage2_section(), cfg);
        } else if (recon_cmd->parsed()) {
            stage = "reconstruct";
            const auto p1 = pipeline::load_stage1(cfg, or_default(stage1, cfg, "stage1"));
            const auto p2 = pipeline::load_stage2(cfg, or_default(stage2, cfg, "stage2"));
            if (!input.empty()) {
                if (reference.empty()) throw std::runtime_error("--input needs --output");
                const auto low = load_grid(input, cfg.dataset.base.pixel_mm);
                const auto r = pipeline::reconstruct(cfg, p1, p2, low, dose, use_dcs, 0);
                io::save_tensor(pipeline::tensor_from(r.dcs ? *r.dcs : r.f_hat), reference);
            } else {
                const auto ds = pipeline::load_dataset(cfg, data_dir);
                pipeline::reconstruct_split(cfg, p1, p2, ds, dose, use_dcs, or_default(out, cfg, "recon"));
            }
        } else if (eval_cmd->parsed()) {
            stage = "evaluate";
            if (!input.empty() || !reference.empty()) {
                if (input.empty() || reference.empty()) throw std::runtime_error("pair mode needs --input and --reference");
                const auto x = load_grid(input, cfg.dataset.base.pixel_mm);
                const auto y = load_grid(reference, cfg.dataset.base.pixel_mm);
                print_json({{"psnr", json_number(metrics::psnr(x, y))},
                            {"psnr_conventional", json_number(metrics::psnr_conventional(x, y))},
                            {"ssim", metrics::ssim(x, y)},
                            {"nrmse", metrics::nrmse(x, y)}},
                           out);
            } else {
                const auto ds = pipeline::load_dataset(cfg, data_dir);
                const auto e = pipeline::evaluate_split(cfg, ds, dose, or_default(recon, cfg, "recon"));
                print_json(e, out);
                std::cerr << pipeline::summarize(e).dump(2) << "\n";
            }
        } else if (grad_cmd->parsed()) {
            stage = "gradcheck";
            bool ok = true;
            for (const auto& e : run_gradient_suite(seed)) {
                std::printf("%-28s max_rel_err %.3e tol %.0e checked %6zu %s\n", e.name.c_str(), e.max_relative_error,
                            e.tolerance, e.checked, e.passed ? "PASS" : "FAIL");
                ok = ok && e.passed;
            }
            return ok ? 0 : 1;
        } else if (png_cmd->parsed()) {
            stage = "export-png";
            const double px = 1.0;
            std::vector<ImageGrid> stack;
            for (const auto& p : inputs) stack.push_back(load_grid(p, px));
            if (stack.size() > 1 && !mip) throw std::runtime_error("several inputs need --mip");
            ImageGrid img = mip ? io::mip(stack) : stack.front();
            if (!reference.empty()) img = io::residual(img, load_grid(reference, px));
            io::Window w = io::Window::of(img);
            if (symmetric) w = io::Window::symmetric(img);
            if (!window.empty()) w = {window[0], window[1]};
            io::export_png(img, w, out);
        }
    } catch (const std::exception& e) {
        std::cerr << "[" << stage << "] error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
