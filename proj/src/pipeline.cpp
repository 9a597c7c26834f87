#include "ldpet/pipeline.hpp"

#include <cstdio>
#include <iomanip>
#include <sstream>

#include "ldpet/io/checkpoint.hpp"
#include "ldpet/io/tensor_file.hpp"

namespace ldpet::pipeline {

namespace fs = std::filesystem;

nlohmann::json RunConfig::stage1_section() const {
    return {{"jcp", jcp}, {"stage", stage}, {"train", stage1_train}, {"init_seed", seeds.init}};
}

nlohmann::json RunConfig::stage2_section() const {
    return {{"denoiser", denoiser},
            {"steps", diffusion_steps},
            {"beta", {beta.beta_min, beta.beta_max}},
            {"train", stage2_train},
            {"init_seed", seeds.init},
            {"stage1", io::hash_hex(io::config_hash(stage1_section()))}};
}

diffusion::DiffusionSchedule RunConfig::schedule() const { return diffusion::make_schedule(diffusion_steps, beta); }

void RunConfig::validate() const {
    jcp.validate();
    stage.validate();
    denoiser.validate();
    dcs.validate();
    if (denoiser.prior_length != jcp.prior_length || stage.prior_length != jcp.prior_length)
        throw PipelineError("config: prior length differs between jcp, transformer and denoiser");
    if (dataset.dose_fractions.empty()) throw PipelineError("config: no dose fractions");
    schedule();
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    nlohmann::json ds = c.dataset;
    j = {{"phantom_spec_path", c.phantom_spec_path},
         {"dataset", ds},
         {"jcp", c.jcp},
         {"stage", c.stage},
         {"stage1_train", c.stage1_train},
         {"denoiser", c.denoiser},
         {"diffusion_steps", c.diffusion_steps},
         {"beta", {{"min", c.beta.beta_min}, {"max", c.beta.beta_max}}},
         {"stage2_train", c.stage2_train},
         {"dcs", c.dcs},
         {"seeds", {{"dataset", c.seeds.dataset}, {"init", c.seeds.init}, {"sampler", c.seeds.sampler}}},
         {"output_dir", c.output_dir}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    c = RunConfig{};
    c.phantom_spec_path = j.value("phantom_spec_path", c.phantom_spec_path);
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<phantom::DatasetConfig>();
    if (j.contains("jcp")) c.jcp = j.at("jcp").get<jcp::JcpConfig>();
    if (j.contains("stage")) c.stage = j.at("stage").get<transformer::StageConfig>();
    if (j.contains("stage1_train")) c.stage1_train = j.at("stage1_train").get<transformer::TrainConfig>();
    if (j.contains("denoiser")) c.denoiser = j.at("denoiser").get<diffusion::DenoiserConfig>();
    c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
    if (j.contains("beta")) {
        c.beta.beta_min = j.at("beta").value("min", c.beta.beta_min);
        c.beta.beta_max = j.at("beta").value("max", c.beta.beta_max);
    }
    if (j.contains("stage2_train")) c.stage2_train = j.at("stage2_train").get<diffusion::TrainConfig>();
    if (j.contains("dcs")) c.dcs = j.at("dcs").get<dcs::DcsConfig>();
    if (j.contains("seeds")) {
        const auto& s = j.at("seeds");
        c.seeds.dataset = s.value("dataset", c.seeds.dataset);
        c.seeds.init = s.value("init", c.seeds.init);
        c.seeds.sampler = s.value("sampler", c.seeds.sampler);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
}

namespace {

nlohmann::json read_json(const fs::path& path) {
    const auto bytes = io::read_file(path);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw PipelineError("cannot parse " + path.string() + ": " + e.what());
    }
}

std::string index_name(std::size_t i) {
    std::ostringstream s;
    s << std::setw(3) << std::setfill('0') << i;
    return s.str();
}

const char* split_name(int split) { return split == 0 ? "train" : "test"; }

}  // namespace

RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) throw PipelineError("config: " + path.string() + " does not exist");
    RunConfig c = read_json(path).get<RunConfig>();
    if (!c.phantom_spec_path.empty()) {
        fs::path p = c.phantom_spec_path;
        if (p.is_relative()) p = path.parent_path() / p;
        if (!fs::exists(p)) throw PipelineError("config: phantom spec " + p.string() + " does not exist");
        c.dataset.base = read_json(p).get<phantom::PhantomSpec>();
        c.phantom_spec_path = p.string();
    }
    c.validate();
    return c;
}

phantom::Dataset make_dataset(const RunConfig& cfg) {
    auto dc = cfg.dataset;
    dc.seed = cfg.seeds.dataset;
    return phantom::make_dataset(dc);
}

std::string dose_tag(double fraction) {
    std::ostringstream s;
    s << "f" << std::setprecision(6) << fraction;
    return s.str();
}

ImageGrid grid_from(const numeric::Tensor<float>& t, double pixel_mm) {
    if (t.shape().size() != 2) throw PipelineError("expected a 2D image tensor");
    return ImageGrid(t.shape()[0], t.shape()[1], pixel_mm, t.vec());
}

numeric::Tensor<float> tensor_from(const ImageGrid& g) {
    return numeric::Tensor<float>({g.height(), g.width()}, std::vector<float>(g.values().begin(), g.values().end()));
}

void write_snapshot(const fs::path& dir, const RunConfig& cfg) {
    fs::create_directories(dir);
    const nlohmann::json j = cfg;
    io::write_text_atomic(dir / "config.json", j.dump(2) + "\n");
}

nlohmann::json read_snapshot(const fs::path& dir) {
    if (!fs::exists(dir / "config.json")) throw PipelineError("missing config snapshot in " + dir.string());
    return read_json(dir / "config.json");
}

void write_loss_csv(const fs::path& path, const std::vector<double>& loss) {
    std::string s = "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < loss.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, loss[i]);
        s += buf;
    }
    io::write_text_atomic(path, s);
}

void write_phantoms(const RunConfig& cfg, const fs::path& dir) {
    auto dc = cfg.dataset;
    dc.seed = cfg.seeds.dataset;
    nlohmann::json specs;
    for (int split = 0; split < 2; ++split) {
        const std::size_t n = split == 0 ? dc.n_train : dc.n_test;
        const fs::path sub = dir / "truth" / split_name(split);
        fs::create_directories(sub);
        specs[split_name(split)] = nlohmann::json::array();
        for (std::size_t i = 0; i < n; ++i) {
            const auto spec = phantom::randomize_spec(dc, split, i);
            io::save_tensor(tensor_from(phantom::generate_phantom(spec)), sub / (index_name(i) + ".dtmt"));
            specs[split_name(split)].push_back(spec);
        }
    }
    io::write_text_atomic(dir / "phantoms.json", specs.dump(2) + "\n");
    write_snapshot(dir, cfg);
}

void write_lowdose(const RunConfig& cfg, const fs::path& dir) {
    const auto snap = read_snapshot(dir);
    if (snap.at("dataset") != nlohmann::json(cfg).at("dataset") || snap.at("seeds") != nlohmann::json(cfg).at("seeds"))
        throw PipelineError("lowdose: phantom directory was generated with a different config");
    const double px = cfg.dataset.base.pixel_mm;
    for (int split = 0; split < 2; ++split) {
        const std::size_t n = split == 0 ? cfg.dataset.n_train : cfg.dataset.n_test;
        const fs::path sub = dir / "low" / split_name(split);
        fs::create_directories(sub);
        for (std::size_t i = 0; i < n; ++i) {
            const auto truth = grid_from(io::load_tensor(dir / "truth" / split_name(split) / (index_name(i) + ".dtmt")), px);
            for (std::size_t k = 0; k < cfg.dataset.dose_fractions.size(); ++k) {
                const phantom::DoseModel dose{cfg.dataset.dose_fractions[k], cfg.dataset.counts_scale, cfg.seeds.dataset};
                const std::uint64_t stream = (static_cast<std::uint64_t>(split) << 48) | (i << 8) | k;
                io::save_tensor(tensor_from(phantom::simulate_lowdose(truth, dose, stream)),
                                sub / (index_name(i) + "_" + dose_tag(dose.fraction) + ".dtmt"));
            }
        }
    }
}

phantom::Dataset load_dataset(const RunConfig& cfg, const fs::path& dir) {
    const auto snap = read_snapshot(dir);
    if (snap.at("dataset") != nlohmann::json(cfg).at("dataset") || snap.at("seeds") != nlohmann::json(cfg).at("seeds"))
        throw PipelineError("dataset: " + dir.string() + " was generated with a different config");
    const auto specs = read_json(dir / "phantoms.json");
    const double px = cfg.dataset.base.pixel_mm;
    phantom::Dataset ds;
    ds.dose_fractions = cfg.dataset.dose_fractions;
    for (int split = 0; split < 2; ++split) {
        auto& out = split == 0 ? ds.train : ds.test;
        const auto& list = specs.at(split_name(split));
        for (std::size_t i = 0; i < list.size(); ++i) {
            const auto truth = grid_from(io::load_tensor(dir / "truth" / split_name(split) / (index_name(i) + ".dtmt")), px);
            for (double f : cfg.dataset.dose_fractions) {
                const auto p = dir / "low" / split_name(split) / (index_name(i) + "_" + dose_tag(f) + ".dtmt");
                if (!fs::exists(p)) throw PipelineError("dataset: missing " + p.string() + " (run lowdose first)");
                out.push_back({list[i].get<phantom::PhantomSpec>(), truth, f, grid_from(io::load_tensor(p), px)});
            }
        }
    }
    return ds;
}

StageResult train_stage1(const RunConfig& cfg, const phantom::Dataset& ds, const StepCallback& on_step) {
    auto params = jcp::init_jcp(cfg.jcp, cfg.seeds.init);
    transformer::init_stage_into(params, cfg.stage, cfg.seeds.init + 1);
    auto r = transformer::train_transformer(transformer::pairs_from(ds.train), cfg.jcp, cfg.stage, std::move(params),
                                            cfg.stage1_train, on_step);
    return {std::move(r.params), std::move(r.loss_curve)};
}

std::vector<diffusion::PriorPair> prior_pairs(const RunConfig& cfg, const std::vector<phantom::Sample>& samples,
                                              const nn::ParamStore& stage1) {
    std::vector<diffusion::PriorPair> out;
    out.reserve(samples.size());
    for (const auto& s : samples)
        out.push_back({transformer::normalized_prior(s.truth, s.low, stage1, cfg.jcp),
                       transformer::normalized_condition(s.low, stage1, cfg.jcp)});
    return out;
}

StageResult train_stage2(const RunConfig& cfg, const phantom::Dataset& ds, const nn::ParamStore& stage1,
                         const StepCallback& on_step) {
    auto r = diffusion::train_diffusion(prior_pairs(cfg, ds.train, stage1), cfg.denoiser, cfg.schedule(),
                                        diffusion::init_denoiser(cfg.denoiser, cfg.seeds.init + 2), cfg.stage2_train,
                                        on_step);
    return {std::move(r.params), std::move(r.loss_curve)};
}

void save_stage(const fs::path& dir, const StageResult& r, const std::string& tag, const nlohmann::json& section,
                const RunConfig& cfg) {
    io::save_checkpoint(dir, r.params, tag, section);
    write_loss_csv(dir / "loss.csv", r.loss_curve);
    write_snapshot(dir, cfg);
}

nn::ParamStore load_stage1(const RunConfig& cfg, const fs::path& dir) {
    return io::load_checkpoint(dir, kStage1Tag, cfg.stage1_section()).params;
}

nn::ParamStore load_stage2(const RunConfig& cfg, const fs::path& dir) {
    return io::load_checkpoint(dir, kStage2Tag, cfg.stage2_section()).params;
}

Reconstruction reconstruct(const RunConfig& cfg, const nn::ParamStore& stage1, const nn::ParamStore& stage2,
                           const ImageGrid& low, double dose_fraction, bool use_dcs, std::uint64_t stream) {
    Reconstruction r;
    const auto cond = transformer::normalized_condition(low, stage1, cfg.jcp);
    r.prior = diffusion::sample_prior(cond, stage2, cfg.denoiser, cfg.schedule(),
                                      diffusion::initial_noise(cfg.jcp.prior_length, cfg.seeds.sampler, stream));
    r.f_hat = transformer::restore(low, r.prior, cfg.stage, stage1);
    if (use_dcs) {
        dcs::DcsModel model;
        model.dose_fraction = dose_fraction;
        model.counts_scale = cfg.dataset.counts_scale;
        if (cfg.dcs.data == dcs::DataMode::network) {
            model.zeta = dcs::network_degradation(stage1, cfg.stage, r.prior, low.height(), low.width(),
                                                  transformer::intensity_scale(low));
            model.y = r.f_hat;
        }
        r.dcs = dcs::run_dcs(low, r.f_hat, model, cfg.dcs, &r.dcs_report);
    }
    return r;
}

namespace {

std::size_t dose_index(const RunConfig& cfg, double f) {
    const auto& d = cfg.dataset.dose_fractions;
    for (std::size_t k = 0; k < d.size(); ++k)
        if (d[k] == f) return k;
    throw PipelineError("dose " + dose_tag(f) + " is not part of the configured dataset");
}

}  // namespace

void reconstruct_split(const RunConfig& cfg, const nn::ParamStore& stage1, const nn::ParamStore& stage2,
                       const phantom::Dataset& ds, double dose_fraction, bool use_dcs, const fs::path& dir) {
    const std::size_t k = dose_index(cfg, dose_fraction), nd = cfg.dataset.dose_fractions.size();
    const fs::path base = dir / dose_tag(dose_fraction);
    fs::create_directories(base / "fhat");
    if (use_dcs) fs::create_directories(base / "dcs");
    nlohmann::json reports = nlohmann::json::array();
    for (std::size_t i = 0; i * nd < ds.test.size(); ++i) {
        const auto& s = ds.test[i * nd + k];
        const auto r = reconstruct(cfg, stage1, stage2, s.low, dose_fraction, use_dcs, (i << 8) | k);
        io::save_tensor(tensor_from(r.f_hat), base / "fhat" / (index_name(i) + ".dtmt"));
        if (r.dcs) {
            io::save_tensor(tensor_from(*r.dcs), base / "dcs" / (index_name(i) + ".dtmt"));
            reports.push_back(r.dcs_report);
        }
    }
    if (use_dcs) io::write_text_atomic(base / "dcs_reports.json", reports.dump(2) + "\n");
    write_snapshot(dir, cfg);
}

Evaluation evaluate_split(const RunConfig& cfg, const phantom::Dataset& ds, double dose_fraction,
                          const fs::path& recon_dir) {
    const auto snap = read_snapshot(recon_dir);
    if (io::config_hash(snap) != io::config_hash(nlohmann::json(cfg)))
        throw PipelineError("evaluate: reconstruction snapshot in " + recon_dir.string() +
                            " does not match the run config");
    const std::size_t k = dose_index(cfg, dose_fraction), nd = cfg.dataset.dose_fractions.size();
    const double px = cfg.dataset.base.pixel_mm;
    const fs::path base = recon_dir / dose_tag(dose_fraction);
    if (!fs::exists(base / "fhat")) throw PipelineError("evaluate: no reconstructions at " + base.string());
    Evaluation e;
    e.dose_fraction = dose_fraction;
    const bool with_dcs = fs::exists(base / "dcs");
    for (std::size_t i = 0; i * nd < ds.test.size(); ++i) {
        const auto& s = ds.test[i * nd + k];
        const auto name = index_name(i) + ".dtmt";
        e.low.push_back(metrics::evaluate(s.low, s.truth, s.spec, dose_fraction, "low"));
        e.f_hat.push_back(metrics::evaluate(grid_from(io::load_tensor(base / "fhat" / name), px), s.truth, s.spec,
                                            dose_fraction, "f_hat"));
        if (with_dcs)
            e.dcs.push_back(metrics::evaluate(grid_from(io::load_tensor(base / "dcs" / name), px), s.truth, s.spec,
                                              dose_fraction, "f_hat+dcs"));
    }
    return e;
}

namespace {

nlohmann::json mean_of(const std::vector<metrics::MetricsReport>& rs) {
    if (rs.empty()) return nullptr;
    double psnr = 0, psnr_c = 0, ssim = 0, nrmse = 0, cov = 0;
    for (const auto& r : rs) {
        psnr += r.psnr;
        psnr_c += r.psnr_conventional;
        ssim += r.ssim;
        nrmse += r.nrmse;
        if (!r.cov.empty()) cov += r.cov.front();
    }
    const double n = double(rs.size());
    return {{"psnr", psnr / n},   {"psnr_conventional", psnr_c / n}, {"ssim", ssim / n},
            {"nrmse", nrmse / n}, {"cov_liver", cov / n},            {"count", rs.size()}};
}

}  // namespace

nlohmann::json summarize(const Evaluation& e) {
    return {{"dose_fraction", e.dose_fraction},
            {"low", mean_of(e.low)},
            {"f_hat", mean_of(e.f_hat)},
            {"f_hat+dcs", mean_of(e.dcs)}};
}

void to_json(nlohmann::json& j, const Evaluation& e) {
    j = {{"summary", summarize(e)}, {"low", e.low}, {"f_hat", e.f_hat}, {"f_hat+dcs", e.dcs}};
}

}  // namespace ldpet::pipeline
