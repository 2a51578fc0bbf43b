//! Command implementations behind the `gammaldm` binary. Every command
//! reads a flat key=value config (plus `--override` pairs), validates the
//! key set, runs, and writes its outputs together with the resolved config
//! and a manifest index under the output directory.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bench::{bench_throughput, write_throughput_csv};
use crate::config::RunConfig;
use crate::diffusion::{
    make_latent_dataset, train_diffusion, DiffusionModelSpec, DiffusionTrainConfig,
    DiffusionTrainSet, NoiseSchedule, ResolutionMode,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_classifier, evaluate_segmenter, train_classifier, train_segmenter,
    write_utility_csv, DownstreamTrainConfig, SegUNet, UtilityRow, ViewClassifier,
};
use crate::gamma::GammaParams;
use crate::phantom::{build_training_corpus, load_split, CorpusConfig};
use crate::rng::rng_from_seed;
use crate::sampler::{generate_dataset, load_generated, GenerativeModel, SolverKind};
use crate::spade::{DenoiserConfig, SpadeUnet};
use crate::vae::{
    fit_prior_gridsearch, load_vae_dir, save_vae_dir, train_vae, write_train_log, VaeConfig,
    VaeLossConfig, VaeTrainConfig,
};

pub const COMMANDS: [&str; 10] = [
    "phantom-gen",
    "fit-prior",
    "train-vae",
    "train-diffusion",
    "generate",
    "train-downstream",
    "eval",
    "bench",
    "order-probe",
    "report",
];

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    outputs: Vec<String>,
}

fn finish_run(out: &Path, command: &str, cfg: &RunConfig, seed: u64, outputs: Vec<String>) -> Result<()> {
    cfg.write_resolved(&out.join("resolved_config.txt"))?;
    let manifest = RunManifest {
        command,
        seed,
        outputs,
    };
    let f = std::fs::File::create(out.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
    Ok(())
}

/// Run one subcommand. Returns the outputs written (relative to `out`).
pub fn run_command(command: &str, cfg: &mut RunConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    std::fs::create_dir_all(out)?;
    crate::threads::init_threads();
    let outputs = match command {
        "phantom-gen" => cmd_phantom_gen(cfg, out, seed)?,
        "fit-prior" => cmd_fit_prior(cfg, out, seed)?,
        "train-vae" => cmd_train_vae(cfg, out, seed)?,
        "train-diffusion" => cmd_train_diffusion(cfg, out, seed)?,
        "generate" => cmd_generate(cfg, out, seed)?,
        "train-downstream" => cmd_train_downstream(cfg, out, seed)?,
        "eval" => cmd_eval(cfg, out, seed)?,
        "bench" => cmd_bench(cfg, out, seed)?,
        "order-probe" => cmd_order_probe(cfg, out, seed)?,
        "report" => cmd_report(cfg, out, seed)?,
        other => {
            return Err(Error::Config(format!(
                "unknown subcommand {other:?}; expected one of {}",
                COMMANDS.join(", ")
            )))
        }
    };
    finish_run(out, command, cfg, seed, outputs.clone())?;
    Ok(outputs)
}

/// Entry point used by the binary: load config, apply overrides, run, map
/// errors to a nonzero exit code.
pub fn cli(
    command: &str,
    config_path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> i32 {
    let mut cfg = match config_path {
        Some(p) => match RunConfig::from_file(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        },
        None => RunConfig::default(),
    };
    if let Err(e) = cfg.apply_overrides(overrides) {
        eprintln!("error: {e}");
        return 2;
    }
    let seed = seed.unwrap_or_else(|| cfg.u64_or("seed", 0).unwrap_or(0));
    cfg.set("seed", seed);
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(cfg.str_or("out", "runs/out")));
    match run_command(command, &mut cfg, &out_dir, seed) {
        Ok(files) => {
            println!("{command}: wrote {} outputs under {}", files.len(), out_dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_phantom_gen(cfg: &mut RunConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    cfg.validate_keys(&[
        "seed",
        "out",
        "corpus.train_patients",
        "corpus.val_patients",
        "corpus.test_patients",
        "corpus.variants",
        "corpus.resolution",
    ])?;
    let corpus = CorpusConfig {
        train_patients: cfg.usize_or("corpus.train_patients", 90)?,
        val_patients: cfg.usize_or("corpus.val_patients", 10)?,
        test_patients: cfg.usize_or("corpus.test_patients", 20)?,
        variants: cfg.usize_or("corpus.variants", 5)?,
        resolution: cfg.usize_or("corpus.resolution", 64)?,
        seed,
        ..Default::default()
    };
    let counts = build_training_corpus(&corpus, out)?;
    for (split, n) in &counts {
        log::info!("{split}: {n} records");
    }
    Ok(crate::phantom::SPLITS.iter().map(|s| s.to_string()).collect())
}

fn load_records(cfg: &RunConfig, key_root: &str, key_split: &str, default_split: &str) -> Result<Vec<crate::phantom::DatasetRecord>> {
    let root = PathBuf::from(cfg.require_str(key_root)?);
    let split = cfg.str_or(key_split, default_split);
    load_split(&root, split)
}

fn cmd_fit_prior(cfg: &mut RunConfig, out: &Path, _seed: u64) -> Result<Vec<String>> {
    cfg.validate_keys(&[
        "seed",
        "out",
        "data.root",
        "data.split",
        "prior.alpha_grid",
        "prior.beta_grid",
    ])?;
    let records = load_records(cfg, "data.root", "data.split", "train")?;
    let alpha_grid = cfg.f64_list_or(
        "prior.alpha_grid",
        &[1.5, 2.0, 2.5, 3.0, 3.25, 3.5, 3.75, 4.0, 4.5, 5.0, 6.0],
    )?;
    let beta_grid = cfg.f64_list_or(
        "prior.beta_grid",
        &[4.0, 6.0, 8.0, 9.0, 10.0, 10.8, 12.0, 14.0, 18.0],
    )?;
    let prior = fit_prior_gridsearch(&records, &alpha_grid, &beta_grid)?;
    let f = std::fs::File::create(out.join("prior.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &prior)?;
    println!("fitted prior: alpha={}, beta={}", prior.alpha(), prior.beta());
    Ok(vec!["prior.json".to_string()])
}

fn read_prior(cfg: &RunConfig) -> Result<GammaParams> {
    if let Some(path) = cfg.get_str("loss.prior_file") {
        let p: GammaParams = serde_json::from_reader(std::fs::File::open(path)?)?;
        return Ok(p);
    }
    GammaParams::new(
        cfg.f64_or("loss.prior_alpha", 3.75)?,
        cfg.f64_or("loss.prior_beta", 10.8)?,
    )
}

fn cmd_train_vae(cfg: &mut RunConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    cfg.validate_keys(&[
        "seed",
        "out",
        "data.root",
        "data.split",
        "vae.levels",
        "vae.width_unit",
        "loss.lambda1",
        "loss.lambda2",
        "loss.lambda3",
        "loss.lambda4",
        "loss.prior_file",
        "loss.prior_alpha",
        "loss.prior_beta",
        "train.epochs",
        "train.batch_size",
        "train.lr",
    ])?;
    let records = load_records(cfg, "data.root", "data.split", "train")?;
    let vae_cfg = VaeConfig {
        levels: cfg.usize_or("vae.levels", 2)?,
        width_unit: cfg.usize_or("vae.width_unit", 64)?,
        init_seed: seed ^ 0xA5,
    };
    let loss_cfg = VaeLossConfig {
        lambda1: cfg.f64_or("loss.lambda1", 1.0)?,
        lambda2: cfg.f64_or("loss.lambda2", 0.5)?,
        lambda3: cfg.f64_or("loss.lambda3", 1e-3)?,
        lambda4: cfg.f64_or("loss.lambda4", 1.0)?,
        prior: read_prior(cfg)?,
    };
    let train_cfg = VaeTrainConfig {
        epochs: cfg.usize_or("train.epochs", 20)?,
        batch_size: cfg.usize_or("train.batch_size", 12)?,
        lr: cfg.f64_or("train.lr", 1e-4)?,
        seed,
        augment: crate::vae::AugmentPolicy::full(),
    };
    let (vae, logs) = train_vae(&records, vae_cfg, &loss_cfg, &train_cfg)?;
    save_vae_dir(&vae, out)?;
    write_train_log(&out.join("train_log.csv"), &logs)?;
    Ok(vec![
        "vae_config.json".to_string(),
        "vae.ckpt".to_string(),
        "train_log.csv".to_string(),
    ])
}

fn schedule_from_cfg(cfg: &RunConfig, sigma_data: f64) -> Result<NoiseSchedule> {
    Ok(match cfg.str_or("model.schedule", "edm") {
        "edm" => NoiseSchedule::edm_default(sigma_data),
        "ve" => NoiseSchedule::ve_default(sigma_data),
        "vp" => NoiseSchedule::vp_default(),
        other => {
            return Err(Error::Config(format!(
                "model.schedule must be edm|ve|vp, got {other:?}"
            )))
        }
    })
}

fn cmd_train_diffusion(cfg: &mut RunConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    cfg.validate_keys(&[
        "seed",
        "out",
        "data.root",
        "data.split",
        "model.id",
        "model.mode",
        "model.schedule",
        "model.vae_dir",
        "denoiser.levels",
        "denoiser.base_channels",
        "denoiser.spade_everywhere",
        "denoiser.sigma_embedding_dim",
        "denoiser.spade_hidden",
        "train.steps",
        "train.batch_size",
        "train.lr",
    ])?;
    let records = load_records(cfg, "data.root", "data.split", "train")?;
    let mode = match cfg.str_or("model.mode", "full") {
        "full" => ResolutionMode::Full256,
        "latent128" => ResolutionMode::Latent128,
        "latent64" => ResolutionMode::Latent64,
        other => {
            return Err(Error::Config(format!(
                "model.mode must be full|latent128|latent64, got {other:?}"
            )))
        }
    };
    let vae_dir = cfg.get_str("model.vae_dir").map(PathBuf::from);
    let (set, vae_dir_used) = match mode {
        ResolutionMode::Full256 => (DiffusionTrainSet::Pixel(records), None),
        _ => {
            let dir = vae_dir.ok_or_else(|| {
                Error::Config("latent modes require model.vae_dir".to_string())
            })?;
            let vae = load_vae_dir(&dir)?;
            let expect = mode.vae_levels().unwrap();
            if vae.cfg.levels != expect {
                return Err(Error::Config(format!(
                    "VAE has {} levels but mode needs {expect}",
                    vae.cfg.levels
                )));
            }
            (
                DiffusionTrainSet::Latent(make_latent_dataset(&vae, &records)?),
                Some(dir),
            )
        }
    };
    let sigma_data = set.estimate_sigma_data();
    let schedule = schedule_from_cfg(cfg, sigma_data)?;
    let default_levels = if matches!(mode, ResolutionMode::Full256) { 3 } else { 2 };
    let den_cfg = DenoiserConfig {
        levels: cfg.usize_or("denoiser.levels", default_levels)?,
        base_channels: cfg.usize_or("denoiser.base_channels", 32)?,
        spade_everywhere: cfg.bool_or("denoiser.spade_everywhere", true)?,
        sigma_embedding_dim: cfg.usize_or("denoiser.sigma_embedding_dim", 16)?,
        spade_hidden: cfg.usize_or("denoiser.spade_hidden", 16)?,
        label_channels: crate::sector::NUM_LABELS,
        sigma_data,
    };
    let mut rng = rng_from_seed(seed ^ 0xD1FF);
    let net = SpadeUnet::<f32>::new(&mut rng, den_cfg.clone())?;
    let train_cfg = DiffusionTrainConfig {
        steps: cfg.usize_or("train.steps", 2000)?,
        batch_size: cfg.usize_or("train.batch_size", 8)?,
        lr: cfg.f64_or("train.lr", 1e-4)?,
        seed,
        augment_geometric: true,
    };
    let losses = train_diffusion(&net, &set, &schedule, &train_cfg)?;
    let spec = DiffusionModelSpec {
        model_id: cfg.str_or("model.id", "model").to_string(),
        resolution_mode: mode,
        schedule,
        denoiser: den_cfg,
        vae_checkpoint: vae_dir_used,
    };
    let model = GenerativeModel {
        spec,
        denoiser: net,
        vae: None,
    };
    model.save(out)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, l));
    }
    std::fs::write(out.join("train_loss.csv"), csv)?;
    Ok(vec![
        "model_spec.json".to_string(),
        "denoiser.ckpt".to_string(),
        "train_loss.csv".to_string(),
    ])
}

fn cmd_generate(cfg: &mut RunConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    cfg.validate_keys(&[
        "seed",
        "out",
        "model.dir",
        "data.root",
        "data.split",
        "gen.solver",
        "gen.nfe",
        "gen.count",
        "gen.batch",
    ])?;
    let model = GenerativeModel::load(Path::new(cfg.require_str("model.dir")?))?;
    let mut sources = load_records(cfg, "data.root", "data.split", "train")?;
    let count = cfg.usize_or("gen.count", sources.len())?;
    sources.truncate(count.max(1));
    let solver = match cfg.str_or("gen.solver", "euler") {
        "euler" => SolverKind::Euler,
        "heun" => SolverKind::Heun,
        other => return Err(Error::Config(format!("gen.solver must be euler|heun, got {other:?}"))),
    };
    let nfe = cfg.usize_list_or("gen.nfe", &[2, 10, 50])?;
    let gen_batch = cfg.usize_or("gen.batch", 8)?;
    let manifests = generate_dataset(&model, &sources, solver, &nfe, seed, gen_batch, out)?;
    Ok(manifests
        .iter()
        .map(|m| format!("{}_nfe{:04}", m.model_id, m.nfe))
        .collect())
}

fn downstream_cfg(cfg: &RunConfig, seed: u64) -> Result<DownstreamTrainConfig> {
    Ok(DownstreamTrainConfig {
        steps: cfg.usize_or("downstream.steps", 600)?,
        batch_size: cfg.usize_or("downstream.batch_size", 8)?,
        lr: cfg.f64_or("downstream.lr", 1e-4)?,
        seed,
        levels: cfg.usize_or("downstream.levels", 3)?,
        base_channels: cfg.usize_or("downstream.base_channels", 8)?,
        augment: crate::vae::AugmentPolicy::full(),
        bootstrap_iterations: cfg.usize_or("downstream.bootstrap_iterations", 1000)?,
        bootstrap_fraction: cfg.f64_or("downstream.bootstrap_fraction", 0.8)?,
    })
}

const DOWNSTREAM_KEYS: [&str; 8] = [
    "downstream.steps",
    "downstream.batch_size",
    "downstream.lr",
    "downstream.levels",
    "downstream.base_channels",
    "downstream.bootstrap_iterations",
    "downstream.bootstrap_fraction",
    "task",
];

fn cmd_train_downstream(cfg: &mut RunConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    let mut keys = vec![
        "seed",
        "out",
        "data.root",
        "data.split",
        "data.train_dir",
        "data.train_kind",
    ];
    keys.extend(DOWNSTREAM_KEYS);
    cfg.validate_keys(&keys)?;
    let test = load_records(cfg, "data.root", "data.split", "test")?;
    let kind = cfg.str_or("data.train_kind", "generated").to_string();
    let (train, cell_info) = match kind.as_str() {
        "generated" => {
            let dir = PathBuf::from(cfg.require_str("data.train_dir")?);
            let (manifest, recs) = load_generated(&dir)?;
            (recs, Some((manifest.model_id, manifest.nfe as usize)))
        }
        "phantom" => {
            let root = PathBuf::from(cfg.require_str("data.root")?);
            (load_split(&root, "train")?, None)
        }
        other => {
            return Err(Error::Config(format!(
                "data.train_kind must be generated|phantom, got {other:?}"
            )))
        }
    };
    let dcfg = downstream_cfg(cfg, seed)?;
    let task = cfg.str_or("task", "both").to_string();
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    if task == "seg" || task == "both" {
        let (net, _) = train_segmenter(&train, &dcfg)?;
        crate::checkpoint::save(&out.join("seg.ckpt"), &net.named_params())?;
        outputs.push("seg.ckpt".to_string());
        let ev = evaluate_segmenter(&net, &test, &dcfg)?;
        reports.extend(ev.reports);
    }
    if task == "cls" || task == "both" {
        let (net, _) = train_classifier(&train, &dcfg)?;
        crate::checkpoint::save(&out.join("cls.ckpt"), &net.named_params())?;
        outputs.push("cls.ckpt".to_string());
        reports.push(evaluate_classifier(&net, &test, &dcfg)?);
    }
    let f = std::fs::File::create(out.join("metrics.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &reports)?;
    outputs.push("metrics.json".to_string());
    if let Some((model_id, nfe)) = cell_info {
        let rows: Vec<UtilityRow> = reports
            .iter()
            .map(|r| UtilityRow {
                model: model_id.clone(),
                nfe,
                metric: r.metric.clone(),
                mean: r.bootstrap_mean,
                std: r.bootstrap_std,
            })
            .collect();
        let f = std::fs::File::create(out.join("utility_rows.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &rows)?;
        outputs.push("utility_rows.json".to_string());
    }
    Ok(outputs)
}

fn cmd_eval(cfg: &mut RunConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    let mut keys = vec![
        "seed",
        "out",
        "data.root",
        "data.split",
        "eval.seg_checkpoint",
        "eval.cls_checkpoint",
    ];
    keys.extend(DOWNSTREAM_KEYS);
    cfg.validate_keys(&keys)?;
    let test = load_records(cfg, "data.root", "data.split", "test")?;
    let dcfg = downstream_cfg(cfg, seed)?;
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    if let Some(p) = cfg.get_str("eval.seg_checkpoint") {
        let mut rng = rng_from_seed(0);
        let net = SegUNet::<f32>::new(&mut rng, dcfg.levels, dcfg.base_channels, crate::sector::NUM_LABELS);
        crate::checkpoint::load_into(Path::new(p), &net.named_params())?;
        let ev = evaluate_segmenter(&net, &test, &dcfg)?;
        reports.extend(ev.reports);
    }
    if let Some(p) = cfg.get_str("eval.cls_checkpoint") {
        let mut rng = rng_from_seed(0);
        let net = ViewClassifier::<f32>::new(&mut rng, dcfg.base_channels);
        crate::checkpoint::load_into(Path::new(p), &net.named_params())?;
        reports.push(evaluate_classifier(&net, &test, &dcfg)?);
    }
    if reports.is_empty() {
        return Err(Error::Config(
            "eval needs eval.seg_checkpoint and/or eval.cls_checkpoint".to_string(),
        ));
    }
    let f = std::fs::File::create(out.join("metrics.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &reports)?;
    outputs.push("metrics.json".to_string());
    Ok(outputs)
}

fn cmd_bench(cfg: &mut RunConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    cfg.validate_keys(&[
        "seed",
        "out",
        "data.root",
        "data.split",
        "bench.model_dirs",
        "bench.reference",
        "bench.solver",
        "bench.nfe",
        "bench.batch",
        "bench.repeats",
    ])?;
    let dirs = cfg.str_list_or("bench.model_dirs", &[]);
    if dirs.is_empty() {
        return Err(Error::Config("bench.model_dirs is required".to_string()));
    }
    let models: Vec<GenerativeModel<f32>> = dirs
        .iter()
        .map(|d| GenerativeModel::load(Path::new(d)))
        .collect::<Result<_>>()?;
    let model_refs: Vec<&GenerativeModel<f32>> = models.iter().collect();
    let sources = load_records(cfg, "data.root", "data.split", "test")?;
    let solver = match cfg.str_or("bench.solver", "euler") {
        "euler" => SolverKind::Euler,
        "heun" => SolverKind::Heun,
        other => return Err(Error::Config(format!("bench.solver must be euler|heun, got {other:?}"))),
    };
    let reference = cfg
        .str_or("bench.reference", &models[0].spec.model_id)
        .to_string();
    let nfe = cfg.usize_list_or("bench.nfe", &[2, 5, 10, 20])?;
    let records = bench_throughput(
        &model_refs,
        &reference,
        &sources,
        solver,
        &nfe,
        cfg.usize_or("bench.batch", 4)?,
        cfg.usize_or("bench.repeats", 3)?,
        seed,
    )?;
    write_throughput_csv(&out.join("throughput.csv"), &records)?;
    let f = std::fs::File::create(out.join("throughput.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &records)?;
    Ok(vec!["throughput.csv".to_string(), "throughput.json".to_string()])
}

fn cmd_order_probe(cfg: &mut RunConfig, out: &Path, _seed: u64) -> Result<Vec<String>> {
    cfg.validate_keys(&[
        "seed",
        "out",
        "probe.solver",
        "probe.schedule",
        "probe.steps",
        "probe.sigma_data",
    ])?;
    let sigma_data = cfg.f64_or("probe.sigma_data", 0.5)?;
    let schedule = match cfg.str_or("probe.schedule", "edm") {
        "edm" => NoiseSchedule::edm_default(sigma_data),
        "ve" => NoiseSchedule::ve_default(sigma_data),
        "vp" => NoiseSchedule::vp_default(),
        other => return Err(Error::Config(format!("probe.schedule must be edm|ve|vp, got {other:?}"))),
    };
    let steps = cfg.usize_list_or("probe.steps", &[10, 20, 40, 80, 160])?;
    let solvers: Vec<SolverKind> = match cfg.str_or("probe.solver", "both") {
        "euler" => vec![SolverKind::Euler],
        "heun" => vec![SolverKind::Heun],
        "both" => vec![SolverKind::Euler, SolverKind::Heun],
        other => return Err(Error::Config(format!("probe.solver must be euler|heun|both, got {other:?}"))),
    };
    let mut csv = String::from("solver,order\n");
    for kind in solvers {
        let order = crate::sampler::solver_order_probe(kind, &schedule, &steps)?;
        println!("{kind:?} fitted global order: {order:.3}");
        csv.push_str(&format!("{},{}\n", format!("{kind:?}").to_lowercase(), order));
    }
    std::fs::write(out.join("order.csv"), csv)?;
    Ok(vec!["order.csv".to_string()])
}

fn cmd_report(cfg: &mut RunConfig, out: &Path, _seed: u64) -> Result<Vec<String>> {
    cfg.validate_keys(&["seed", "out", "results.dir"])?;
    let results = PathBuf::from(cfg.require_str("results.dir")?);
    let mut rows: Vec<UtilityRow> = Vec::new();
    let mut stack = vec![results];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()) == Some("utility_rows.json") {
                let extra: Vec<UtilityRow> =
                    serde_json::from_reader(std::fs::File::open(&path)?)?;
                rows.extend(extra);
            } else if path.file_name().and_then(|n| n.to_str()) == Some("throughput.json") {
                let recs: Vec<crate::bench::ThroughputRecord> =
                    serde_json::from_reader(std::fs::File::open(&path)?)?;
                for r in recs {
                    rows.push(UtilityRow {
                        model: r.model_id.clone(),
                        nfe: r.nfe,
                        metric: "throughput".to_string(),
                        mean: r.images_per_sec,
                        std: 0.0,
                    });
                    if let Some(rel) = r.relative_throughput {
                        rows.push(UtilityRow {
                            model: r.model_id,
                            nfe: r.nfe,
                            metric: "relative_throughput".to_string(),
                            mean: rel,
                            std: 0.0,
                        });
                    }
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.model, a.nfe, &a.metric)
            .cmp(&(&b.model, b.nfe, &b.metric))
    });
    rows.dedup_by(|a, b| a.model == b.model && a.nfe == b.nfe && a.metric == b.metric);
    write_utility_csv(&out.join("report.csv"), &rows)?;
    Ok(vec!["report.csv".to_string()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_rejected() {
        let mut cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let err = run_command("frobnicate", &mut cfg, dir.path(), 0).unwrap_err();
        assert!(err.to_string().contains("unknown subcommand"));
    }

    #[test]
    fn bad_config_key_rejected_with_listing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::parse("corpus.nonsense=1\n").unwrap();
        let err = run_command("phantom-gen", &mut cfg, dir.path(), 0).unwrap_err();
        assert!(err.to_string().contains("corpus.nonsense"), "{err}");
    }

    #[test]
    fn phantom_gen_writes_corpus_and_resolved_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::parse(
            "corpus.train_patients=1\ncorpus.val_patients=0\ncorpus.test_patients=1\ncorpus.variants=1\ncorpus.resolution=32\n",
        )
        .unwrap();
        run_command("phantom-gen", &mut cfg, dir.path(), 5).unwrap();
        assert!(dir.path().join("train/manifest.json").exists());
        assert!(dir.path().join("resolved_config.txt").exists());
        assert!(dir.path().join("manifest.json").exists());
        let records = load_split(dir.path(), "train").unwrap();
        assert_eq!(records.len(), 1 * 2 * 2 * 2);
    }
}
