//! Throughput benchmarking: images per second vs NFE, with relative
//! throughput against a named reference model at the same NFE.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::DatasetRecord;
use crate::rng::derive_rng;
use crate::sampler::{initial_noise, sample, GenerativeModel, SolverConfig, SolverKind};
use crate::sector::SemanticMap;
use crate::spade::one_hot_batch;
use crate::tensor::no_grad;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThroughputRecord {
    pub model_id: String,
    pub nfe: usize,
    pub batch: usize,
    pub images_per_sec: f64,
    /// this model's throughput / reference model's throughput at equal NFE
    pub relative_throughput: Option<f64>,
    pub threads: usize,
    pub repeats: usize,
}

/// Time one full generation pass (sampling plus VAE decode for latent
/// models) for `batch` images; returns seconds.
fn timed_generation(
    model: &GenerativeModel<f32>,
    sources: &[DatasetRecord],
    solver: SolverKind,
    n_steps: usize,
    seed: u64,
    batch: usize,
) -> Result<f64> {
    let full_res = sources[0].h;
    let factor = model.spec.resolution_mode.latent_factor();
    let res = full_res / factor;
    let maps: Vec<SemanticMap> = (0..batch)
        .map(|i| {
            let m = &sources[i % sources.len()].map;
            if factor == 1 {
                Ok(m.clone())
            } else {
                m.downsample_nearest(factor)
            }
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&SemanticMap> = maps.iter().collect();
    let phi = one_hot_batch::<f32>(&refs, model.denoiser.cfg.label_channels)?;
    let mut rng = derive_rng(seed, 0xBE);
    let x_t = initial_noise::<f32>(&[batch, 1, res, res], &model.spec.schedule, &mut rng)?;
    let cfg = SolverConfig {
        kind: solver,
        n_steps,
        schedule: model.spec.schedule.clone(),
        seed,
    };
    let start = Instant::now();
    let report = sample(x_t, Some(&phi), &model.denoiser, &cfg)?;
    if let Some(vae) = &model.vae {
        let decoded = no_grad(|| vae.decode(&report.outputs))?;
        // touch the result so decode cannot be elided
        let _ = decoded.data()[0];
    }
    Ok(start.elapsed().as_secs_f64())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Measure throughput for every (model, NFE) cell: one discarded warmup,
/// then the median over `repeats` timed runs.
pub fn bench_throughput(
    models: &[&GenerativeModel<f32>],
    reference_id: &str,
    sources: &[DatasetRecord],
    solver: SolverKind,
    nfe_settings: &[usize],
    batch: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ThroughputRecord>> {
    if models.is_empty() || sources.is_empty() || batch == 0 || repeats == 0 {
        return Err(Error::InvalidParam(
            "bench needs models, maps, batch >= 1 and repeats >= 1".to_string(),
        ));
    }
    let threads = crate::threads::thread_count();
    let mut records = Vec::new();
    for model in models {
        model.validate()?;
        for &nfe in nfe_settings {
            let n_steps = solver.steps_for_nfe(nfe)?;
            // warmup run, discarded
            timed_generation(model, sources, solver, n_steps, seed, batch)?;
            let mut times = Vec::with_capacity(repeats);
            for r in 0..repeats {
                times.push(timed_generation(
                    model,
                    sources,
                    solver,
                    n_steps,
                    seed.wrapping_add(r as u64 + 1),
                    batch,
                )?);
            }
            let med = median(&mut times);
            records.push(ThroughputRecord {
                model_id: model.spec.model_id.clone(),
                nfe,
                batch,
                images_per_sec: batch as f64 / med,
                relative_throughput: None,
                threads,
                repeats,
            });
        }
    }
    // relative throughput against the reference at equal NFE
    let reference: Vec<(usize, f64)> = records
        .iter()
        .filter(|r| r.model_id == reference_id)
        .map(|r| (r.nfe, r.images_per_sec))
        .collect();
    for rec in records.iter_mut() {
        if let Some((_, base)) = reference.iter().find(|(nfe, _)| *nfe == rec.nfe) {
            rec.relative_throughput = Some(rec.images_per_sec / base);
        }
    }
    Ok(records)
}

pub fn write_throughput_csv(path: &Path, records: &[ThroughputRecord]) -> Result<()> {
    let mut out = String::from("model,nfe,batch,images_per_sec,relative_throughput,threads\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model_id,
            r.nfe,
            r.batch,
            r.images_per_sec,
            r.relative_throughput.map(|v| v.to_string()).unwrap_or_default(),
            r.threads
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
