//! Noise schedules (VE/VP/EDM), the forward process, the score/denoiser
//! correspondence, the probability-flow ODE right-hand side, and the
//! diffusion training objective.

use std::path::PathBuf;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sector::SectorMask;
use crate::spade::DenoiserConfig;
use crate::tensor::{Element, Tensor};

/// Anything that predicts the clean signal from a noisy input at noise
/// level σ. `sigma` carries one entry per sample (or a single shared one);
/// `phi` is the one-hot semantic conditioning, ignored by analytic oracles.
pub trait Denoiser<T: Element> {
    fn denoise(&self, x: &Tensor<T>, sigma: &[T], phi: Option<&Tensor<T>>) -> Result<Tensor<T>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Ve,
    Vp,
    Edm,
}

/// σ(t) definition with its discretization exponent. For VP, σ(t) =
/// √(exp(½β_d t² + β_min t) − 1), the continuous-time limit of the DDPM β
/// schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub vp_beta_d: f64,
    pub vp_beta_min: f64,
    pub rho: f64,
}

impl NoiseSchedule {
    /// EDM defaults with the σ range scaled to the data std (the canonical
    /// [0.002, 80] assumes σ_data = 0.5).
    pub fn edm_default(sigma_data: f64) -> Self {
        let k = sigma_data / 0.5;
        NoiseSchedule {
            kind: ScheduleKind::Edm,
            sigma_min: 0.002 * k,
            sigma_max: 80.0 * k,
            vp_beta_d: 19.9,
            vp_beta_min: 0.1,
            rho: 7.0,
        }
    }

    pub fn ve_default(sigma_data: f64) -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Ve,
            ..Self::edm_default(sigma_data)
        }
    }

    /// VP defaults: t ∈ [1e−3, 1] with β_d = 19.9, β_min = 0.1; the σ range
    /// is implied by the schedule at those endpoints.
    pub fn vp_default() -> Self {
        let mut s = NoiseSchedule {
            kind: ScheduleKind::Vp,
            sigma_min: 0.0,
            sigma_max: 0.0,
            vp_beta_d: 19.9,
            vp_beta_min: 0.1,
            rho: 7.0,
        };
        s.sigma_min = s.sigma_unchecked(1e-3);
        s.sigma_max = s.sigma_unchecked(1.0);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidParam(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.rho <= 0.0 {
            return Err(Error::InvalidParam("rho must be positive".to_string()));
        }
        Ok(())
    }

    fn sigma_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Edm => t,
            ScheduleKind::Ve => t.sqrt(),
            ScheduleKind::Vp => {
                ((0.5 * self.vp_beta_d * t * t + self.vp_beta_min * t).exp() - 1.0).sqrt()
            }
        }
    }

    /// (σ(t), σ̇(t)). Errors where the derivative is undefined (t = 0 for
    /// VE/VP) or t < 0.
    pub fn sigma_of_t(&self, t: f64) -> Result<(f64, f64)> {
        if t < 0.0 {
            return Err(Error::Domain(format!("schedule time must be >= 0, got {t}")));
        }
        match self.kind {
            ScheduleKind::Edm => Ok((t, 1.0)),
            ScheduleKind::Ve => {
                if t == 0.0 {
                    return Err(Error::Domain(
                        "VE derivative is singular at t = 0".to_string(),
                    ));
                }
                let s = t.sqrt();
                Ok((s, 0.5 / s))
            }
            ScheduleKind::Vp => {
                if t == 0.0 {
                    return Err(Error::Domain(
                        "VP derivative is singular at t = 0".to_string(),
                    ));
                }
                let s = self.sigma_unchecked(t);
                // σ̇ = (β_d t + β_min)(σ² + 1)/(2σ)
                let deriv = (self.vp_beta_d * t + self.vp_beta_min) * (s * s + 1.0) / (2.0 * s);
                Ok((s, deriv))
            }
        }
    }

    /// Inverse of σ(t); σ = 0 maps to t = 0 for every kind.
    pub fn t_of_sigma(&self, sigma: f64) -> f64 {
        match self.kind {
            ScheduleKind::Edm => sigma,
            ScheduleKind::Ve => sigma * sigma,
            ScheduleKind::Vp => {
                let l = (1.0 + sigma * sigma).ln();
                (-self.vp_beta_min
                    + (self.vp_beta_min * self.vp_beta_min + 2.0 * self.vp_beta_d * l).sqrt())
                    / self.vp_beta_d
            }
        }
    }

    pub fn t_min(&self) -> f64 {
        self.t_of_sigma(self.sigma_min)
    }

    pub fn t_max(&self) -> f64 {
        self.t_of_sigma(self.sigma_max)
    }

    /// Per-sample training noise level. EDM draws log-normal σ (shifted by
    /// the data scale); VE/VP draw t uniformly over the schedule's domain.
    pub fn draw_train_sigma(&self, rng: &mut Rng, sigma_data: f64) -> f64 {
        match self.kind {
            ScheduleKind::Edm => {
                let z: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                let shift = (sigma_data / 0.5).ln();
                (-1.2 + shift + 1.2 * z)
                    .exp()
                    .clamp(self.sigma_min, self.sigma_max)
            }
            ScheduleKind::Ve | ScheduleKind::Vp => {
                let t = self.t_min() + (self.t_max() - self.t_min()) * rng.random::<f64>();
                self.sigma_unchecked(t)
            }
        }
    }

    /// Per-sample weight of the denoiser-space squared error.
    pub fn loss_weight(&self, sigma: f64, sigma_data: f64) -> f64 {
        match self.kind {
            ScheduleKind::Edm => {
                let s2 = sigma * sigma;
                let d2 = sigma_data * sigma_data;
                (s2 + d2) / (s2 * d2)
            }
            ScheduleKind::Ve | ScheduleKind::Vp => 1.0 / (sigma * sigma),
        }
    }
}

/// Discrete forward (noising) process configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardProcessConfig {
    pub beta: Vec<f64>,
}

impl ForwardProcessConfig {
    pub fn constant(beta: f64, t_steps: usize) -> Result<Self> {
        let cfg = ForwardProcessConfig {
            beta: vec![beta; t_steps],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(Error::InvalidParam("forward process needs T >= 1".to_string()));
        }
        if self.beta.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::InvalidParam("beta_t must lie in (0, 1)".to_string()));
        }
        Ok(())
    }

    /// ᾱ_T = Π (1 − β_t): the closed-form marginal is
    /// x_T ~ N(√ᾱ_T · x_0, (1 − ᾱ_T) I).
    pub fn alpha_bar(&self) -> f64 {
        self.beta.iter().map(|b| 1.0 - b).product()
    }
}

/// One step of the forward noising process: x_t ~ N(√(1−β_t)·x_prev, β_t I).
pub fn ddpm_forward_step(x_prev: &[f64], beta_t: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0 < beta_t && beta_t < 1.0) {
        return Err(Error::InvalidParam(format!("beta_t must be in (0,1), got {beta_t}")));
    }
    let scale = (1.0 - beta_t).sqrt();
    let sd = beta_t.sqrt();
    Ok(x_prev
        .iter()
        .map(|&x| {
            let z: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            scale * x + sd * z
        })
        .collect())
}

/// x = x0 + n with n ~ N(0, σ_i² I) per sample; returns (x, n). x carries
/// the graph of x0, n is a constant.
pub fn add_noise<T: Element>(
    x0: &Tensor<T>,
    sigmas: &[f64],
    rng: &mut Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = x0.shape().to_vec();
    if shape.is_empty() {
        return Err(Error::Shape("add_noise needs a shaped tensor".to_string()));
    }
    if sigmas.iter().any(|&s| s < 0.0) {
        return Err(Error::Domain("sigma must be >= 0".to_string()));
    }
    let n_batch = shape[0];
    let per = x0.numel() / n_batch;
    let mut noise = Vec::with_capacity(x0.numel());
    for i in 0..n_batch {
        let s = sigmas[i.min(sigmas.len() - 1)];
        for _ in 0..per {
            let z: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            noise.push(T::from_f64(s * z));
        }
    }
    let n = Tensor::from_vec(&shape, noise)?;
    let x = x0.add(&n)?;
    Ok((x, n))
}

/// Score from a denoiser output: ∇_x log p(x; σ) = (D(x;σ) − x)/σ².
pub fn score_from_denoiser<T: Element>(
    d_out: &Tensor<T>,
    x: &Tensor<T>,
    sigma: f64,
) -> Result<Tensor<T>> {
    if sigma <= 0.0 {
        return Err(Error::Domain(format!(
            "score is undefined at sigma = {sigma}"
        )));
    }
    Ok(d_out.sub(x)?.scale(T::from_f64(1.0 / (sigma * sigma))))
}

/// Counts denoiser evaluations; owned by one sampling session.
#[derive(Debug, Default, Clone)]
pub struct NfeCounter(u64);

impl NfeCounter {
    pub fn new() -> Self {
        NfeCounter(0)
    }
    pub fn count(&self) -> u64 {
        self.0
    }
    fn bump(&mut self) {
        self.0 += 1;
    }
}

/// Probability-flow ODE right-hand side at time t:
/// dx/dt = −σ̇σ·(D(x|Φ;σ) − x)/σ² = (x − D(x|Φ;σ))·σ̇/σ.
/// Exactly one denoiser evaluation per call.
pub fn ode_rhs<T: Element>(
    x: &Tensor<T>,
    t: f64,
    denoiser: &dyn Denoiser<T>,
    phi: Option<&Tensor<T>>,
    schedule: &NoiseSchedule,
    nfe: &mut NfeCounter,
) -> Result<Tensor<T>> {
    let (sigma, sigma_dot) = schedule.sigma_of_t(t)?;
    if sigma <= 0.0 {
        return Err(Error::Domain("ode_rhs is undefined at sigma = 0".to_string()));
    }
    let d = denoiser.denoise(x, &[T::from_f64(sigma)], phi)?;
    nfe.bump();
    Ok(x.sub(&d)?.scale(T::from_f64(sigma_dot / sigma)))
}

/// One training step: draw per-sample σ, noise the batch, run the denoiser,
/// and return the sector-masked weighted MSE. Gradients are left to the
/// caller (`loss.backward()` + optimizer step).
pub fn diffusion_train_loss<T: Element>(
    denoiser: &dyn Denoiser<T>,
    batch_x0: &Tensor<T>,
    phi: &Tensor<T>,
    mask: &SectorMask,
    schedule: &NoiseSchedule,
    sigma_data: f64,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let masks: Vec<&SectorMask> = (0..batch_x0.shape()[0]).map(|_| mask).collect();
    let loss = diffusion_train_loss_multi(denoiser, batch_x0, phi, &masks, schedule, sigma_data, rng)?;
    let v = loss.item().to_f64_();
    if !v.is_finite() {
        return Err(Error::Diverged(format!("diffusion loss became {v}")));
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionMode {
    /// Operate directly at image resolution.
    Full256,
    /// Latent space at half the image side (one VAE downsampling level).
    Latent128,
    /// Latent space at a quarter of the image side (two levels).
    Latent64,
}

impl ResolutionMode {
    /// Encoder downsampling levels needed, if any.
    pub fn vae_levels(self) -> Option<usize> {
        match self {
            ResolutionMode::Full256 => None,
            ResolutionMode::Latent128 => Some(1),
            ResolutionMode::Latent64 => Some(2),
        }
    }

    pub fn latent_factor(self) -> usize {
        match self.vae_levels() {
            None => 1,
            Some(l) => 1 << l,
        }
    }
}

/// Everything needed to instantiate one generative model variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionModelSpec {
    pub model_id: String,
    pub resolution_mode: ResolutionMode,
    pub schedule: NoiseSchedule,
    pub denoiser: DenoiserConfig,
    pub vae_checkpoint: Option<PathBuf>,
}

impl DiffusionModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.denoiser.validate()?;
        match (self.resolution_mode, &self.vae_checkpoint) {
            (ResolutionMode::Full256, Some(_)) => Err(Error::InvalidParam(
                "full-resolution mode forbids a VAE checkpoint".to_string(),
            )),
            (ResolutionMode::Latent128 | ResolutionMode::Latent64, None) => Err(
                Error::InvalidParam("latent modes require a VAE checkpoint".to_string()),
            ),
            _ => Ok(()),
        }
    }
}

/// Latent-space training record: the expected-value latent of one image,
/// paired with its downsampled semantic map.
#[derive(Debug, Clone)]
pub struct LatentRecord {
    pub patient_id: u32,
    pub view: crate::phantom::View,
    pub phase: crate::phantom::Phase,
    pub h: usize,
    pub w: usize,
    pub latent: Vec<f32>,
    pub map: crate::sector::SemanticMap,
}

/// Deterministically encode a dataset into expected-value latents:
/// expected_latent(encode(X)) per image, maps downsampled to the latent
/// resolution with nearest-neighbor sampling.
pub fn make_latent_dataset(
    vae: &crate::vae::GammaVae<f32>,
    records: &[crate::phantom::DatasetRecord],
) -> Result<Vec<LatentRecord>> {
    let factor = vae.latent_factor();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.h % factor != 0 || r.w % factor != 0 {
            return Err(Error::Shape(format!(
                "record {}x{} incompatible with VAE factor {}",
                r.h, r.w, factor
            )));
        }
        let x = crate::vae::batch_images::<f32>(&[r])?;
        let latent = crate::tensor::no_grad(|| -> Result<Vec<f32>> {
            Ok(vae.encode(&x)?.expected_latent()?.to_vec())
        })?;
        out.push(LatentRecord {
            patient_id: r.patient_id,
            view: r.view,
            phase: r.phase,
            h: r.h / factor,
            w: r.w / factor,
            latent,
            map: r.map.downsample_nearest(factor)?,
        });
    }
    Ok(out)
}

/// Std of in-sector pixel intensities over the dataset.
pub fn estimate_sigma_data_pixels(records: &[crate::phantom::DatasetRecord]) -> f64 {
    let mut n = 0.0;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for r in records {
        for (i, &v) in r.image.iter().enumerate() {
            if r.sector.bits()[i] == 1 {
                n += 1.0;
                s += v as f64;
                s2 += (v as f64) * (v as f64);
            }
        }
    }
    if n < 2.0 {
        return 0.5;
    }
    let mean = s / n;
    ((s2 / n - mean * mean).max(1e-12)).sqrt()
}

/// Std of in-sector latent values over a latent dataset.
pub fn estimate_sigma_data_latents(records: &[LatentRecord]) -> f64 {
    let mut n = 0.0;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for r in records {
        for (i, &l) in r.map.labels().iter().enumerate() {
            if l >= 1 {
                let v = r.latent[i] as f64;
                n += 1.0;
                s += v;
                s2 += v * v;
            }
        }
    }
    if n < 2.0 {
        return 0.5;
    }
    let mean = s / n;
    ((s2 / n - mean * mean).max(1e-12)).sqrt()
}

/// Either operating space of the denoiser.
pub enum DiffusionTrainSet {
    Pixel(Vec<crate::phantom::DatasetRecord>),
    Latent(Vec<LatentRecord>),
}

impl DiffusionTrainSet {
    pub fn len(&self) -> usize {
        match self {
            DiffusionTrainSet::Pixel(v) => v.len(),
            DiffusionTrainSet::Latent(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn estimate_sigma_data(&self) -> f64 {
        match self {
            DiffusionTrainSet::Pixel(v) => estimate_sigma_data_pixels(v),
            DiffusionTrainSet::Latent(v) => estimate_sigma_data_latents(v),
        }
    }

    /// Assemble (x0, one-hot conditioning, per-sample masks) for a batch,
    /// applying geometric-only augmentation when enabled.
    fn make_batch(
        &self,
        idx: &[usize],
        rng: &mut Rng,
        geometric: bool,
    ) -> Result<(Tensor<f32>, Tensor<f32>, Vec<SectorMask>)> {
        use crate::phantom::GeomTransform;
        use crate::spade::one_hot_batch;
        match self {
            DiffusionTrainSet::Pixel(records) => {
                let mut batch: Vec<crate::phantom::DatasetRecord> =
                    idx.iter().map(|&i| records[i].clone()).collect();
                if geometric {
                    for rec in batch.iter_mut() {
                        let t = GeomTransform::draw(rng, rec.h, rec.w);
                        if let Ok(aug) = crate::phantom::augment_record(rec, &t) {
                            *rec = aug;
                        }
                    }
                }
                let refs: Vec<&crate::phantom::DatasetRecord> = batch.iter().collect();
                let x0 = crate::vae::batch_images::<f32>(&refs)?;
                let maps: Vec<&crate::sector::SemanticMap> = batch.iter().map(|r| &r.map).collect();
                let phi = one_hot_batch::<f32>(&maps, crate::sector::NUM_LABELS)?;
                let masks: Vec<SectorMask> = batch.iter().map(|r| r.sector.clone()).collect();
                Ok((x0, phi, masks))
            }
            DiffusionTrainSet::Latent(records) => {
                let (h, w) = (records[idx[0]].h, records[idx[0]].w);
                let mut data = Vec::with_capacity(idx.len() * h * w);
                let mut maps = Vec::with_capacity(idx.len());
                for &i in idx {
                    let r = &records[i];
                    if (r.h, r.w) != (h, w) {
                        return Err(Error::Shape("latent batch resolution mismatch".to_string()));
                    }
                    let (latent, map) = if geometric {
                        let t = GeomTransform::draw(rng, r.h, r.w);
                        let m = t.apply_to_labels(&r.map);
                        if m.labels().iter().any(|&l| (1..=3).contains(&l)) {
                            (t.apply_to_image(&r.latent, r.h, r.w), m)
                        } else {
                            (r.latent.clone(), r.map.clone())
                        }
                    } else {
                        (r.latent.clone(), r.map.clone())
                    };
                    data.extend(latent.iter().map(|&v| v));
                    maps.push(map);
                }
                let x0 = Tensor::from_vec(&[idx.len(), 1, h, w], data)?;
                let map_refs: Vec<&crate::sector::SemanticMap> = maps.iter().collect();
                let phi = one_hot_batch::<f32>(&map_refs, crate::sector::NUM_LABELS)?;
                let masks: Vec<SectorMask> = maps
                    .iter()
                    .map(|m| m.sector_mask())
                    .collect::<Result<_>>()?;
                Ok((x0, phi, masks))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Geometric-only augmentation for diffusion training (no colourimetric
    /// transforms).
    pub augment_geometric: bool,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            augment_geometric: true,
        }
    }
}

/// Train a denoiser on the given operand set; returns the per-step losses.
pub fn train_diffusion(
    net: &crate::spade::SpadeUnet<f32>,
    set: &DiffusionTrainSet,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::Dataset("empty diffusion training set".to_string()));
    }
    let sigma_data = net.cfg.sigma_data;
    let mut opt = crate::nn::Adam::new(net.parameters(), cfg.lr);
    let mut rng = crate::rng::rng_from_seed(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size.max(1))
            .map(|_| rand::Rng::random_range(&mut rng, 0..set.len()))
            .collect();
        let (x0, phi, masks) = set.make_batch(&idx, &mut rng, cfg.augment_geometric)?;
        let mask_refs: Vec<&SectorMask> = masks.iter().collect();
        let loss = diffusion_train_loss_multi(net, &x0, &phi, &mask_refs, schedule, sigma_data, &mut rng)?;
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::Diverged(format!("diffusion loss became {v} at step {step}")));
        }
        loss.backward()?;
        opt.step();
        losses.push(v);
    }
    Ok(losses)
}

/// `diffusion_train_loss` with one mask per sample. The clean operand is
/// masked before noising and before entering the denoiser, so gradients
/// wrt out-of-sector pixels are exactly zero (no leakage through the
/// network's receptive field).
pub fn diffusion_train_loss_multi<T: Element>(
    denoiser: &dyn Denoiser<T>,
    batch_x0: &Tensor<T>,
    phi: &Tensor<T>,
    masks: &[&SectorMask],
    schedule: &NoiseSchedule,
    sigma_data: f64,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    schedule.validate()?;
    let n = batch_x0.shape()[0];
    let (mask_t, _) = crate::sector::stack_masks::<T>(masks)?;
    let x0 = batch_x0.mul(&mask_t)?;
    let sigmas: Vec<f64> = (0..n).map(|_| schedule.draw_train_sigma(rng, sigma_data)).collect();
    let (x_noisy, _) = add_noise(&x0, &sigmas, rng)?;
    let sig_t: Vec<T> = sigmas.iter().map(|&s| T::from_f64(s)).collect();
    let d = denoiser.denoise(&x_noisy, &sig_t, Some(phi))?;
    let err = d.sub(&x0)?;
    let weights: Vec<T> = sigmas
        .iter()
        .map(|&s| T::from_f64(schedule.loss_weight(s, sigma_data)))
        .collect();
    let w = Tensor::from_vec(&[n, 1, 1, 1], weights)?;
    let per_pixel = err.mul(&err)?.mul(&w)?;
    crate::sector::masked_mean_loss_multi(&per_pixel, masks)
}

/// Analytic denoisers for solver verification. For Gaussian data N(μ, s²)
/// noised at level σ, the posterior mean is exactly
/// D(x;σ) = (s²x + σ²μ)/(s² + σ²).
pub mod analytic {
    use super::*;

    #[derive(Debug, Clone, Copy)]
    pub struct GaussianDenoiser {
        pub mean: f64,
        pub std: f64,
    }

    impl GaussianDenoiser {
        pub fn unit() -> Self {
            GaussianDenoiser { mean: 0.0, std: 1.0 }
        }

        pub fn denoise_scalar(&self, x: f64, sigma: f64) -> f64 {
            let s2 = self.std * self.std;
            let g2 = sigma * sigma;
            (s2 * x + g2 * self.mean) / (s2 + g2)
        }

        /// ∇_x log N(x; μ, s² + σ²).
        pub fn analytic_score(&self, x: f64, sigma: f64) -> f64 {
            -(x - self.mean) / (self.std * self.std + sigma * sigma)
        }
    }

    impl<T: Element> Denoiser<T> for GaussianDenoiser {
        fn denoise(&self, x: &Tensor<T>, sigma: &[T], _phi: Option<&Tensor<T>>) -> Result<Tensor<T>> {
            let n = x.shape()[0];
            let per = x.numel() / n;
            let data = x.data();
            let mut out = Vec::with_capacity(x.numel());
            for i in 0..n {
                let s = sigma[i.min(sigma.len() - 1)].to_f64_();
                for j in 0..per {
                    out.push(T::from_f64(
                        self.denoise_scalar(data[i * per + j].to_f64_(), s),
                    ));
                }
            }
            drop(data);
            Tensor::from_vec(x.shape(), out)
        }
    }

    /// Ideal denoiser for a 1-D Gaussian mixture: responsibility-weighted
    /// posterior means under the σ-smoothed components.
    #[derive(Debug, Clone)]
    pub struct MixtureDenoiser {
        pub weights: Vec<f64>,
        pub means: Vec<f64>,
        pub stds: Vec<f64>,
    }

    impl MixtureDenoiser {
        pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
            if weights.len() != means.len() || means.len() != stds.len() || weights.is_empty() {
                return Err(Error::InvalidParam(
                    "mixture components must align and be non-empty".to_string(),
                ));
            }
            if weights.iter().any(|&w| w <= 0.0) || stds.iter().any(|&s| s <= 0.0) {
                return Err(Error::InvalidParam(
                    "mixture weights and stds must be positive".to_string(),
                ));
            }
            let z: f64 = weights.iter().sum();
            Ok(MixtureDenoiser {
                weights: weights.iter().map(|w| w / z).collect(),
                means,
                stds,
            })
        }

        fn smoothed(&self, sigma: f64) -> Vec<(f64, f64, f64)> {
            self.weights
                .iter()
                .zip(&self.means)
                .zip(&self.stds)
                .map(|((&w, &m), &s)| (w, m, s * s + sigma * sigma))
                .collect()
        }

        pub fn denoise_scalar(&self, x: f64, sigma: f64) -> f64 {
            let comps = self.smoothed(sigma);
            let mut dens = Vec::with_capacity(comps.len());
            let mut total = 0.0;
            for &(w, m, v) in &comps {
                let d = w * (-(x - m) * (x - m) / (2.0 * v)).exp() / v.sqrt();
                dens.push(d);
                total += d;
            }
            let mut out = 0.0;
            for (i, &(_, m, v)) in comps.iter().enumerate() {
                let resp = dens[i] / total;
                // component posterior mean: (s_i² x + σ² m_i)/(s_i² + σ²)
                let s2 = v - sigma * sigma;
                let post = (s2 * x + sigma * sigma * m) / v;
                out += resp * post;
            }
            out
        }

        /// ∇_x log Σ w_i N(x; μ_i, s_i² + σ²), by direct differentiation.
        pub fn analytic_score(&self, x: f64, sigma: f64) -> f64 {
            let comps = self.smoothed(sigma);
            let mut num = 0.0;
            let mut den = 0.0;
            for &(w, m, v) in &comps {
                let d = w * (-(x - m) * (x - m) / (2.0 * v)).exp() / v.sqrt();
                den += d;
                num += d * (-(x - m) / v);
            }
            num / den
        }
    }

    impl<T: Element> Denoiser<T> for MixtureDenoiser {
        fn denoise(&self, x: &Tensor<T>, sigma: &[T], _phi: Option<&Tensor<T>>) -> Result<Tensor<T>> {
            let n = x.shape()[0];
            let per = x.numel() / n;
            let data = x.data();
            let mut out = Vec::with_capacity(x.numel());
            for i in 0..n {
                let s = sigma[i.min(sigma.len() - 1)].to_f64_();
                for j in 0..per {
                    out.push(T::from_f64(
                        self.denoise_scalar(data[i * per + j].to_f64_(), s),
                    ));
                }
            }
            drop(data);
            Tensor::from_vec(x.shape(), out)
        }
    }

    /// D(x) = x: the RHS fixed point, handy for NFE accounting tests.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct IdentityDenoiser;

    impl<T: Element> Denoiser<T> for IdentityDenoiser {
        fn denoise(&self, x: &Tensor<T>, _sigma: &[T], _phi: Option<&Tensor<T>>) -> Result<Tensor<T>> {
            Ok(x.detach())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::analytic::*;
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn sigma_of_t_trivial_values() {
        let edm = NoiseSchedule::edm_default(0.5);
        let (s, ds) = edm.sigma_of_t(0.7).unwrap();
        assert_eq!((s, ds), (0.7, 1.0));
        let ve = NoiseSchedule::ve_default(0.5);
        let (s, ds) = ve.sigma_of_t(4.0).unwrap();
        assert!((s - 2.0).abs() < 1e-15);
        assert!((ds - 0.25).abs() < 1e-15);
        assert!(ve.sigma_of_t(0.0).is_err());
        assert!(ve.sigma_of_t(-1.0).is_err());
    }

    #[test]
    fn sigma_derivative_matches_numeric() {
        for sched in [
            NoiseSchedule::edm_default(0.5),
            NoiseSchedule::ve_default(0.5),
            NoiseSchedule::vp_default(),
        ] {
            let (lo, hi) = (sched.t_min(), sched.t_max());
            for k in 0..20 {
                let t = lo + (hi - lo) * (k as f64 + 0.5) / 20.0;
                let (_, ds) = sched.sigma_of_t(t).unwrap();
                let h = 1e-6 * t.max(1e-3);
                let (sp, _) = sched.sigma_of_t(t + h).unwrap();
                let (sm, _) = sched.sigma_of_t(t - h).unwrap();
                let num = (sp - sm) / (2.0 * h);
                assert!(
                    (ds - num).abs() / num.abs().max(1e-12) < 1e-5,
                    "{:?} t={t}: {ds} vs {num}",
                    sched.kind
                );
            }
        }
    }

    #[test]
    fn t_of_sigma_inverts_sigma_of_t() {
        for sched in [
            NoiseSchedule::edm_default(0.3),
            NoiseSchedule::ve_default(0.3),
            NoiseSchedule::vp_default(),
        ] {
            for k in 1..10 {
                let sigma = sched.sigma_min
                    + (sched.sigma_max - sched.sigma_min) * k as f64 / 10.0;
                let t = sched.t_of_sigma(sigma);
                let (s2, _) = sched.sigma_of_t(t).unwrap();
                assert!((s2 - sigma).abs() / sigma < 1e-10, "{:?}", sched.kind);
            }
        }
    }

    #[test]
    fn ddpm_step_low_beta_limit() {
        let mut rng = rng_from_seed(8);
        let x = vec![0.3, -1.2, 5.0];
        let y = ddpm_forward_step(&x, 1e-12, &mut rng).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(ddpm_forward_step(&x, 0.0, &mut rng).is_err());
        assert!(ddpm_forward_step(&x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn ddpm_single_step_variance() {
        let mut rng = rng_from_seed(9);
        let beta = 0.25;
        let n = 100_000;
        let y = ddpm_forward_step(&vec![0.0; n], beta, &mut rng).unwrap();
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
        // var of the estimator of Normal variance: 2σ⁴/n
        let se = (2.0 * beta * beta / n as f64).sqrt();
        assert!((var - beta).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn add_noise_zero_sigma_is_exact() {
        let mut rng = rng_from_seed(10);
        let x0 = Tensor::<f64>::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (x, n) = add_noise(&x0, &[0.0], &mut rng).unwrap();
        assert_eq!(x.to_vec(), x0.to_vec());
        assert!(n.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_noise_deterministic_and_scaled() {
        let x0 = Tensor::<f64>::zeros(&[1, 1, 100, 100]);
        let (_, n1) = add_noise(&x0, &[0.5], &mut rng_from_seed(77)).unwrap();
        let (_, n2) = add_noise(&x0, &[0.5], &mut rng_from_seed(77)).unwrap();
        assert_eq!(n1.to_vec(), n2.to_vec());
        let std: f64 = (n1.to_vec().iter().map(|v| v * v).sum::<f64>() / 10_000.0).sqrt();
        assert!((std - 0.5).abs() < 0.5 * 0.03, "std {std}");
    }

    #[test]
    fn score_identity_fixed_point() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![0.1, -2.0, 3.0]).unwrap();
        let score = score_from_denoiser(&x, &x, 0.7).unwrap();
        assert!(score.to_vec().iter().all(|&v| v == 0.0));
        assert!(score_from_denoiser(&x, &x, 0.0).is_err());
    }

    #[test]
    fn gaussian_ideal_denoiser_score() {
        // D(x;σ) for N(μ,s²) gives score −(x−μ)/(s²+σ²)
        let g = GaussianDenoiser { mean: 0.5, std: 1.5 };
        let sigma = 0.8;
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![-1.0, 0.2, 2.4]).unwrap();
        let d = <GaussianDenoiser as Denoiser<f64>>::denoise(&g, &x, &[sigma], None).unwrap();
        let score = score_from_denoiser(&d, &x, sigma).unwrap();
        for (i, &xi) in x.to_vec().iter().enumerate() {
            let want = g.analytic_score(xi, sigma);
            assert!((score.to_vec()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ode_rhs_gaussian_example() {
        // μ=0, s=1, x=2, σ=t=1 under EDM: D = x/2, dx/dt = (x − x/2)·1/1 = 1
        let mut sched = NoiseSchedule::edm_default(0.5);
        sched.sigma_max = 100.0;
        let g = GaussianDenoiser::unit();
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let mut nfe = NfeCounter::new();
        let rhs = ode_rhs(&x, 1.0, &g, None, &sched, &mut nfe).unwrap();
        assert!((rhs.item() - 1.0).abs() < 1e-12);
        assert_eq!(nfe.count(), 1);
    }

    #[test]
    fn ode_rhs_identity_denoiser_is_zero() {
        let sched = NoiseSchedule::edm_default(0.5);
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1.0, -3.0]).unwrap();
        let mut nfe = NfeCounter::new();
        let rhs = ode_rhs(&x, 0.5, &IdentityDenoiser, None, &sched, &mut nfe).unwrap();
        assert!(rhs.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(nfe.count(), 1);
    }

    #[test]
    fn model_spec_validation() {
        let spec = DiffusionModelSpec {
            model_id: "edm".into(),
            resolution_mode: ResolutionMode::Full256,
            schedule: NoiseSchedule::edm_default(0.5),
            denoiser: DenoiserConfig::default(),
            vae_checkpoint: None,
        };
        assert!(spec.validate().is_ok());
        let mut bad = spec.clone();
        bad.vae_checkpoint = Some("x.ckpt".into());
        assert!(bad.validate().is_err());
        let mut latent = spec;
        latent.resolution_mode = ResolutionMode::Latent64;
        assert!(latent.validate().is_err());
    }

    #[test]
    fn alpha_bar_matches_product() {
        let cfg = ForwardProcessConfig::constant(0.01, 10).unwrap();
        assert!((cfg.alpha_bar() - 0.99f64.powi(10)).abs() < 1e-12);
    }
}
