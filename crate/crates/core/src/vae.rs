//! Γ-VAE: encoder producing a one-channel Γ-parameter latent map, decoder,
//! the four-term sector-masked loss, prior fitting by grid search, and
//! training. The expected-value latent α/β is the deterministic bridge to
//! the diffusion stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::{gamma_kl_pixelwise, gamma_sample_map, GammaParams};
use crate::nn::{Adam, Conv2d, NamedParams};
use crate::phantom::{augment_record, colour_augment, DatasetRecord, GeomTransform};
use crate::rng::{rng_from_seed, Rng};
use crate::sector::{masked_mean_loss_multi, stack_masks, SectorMask};
use crate::tensor::{Element, ResampleMode, Tensor};

/// Per-pixel Γ posterior parameters at the latent resolution, strictly
/// positive by construction (softplus + ε output transform).
pub struct GammaParamsMap<T: Element> {
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> GammaParamsMap<T> {
    /// Deterministic expected-value latent α/β; no sampling involved.
    pub fn expected_latent(&self) -> Result<Tensor<T>> {
        self.alpha.div(&self.beta)
    }

    /// Reparameterized per-pixel Γ draw (training-time path only).
    pub fn sample_latent(&self, rng: &mut Rng) -> Result<Tensor<T>> {
        gamma_sample_map(&self.alpha, &self.beta, rng)
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.alpha.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Encoder downsampling levels; the latent is input / 2^levels.
    pub levels: usize,
    /// Channel width at level i (1-based) is width_unit · i.
    pub width_unit: usize,
    pub init_seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            levels: 2,
            width_unit: 64,
            init_seed: 0x0AE5,
        }
    }
}

/// Seed of the fixed random-feature perceptual extractor. One constant for
/// the whole artifact so every training run scores against the same
/// features.
pub const PERCEPTUAL_SEED: u64 = 0x9E33;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub prior: GammaParams,
}

impl Default for VaeLossConfig {
    fn default() -> Self {
        VaeLossConfig {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 1e-3,
            lambda4: 1.0,
            prior: GammaParams::new(3.75, 10.8).expect("valid default prior"),
        }
    }
}

impl VaeLossConfig {
    pub fn validate(&self) -> Result<()> {
        for l in [self.lambda1, self.lambda2, self.lambda3, self.lambda4] {
            if l < 0.0 {
                return Err(Error::InvalidParam("loss weights must be >= 0".to_string()));
            }
        }
        Ok(())
    }
}

struct EncStage<T: Element> {
    conv_a: Conv2d<T>,
    conv_down: Conv2d<T>,
}

/// Symmetric convolutional Γ-VAE with one-channel latent.
pub struct GammaVae<T: Element> {
    pub cfg: VaeConfig,
    enc: Vec<EncStage<T>>,
    enc_head: Conv2d<T>,
    dec_in: Conv2d<T>,
    dec: Vec<Conv2d<T>>,
    dec_head: Conv2d<T>,
}

const PARAM_FLOOR: f64 = 1e-4;

impl<T: Element> GammaVae<T> {
    pub fn new(cfg: VaeConfig) -> Result<Self> {
        if cfg.levels < 1 || cfg.width_unit == 0 {
            return Err(Error::InvalidParam(
                "VAE needs levels >= 1 and width_unit > 0".to_string(),
            ));
        }
        let mut rng = rng_from_seed(cfg.init_seed);
        let width = |i: usize| cfg.width_unit * i; // 1-based level index
        let mut enc = Vec::new();
        let mut prev = 1usize;
        for i in 1..=cfg.levels {
            let conv_a = Conv2d::new(&mut rng, prev, width(i), 3, 1, 1);
            let conv_down = Conv2d::new(&mut rng, width(i), width(i), 3, 2, 1);
            enc.push(EncStage { conv_a, conv_down });
            prev = width(i);
        }
        let enc_head = Conv2d::new(&mut rng, prev, 2, 1, 1, 0);
        let dec_in = Conv2d::new(&mut rng, 1, width(cfg.levels), 3, 1, 1);
        let mut dec = Vec::new();
        for i in (1..=cfg.levels).rev() {
            let out = if i == 1 { width(1) } else { width(i - 1) };
            dec.push(Conv2d::new(&mut rng, width(i), out, 3, 1, 1));
        }
        let dec_head = Conv2d::new(&mut rng, width(1), 1, 3, 1, 1);
        Ok(GammaVae {
            cfg,
            enc,
            enc_head,
            dec_in,
            dec,
            dec_head,
        })
    }

    pub fn latent_factor(&self) -> usize {
        1 << self.cfg.levels
    }

    /// Image [N,1,H,W] -> per-pixel (α, β) maps at H/2^L × W/2^L.
    pub fn encode(&self, x: &Tensor<T>) -> Result<GammaParamsMap<T>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != 1 {
            return Err(Error::Shape(format!("encode expects [N,1,H,W], got {:?}", xs)));
        }
        let f = self.latent_factor();
        if xs[2] % f != 0 || xs[3] % f != 0 {
            return Err(Error::Shape(format!(
                "spatial extents {}x{} not divisible by 2^{}",
                xs[2], xs[3], self.cfg.levels
            )));
        }
        let mut h = x.clone();
        for stage in &self.enc {
            h = stage.conv_a.forward(&h)?.relu();
            h = stage.conv_down.forward(&h)?.relu();
        }
        let raw = self.enc_head.forward(&h)?;
        let pos = raw.softplus().affine(T::one(), T::from_f64(PARAM_FLOOR));
        Ok(GammaParamsMap {
            alpha: pos.narrow(1, 0, 1)?,
            beta: pos.narrow(1, 1, 1)?,
        })
    }

    /// Latent [N,1,h,w] -> reconstruction in [0,1] at 2^L the size.
    pub fn decode(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let zs = latent.shape();
        if zs.len() != 4 || zs[1] != 1 {
            return Err(Error::Shape(format!(
                "decode expects [N,1,h,w] latent, got {:?}",
                zs
            )));
        }
        let mut h = self.dec_in.forward(latent)?.relu();
        for conv in &self.dec {
            h = h.resample(ResampleMode::NearestUp, 2)?;
            h = conv.forward(&h)?.relu();
        }
        Ok(self.dec_head.forward(&h)?.sigmoid())
    }

    pub fn named_params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        for (i, s) in self.enc.iter().enumerate() {
            s.conv_a.collect_params(&format!("enc{i}.a"), &mut out);
            s.conv_down.collect_params(&format!("enc{i}.down"), &mut out);
        }
        self.enc_head.collect_params("enc_head", &mut out);
        self.dec_in.collect_params("dec_in", &mut out);
        for (i, c) in self.dec.iter().enumerate() {
            c.collect_params(&format!("dec{i}"), &mut out);
        }
        self.dec_head.collect_params("dec_head", &mut out);
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save(path, &self.named_params())
    }

    pub fn load(cfg: VaeConfig, path: &Path) -> Result<Self> {
        let vae = Self::new(cfg)?;
        crate::checkpoint::load_into(path, &vae.named_params())?;
        Ok(vae)
    }
}

/// Constant [N,1,h,w] tensor of 1/(in-sector fraction) per latent-res
/// block; 0 where a block has no in-sector pixels (those blocks are masked
/// out of every loss anyway).
fn block_fraction_inverse<T: Element>(
    masks: &[&SectorMask],
    factor: usize,
) -> Result<Tensor<T>> {
    let (h, w) = masks[0].size();
    let (oh, ow) = (h / factor, w / factor);
    let block = (factor * factor) as f64;
    let mut data = Vec::with_capacity(masks.len() * oh * ow);
    for m in masks {
        if m.size() != (h, w) {
            return Err(Error::Shape("masks in a batch must share a size".to_string()));
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let mut ones = 0usize;
                for dy in 0..factor {
                    for dx in 0..factor {
                        ones += m.bits()[(oy * factor + dy) * w + ox * factor + dx] as usize;
                    }
                }
                data.push(if ones == 0 {
                    T::zero()
                } else {
                    T::from_f64(block / ones as f64)
                });
            }
        }
    }
    Tensor::from_vec(&[masks.len(), 1, oh, ow], data)
}

/// Fixed, seeded, randomly initialized 3-layer convolutional feature
/// extractor: the desk-scale stand-in for a pretrained perceptual network.
/// Never trained; P(X,X) = 0 by construction.
pub struct PerceptualNet<T: Element> {
    convs: Vec<(Tensor<T>, usize)>, // (frozen weight, padding)
}

impl<T: Element> PerceptualNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut convs = Vec::new();
        for (cin, cout) in [(1usize, 8usize), (8, 16), (16, 16)] {
            let w = crate::nn::he_normal::<T>(&mut rng, &[cout, cin, 3, 3], cin * 9).detach();
            convs.push((w, 1usize));
        }
        PerceptualNet { convs }
    }

    fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, (w, pad)) in self.convs.iter().enumerate() {
            h = h.conv2d(w, 1, *pad)?;
            if i + 1 < self.convs.len() {
                h = h.relu().resample(ResampleMode::AvgpoolDown, 2)?;
            }
        }
        Ok(h)
    }

    /// Mean squared distance between feature maps.
    pub fn loss(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "perceptual loss needs equal shapes, {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let fx = self.features(x)?;
        let fy = self.features(y)?;
        let d = fx.sub(&fy)?;
        Ok(d.mul(&d)?.mean())
    }
}

pub struct VaeLossTerms<T: Element> {
    pub total: Tensor<T>,
    pub recon: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub latent_sim: f64,
}

/// The four-term sector-masked loss:
/// λ₁·maskedMSE(X,Y) + λ₂·P(X⊙m, Y⊙m) + λ₃·KL(posterior‖prior)⊙mask
/// + λ₄·maskedMSE(x_ds, α/β), where x_ds is the per-block in-sector mean of
/// X at the latent resolution. Per-sample masks; every term is restricted
/// to the sector, and every gradient path to an out-of-sector pixel passes
/// through a multiply-by-zero, so background gradients are exactly 0.
pub fn vae_loss<T: Element>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    p: &GammaParamsMap<T>,
    cfg: &VaeLossConfig,
    masks: &[&SectorMask],
    perceptual: &PerceptualNet<T>,
    latent_factor: usize,
) -> Result<VaeLossTerms<T>> {
    cfg.validate()?;
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "input {:?} vs reconstruction {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let latent_masks: Vec<SectorMask> = masks
        .iter()
        .map(|m| m.downsample(latent_factor))
        .collect::<Result<_>>()?;
    let latent_mask_refs: Vec<&SectorMask> = latent_masks.iter().collect();
    let (mask_t, _) = stack_masks::<T>(masks)?;
    let xm = x.mul(&mask_t)?;
    let ym = y.mul(&mask_t)?;

    let diff = xm.sub(&ym)?;
    let recon = masked_mean_loss_multi(&diff.mul(&diff)?, masks)?;

    let perc = perceptual.loss(&xm, &ym)?;

    let kl_pix = gamma_kl_pixelwise(&p.alpha, &p.beta, &cfg.prior)?;
    let kl = masked_mean_loss_multi(&kl_pix, &latent_mask_refs)?;

    // per-block in-sector mean: avgpool of the masked image divided by the
    // (constant) in-sector fraction of each block
    let x_sum = xm.resample(ResampleMode::AvgpoolDown, latent_factor)?;
    let frac_inv = block_fraction_inverse::<T>(masks, latent_factor)?;
    let x_ds = x_sum.mul(&frac_inv)?;
    let y_lat = p.expected_latent()?;
    let lat_diff = x_ds.sub(&y_lat)?;
    let latent_sim = masked_mean_loss_multi(&lat_diff.mul(&lat_diff)?, &latent_mask_refs)?;

    let total = recon
        .scale(T::from_f64(cfg.lambda1))
        .add(&perc.scale(T::from_f64(cfg.lambda2)))?
        .add(&kl.scale(T::from_f64(cfg.lambda3)))?
        .add(&latent_sim.scale(T::from_f64(cfg.lambda4)))?;
    Ok(VaeLossTerms {
        total,
        recon: recon.item().to_f64_(),
        perceptual: perc.item().to_f64_(),
        kl: kl.item().to_f64_(),
        latent_sim: latent_sim.item().to_f64_(),
    })
}

/// Maximize total in-sector Γ log-likelihood of pixel intensities over the
/// given grids. Pixels are clamped to >= 1e-4 (8-bit zeros inside the
/// sector would otherwise have -inf likelihood under α > 1).
pub fn fit_prior_gridsearch(
    records: &[DatasetRecord],
    alpha_grid: &[f64],
    beta_grid: &[f64],
) -> Result<GammaParams> {
    if records.is_empty() || alpha_grid.is_empty() || beta_grid.is_empty() {
        return Err(Error::InvalidParam(
            "fit_prior needs a non-empty dataset and non-empty grids".to_string(),
        ));
    }
    let mut n = 0.0f64;
    let mut s_ln = 0.0f64;
    let mut s_x = 0.0f64;
    for r in records {
        for (i, &v) in r.image.iter().enumerate() {
            if r.sector.bits()[i] == 1 {
                let x = (v as f64).max(1e-4);
                n += 1.0;
                s_ln += x.ln();
                s_x += x;
            }
        }
    }
    if n == 0.0 {
        return Err(Error::EmptyMask);
    }
    let mut best = (f64::NEG_INFINITY, alpha_grid[0], beta_grid[0]);
    for &a in alpha_grid {
        for &b in beta_grid {
            GammaParams::new(a, b)?;
            let ll = n * (a * b.ln() - crate::special::ln_gamma(a)) + (a - 1.0) * s_ln - b * s_x;
            if ll > best.0 {
                best = (ll, a, b);
            }
        }
    }
    GammaParams::new(best.1, best.2)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub geometric: bool,
    pub colourimetric: bool,
}

impl AugmentPolicy {
    /// VAE and downstream training use both families.
    pub fn full() -> Self {
        AugmentPolicy {
            geometric: true,
            colourimetric: true,
        }
    }

    /// Diffusion training is geometric-only.
    pub fn geometric_only() -> Self {
        AugmentPolicy {
            geometric: true,
            colourimetric: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: AugmentPolicy,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 20,
            batch_size: 12,
            lr: 1e-4,
            seed: 0,
            augment: AugmentPolicy::full(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub latent_sim: f64,
}

pub fn write_train_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,total,recon,perceptual,kl,latent_sim\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.epoch, l.total, l.recon, l.perceptual, l.kl, l.latent_sim
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Assemble a batch tensor from records (images only).
pub fn batch_images<T: Element>(records: &[&DatasetRecord]) -> Result<Tensor<T>> {
    let (h, w) = (records[0].h, records[0].w);
    let mut data = Vec::with_capacity(records.len() * h * w);
    for r in records {
        if (r.h, r.w) != (h, w) {
            return Err(Error::Shape("batch records must share a resolution".to_string()));
        }
        data.extend(r.image.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(&[records.len(), 1, h, w], data)
}

/// Train the VAE on phantom records. Deterministic for a fixed seed; NaN
/// loss aborts with a divergence error.
pub fn train_vae(
    records: &[DatasetRecord],
    vae_cfg: VaeConfig,
    loss_cfg: &VaeLossConfig,
    train_cfg: &VaeTrainConfig,
) -> Result<(GammaVae<f32>, Vec<EpochLog>)> {
    if records.is_empty() {
        return Err(Error::Dataset("empty training set".to_string()));
    }
    let vae = GammaVae::<f32>::new(vae_cfg)?;
    let perceptual = PerceptualNet::<f32>::new(PERCEPTUAL_SEED);
    let mut opt = Adam::new(vae.parameters(), train_cfg.lr);
    let mut rng = rng_from_seed(train_cfg.seed);
    let mut logs = Vec::new();
    let latent_factor = vae.latent_factor();
    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(train_cfg.batch_size.max(1)) {
            let mut batch: Vec<DatasetRecord> = chunk.iter().map(|&i| records[i].clone()).collect();
            for rec in batch.iter_mut() {
                if train_cfg.augment.geometric {
                    let t = GeomTransform::draw(&mut rng, rec.h, rec.w);
                    if let Ok(aug) = augment_record(rec, &t) {
                        *rec = aug;
                    }
                }
                if train_cfg.augment.colourimetric {
                    colour_augment(&mut rec.image, &mut rng);
                }
            }
            let refs: Vec<&DatasetRecord> = batch.iter().collect();
            let masks: Vec<&SectorMask> = batch.iter().map(|r| &r.sector).collect();
            let (mask_t, _) = stack_masks::<f32>(&masks)?;
            // the encoder only ever sees masked input, which is what makes
            // background gradients exactly zero through every loss path
            let x = batch_images::<f32>(&refs)?.mul(&mask_t)?;
            let p = vae.encode(&x)?;
            let z = p.sample_latent(&mut rng)?;
            let y = vae.decode(&z)?;
            let terms = vae_loss(&x, &y, &p, loss_cfg, &masks, &perceptual, latent_factor)?;
            let total = terms.total.item() as f64;
            if !total.is_finite() {
                return Err(Error::Diverged(format!(
                    "VAE loss became {total} at epoch {epoch}"
                )));
            }
            terms.total.backward()?;
            opt.step();
            sums[0] += total;
            sums[1] += terms.recon;
            sums[2] += terms.perceptual;
            sums[3] += terms.kl;
            sums[4] += terms.latent_sim;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        logs.push(EpochLog {
            epoch: epoch + 1,
            total: sums[0] / b,
            recon: sums[1] / b,
            perceptual: sums[2] / b,
            kl: sums[3] / b,
            latent_sim: sums[4] / b,
        });
    }
    Ok((vae, logs))
}

/// Deterministic Fisher–Yates with the caller's rng.
pub fn shuffle<I>(xs: &mut [I], rng: &mut Rng) {
    use rand::Rng as _;
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

/// Persist a VAE as a directory: vae_config.json + vae.ckpt.
pub fn save_vae_dir(vae: &GammaVae<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = std::fs::File::create(dir.join("vae_config.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &vae.cfg)?;
    vae.save(&dir.join("vae.ckpt"))
}

pub fn load_vae_dir(dir: &Path) -> Result<GammaVae<f32>> {
    let cfg: VaeConfig =
        serde_json::from_reader(std::fs::File::open(dir.join("vae_config.json"))?)?;
    GammaVae::load(cfg, &dir.join("vae.ckpt"))
}
