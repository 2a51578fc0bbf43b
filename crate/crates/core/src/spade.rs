//! SPADE normalization and the SPADE-conditioned U-Net denoiser. The
//! denoiser applies noise-level-dependent preconditioning of input, skip and
//! output scales, with a log-sigma Fourier embedding added per block.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{channel_norm, ChannelAffine, Conv2d, Linear, NamedParams};
use crate::rng::Rng;
use crate::sector::SemanticMap;
use crate::tensor::{Element, ResampleMode, Tensor};

/// Channel-per-label binary encoding of a semantic map: [1, A, h, w].
pub fn one_hot<T: Element>(map: &SemanticMap, alphabet: usize) -> Result<Tensor<T>> {
    let (h, w) = map.size();
    if let Some(&bad) = map.labels().iter().find(|&&l| l as usize >= alphabet) {
        return Err(Error::InvalidParam(format!(
            "label {bad} outside alphabet of size {alphabet}"
        )));
    }
    let mut data = vec![T::zero(); alphabet * h * w];
    for (i, &l) in map.labels().iter().enumerate() {
        data[l as usize * h * w + i] = T::one();
    }
    Tensor::from_vec(&[1, alphabet, h, w], data)
}

/// Batched one-hot encoding: [N, A, h, w]. All maps must share a size.
pub fn one_hot_batch<T: Element>(maps: &[&SemanticMap], alphabet: usize) -> Result<Tensor<T>> {
    if maps.is_empty() {
        return Err(Error::Shape("one_hot_batch of zero maps".to_string()));
    }
    let encoded: Vec<Tensor<T>> = maps
        .iter()
        .map(|m| one_hot(m, alphabet))
        .collect::<Result<_>>()?;
    Tensor::concat(&encoded, 0)
}

/// SPADE block: modulation fields γ(m), β(m) predicted from the (resized)
/// semantic map, applied to channel-standardized activations.
pub struct SpadeNorm<T: Element> {
    pub shared: Conv2d<T>,
    pub gamma_head: Conv2d<T>,
    pub beta_head: Conv2d<T>,
}

impl<T: Element> SpadeNorm<T> {
    pub fn new(rng: &mut Rng, label_ch: usize, hidden: usize, out_ch: usize) -> Self {
        SpadeNorm {
            shared: Conv2d::new(rng, label_ch, hidden, 3, 1, 1),
            gamma_head: Conv2d::new(rng, hidden, out_ch, 3, 1, 1),
            beta_head: Conv2d::new(rng, hidden, out_ch, 3, 1, 1),
        }
    }

    /// γ(m) ⊙ (h − μ_c)/σ_c + β(m). The one-hot map is resized to the
    /// activation size with nearest-neighbor sampling.
    pub fn forward(&self, h: &Tensor<T>, onehot: &Tensor<T>) -> Result<Tensor<T>> {
        let hs = h.shape();
        if hs.len() != 4 {
            return Err(Error::Shape(format!("spade_norm expects NCHW, got {:?}", hs)));
        }
        let m = onehot.nearest_resize(hs[2], hs[3])?;
        let feat = self.shared.forward(&m)?.relu();
        let gamma = self.gamma_head.forward(&feat)?;
        let beta = self.beta_head.forward(&feat)?;
        if gamma.shape()[1] != hs[1] {
            return Err(Error::Shape(format!(
                "modulation channels {} != activation channels {}",
                gamma.shape()[1],
                hs[1]
            )));
        }
        channel_norm(h)?.mul(&gamma)?.add(&beta)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.shared.collect_params(&format!("{prefix}.shared"), out);
        self.gamma_head.collect_params(&format!("{prefix}.gamma"), out);
        self.beta_head.collect_params(&format!("{prefix}.beta"), out);
    }

    /// Force γ ≡ 1, β ≡ 0 (identity modulation); used by tests to expose the
    /// bare standardization path.
    pub fn force_identity(&self) {
        self.gamma_head.weight.update_data(|w| w.fill(T::zero()));
        self.gamma_head.bias.update_data(|b| b.fill(T::one()));
        self.beta_head.weight.update_data(|w| w.fill(T::zero()));
        self.beta_head.bias.update_data(|b| b.fill(T::zero()));
    }
}

enum NormLayer<T: Element> {
    Spade(SpadeNorm<T>),
    Plain(ChannelAffine<T>),
}

impl<T: Element> NormLayer<T> {
    fn forward(&self, h: &Tensor<T>, onehot: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            NormLayer::Spade(s) => s.forward(h, onehot),
            NormLayer::Plain(a) => a.forward(&channel_norm(h)?),
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        match self {
            NormLayer::Spade(s) => s.collect_params(prefix, out),
            NormLayer::Plain(a) => a.collect_params(prefix, out),
        }
    }
}

/// conv → add σ-embedding bias → norm → relu
struct ConvBlock<T: Element> {
    conv: Conv2d<T>,
    emb: Linear<T>,
    norm: NormLayer<T>,
}

impl<T: Element> ConvBlock<T> {
    fn new(rng: &mut Rng, cfg: &DenoiserConfig, in_ch: usize, out_ch: usize, spade: bool) -> Self {
        ConvBlock {
            conv: Conv2d::new(rng, in_ch, out_ch, 3, 1, 1),
            emb: Linear::new(rng, cfg.sigma_embedding_dim, out_ch),
            norm: if spade {
                NormLayer::Spade(SpadeNorm::new(rng, cfg.label_channels, cfg.spade_hidden, out_ch))
            } else {
                NormLayer::Plain(ChannelAffine::new(out_ch))
            },
        }
    }

    fn forward(&self, x: &Tensor<T>, emb: &Tensor<T>, onehot: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv.forward(x)?;
        let n = h.shape()[0];
        let c = h.shape()[1];
        let bias = self.emb.forward(emb)?.reshape(&[n, c, 1, 1])?;
        let h = h.add(&bias)?;
        Ok(self.norm.forward(&h, onehot)?.relu())
    }

    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.emb.collect_params(&format!("{prefix}.emb"), out);
        self.norm.collect_params(&format!("{prefix}.norm"), out);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Replace all normalization layers with SPADE blocks; `false` keeps the
    /// encoder on plain norms (decoder-only conditioning).
    pub spade_everywhere: bool,
    pub sigma_embedding_dim: usize,
    pub spade_hidden: usize,
    pub label_channels: usize,
    /// Std of the training data; drives the preconditioning scales.
    pub sigma_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            levels: 3,
            base_channels: 32,
            spade_everywhere: true,
            sigma_embedding_dim: 16,
            spade_hidden: 16,
            label_channels: crate::sector::NUM_LABELS,
            sigma_data: 0.5,
        }
    }
}

impl DenoiserConfig {
    /// Desk-scale default for a 16×16 latent operand.
    pub fn latent_default() -> Self {
        DenoiserConfig {
            levels: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_channels == 0 {
            return Err(Error::InvalidParam(
                "denoiser needs levels >= 1 and channels > 0".to_string(),
            ));
        }
        if self.sigma_embedding_dim < 2 || self.sigma_embedding_dim % 2 != 0 {
            return Err(Error::InvalidParam(
                "sigma_embedding_dim must be an even count >= 2".to_string(),
            ));
        }
        if self.sigma_data <= 0.0 {
            return Err(Error::InvalidParam("sigma_data must be positive".to_string()));
        }
        Ok(())
    }
}

struct EncLevel<T: Element> {
    b1: ConvBlock<T>,
    b2: ConvBlock<T>,
    down: Option<Conv2d<T>>,
}

struct DecLevel<T: Element> {
    up: Conv2d<T>,
    b1: ConvBlock<T>,
    b2: ConvBlock<T>,
}

/// SPADE-conditioned U-Net with noise-level preconditioning:
/// D(x|Φ;σ) = c_skip(σ)·x + c_out(σ)·F(c_in(σ)·x; ln σ/4, Φ).
pub struct SpadeUnet<T: Element> {
    pub cfg: DenoiserConfig,
    freqs: Vec<f64>,
    stem: Conv2d<T>,
    enc: Vec<EncLevel<T>>,
    dec: Vec<DecLevel<T>>,
    head: Conv2d<T>,
}

impl<T: Element> SpadeUnet<T> {
    pub fn new(rng: &mut Rng, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = |i: usize| cfg.base_channels << i.min(3);
        let stem = Conv2d::new(rng, 1, ch(0), 3, 1, 1);
        let mut enc = Vec::new();
        for i in 0..cfg.levels {
            let spade = cfg.spade_everywhere;
            let b1 = ConvBlock::new(rng, &cfg, ch(i), ch(i), spade);
            let b2 = ConvBlock::new(rng, &cfg, ch(i), ch(i), spade);
            let down = if i + 1 < cfg.levels {
                Some(Conv2d::new(rng, ch(i), ch(i + 1), 3, 2, 1))
            } else {
                None
            };
            enc.push(EncLevel { b1, b2, down });
        }
        let mut dec = Vec::new();
        for i in (0..cfg.levels.saturating_sub(1)).rev() {
            let up = Conv2d::new(rng, ch(i + 1), ch(i), 3, 1, 1);
            let b1 = ConvBlock::new(rng, &cfg, 2 * ch(i), ch(i), true);
            let b2 = ConvBlock::new(rng, &cfg, ch(i), ch(i), true);
            dec.push(DecLevel { up, b1, b2 });
        }
        let head = Conv2d::new(rng, ch(0), 1, 3, 1, 1);
        // Fixed (non-trainable) Fourier frequencies for the log-sigma
        // embedding, derived from the embedding width alone so a checkpoint
        // reload reproduces them exactly.
        let mut freq_rng = crate::rng::derive_rng(0x5167_4A00, cfg.sigma_embedding_dim as u64);
        let freqs: Vec<f64> = (0..cfg.sigma_embedding_dim / 2)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut freq_rng))
            .collect();
        Ok(SpadeUnet {
            cfg,
            freqs,
            stem,
            enc,
            dec,
            head,
        })
    }

    fn sigma_embedding(&self, c_noise: &[f64], n: usize) -> Tensor<T> {
        let e = self.cfg.sigma_embedding_dim;
        let mut data = Vec::with_capacity(n * e);
        for i in 0..n {
            let z = c_noise[i.min(c_noise.len() - 1)];
            for &f in &self.freqs {
                let arg = 2.0 * std::f64::consts::PI * f * z;
                data.push(T::from_f64(arg.cos()));
                data.push(T::from_f64(arg.sin()));
            }
        }
        Tensor::from_vec(&[n, e], data).expect("embedding shape consistent")
    }

    /// Raw network F (before preconditioning). `c_noise` has one entry per
    /// sample (or one shared entry).
    pub fn forward_raw(
        &self,
        x: &Tensor<T>,
        c_noise: &[f64],
        onehot: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != 1 {
            return Err(Error::Shape(format!(
                "denoiser expects [N,1,H,W], got {:?}",
                xs
            )));
        }
        if onehot.shape()[0] != xs[0] {
            return Err(Error::Shape(format!(
                "conditioning batch {} != input batch {}",
                onehot.shape()[0],
                xs[0]
            )));
        }
        let side = 1usize << (self.cfg.levels - 1);
        if xs[2] % side != 0 || xs[3] % side != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} not divisible by 2^{}",
                xs[2],
                xs[3],
                self.cfg.levels - 1
            )));
        }
        let emb = self.sigma_embedding(c_noise, xs[0]);
        let mut h = self.stem.forward(x)?;
        let mut skips: Vec<Tensor<T>> = Vec::new();
        for (i, level) in self.enc.iter().enumerate() {
            h = level.b1.forward(&h, &emb, onehot)?;
            h = level.b2.forward(&h, &emb, onehot)?;
            if let Some(down) = &level.down {
                skips.push(h.clone());
                h = down.forward(&h)?.relu();
            }
            let _ = i;
        }
        for level in &self.dec {
            let up = h.resample(ResampleMode::NearestUp, 2)?;
            h = level.up.forward(&up)?.relu();
            let skip = skips.pop().expect("skip per decoder level");
            h = Tensor::concat(&[skip, h], 1)?;
            h = level.b1.forward(&h, &emb, onehot)?;
            h = level.b2.forward(&h, &emb, onehot)?;
        }
        self.head.forward(&h)
    }

    pub fn named_params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.stem.collect_params("stem", &mut out);
        for (i, l) in self.enc.iter().enumerate() {
            l.b1.collect_params(&format!("enc{i}.b1"), &mut out);
            l.b2.collect_params(&format!("enc{i}.b2"), &mut out);
            if let Some(d) = &l.down {
                d.collect_params(&format!("enc{i}.down"), &mut out);
            }
        }
        for (i, l) in self.dec.iter().enumerate() {
            l.up.collect_params(&format!("dec{i}.up"), &mut out);
            l.b1.collect_params(&format!("dec{i}.b1"), &mut out);
            l.b2.collect_params(&format!("dec{i}.b2"), &mut out);
        }
        self.head.collect_params("head", &mut out);
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }
}

impl<T: Element> Denoiser<T> for SpadeUnet<T> {
    fn denoise(&self, x: &Tensor<T>, sigma: &[T], phi: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let phi = phi.ok_or_else(|| {
            Error::InvalidParam("SpadeUnet requires a semantic conditioning map".to_string())
        })?;
        let n = x.shape()[0];
        let sd = self.cfg.sigma_data;
        let mut c_skip = Vec::with_capacity(n);
        let mut c_out = Vec::with_capacity(n);
        let mut c_in = Vec::with_capacity(n);
        let mut c_noise = Vec::with_capacity(n);
        for i in 0..n {
            let s = sigma[i.min(sigma.len() - 1)].to_f64_();
            if s < 0.0 {
                return Err(Error::Domain(format!("negative sigma {s}")));
            }
            let s2 = s * s;
            let sd2 = sd * sd;
            c_skip.push(T::from_f64(sd2 / (s2 + sd2)));
            c_out.push(T::from_f64(s * sd / (s2 + sd2).sqrt()));
            c_in.push(T::from_f64(1.0 / (s2 + sd2).sqrt()));
            c_noise.push(if s > 0.0 { s.ln() / 4.0 } else { -20.0 });
        }
        let as_col = |v: Vec<T>| Tensor::from_vec(&[n, 1, 1, 1], v).expect("per-sample scale");
        let xin = x.mul(&as_col(c_in))?;
        let f = self.forward_raw(&xin, &c_noise, phi)?;
        x.mul(&as_col(c_skip))?.add(&f.mul(&as_col(c_out))?)
    }
}
