//! Downstream utility evaluation: Dice, Hausdorff (brute force and exact
//! distance-transform fast path), accuracy, subset bootstrap, and the small
//! U-Net segmenter / CNN view classifier trained on synthetic data and
//! tested on held-out phantoms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, Linear, NamedParams};
use crate::phantom::{augment_record, colour_augment, DatasetRecord, GeomTransform, View};
use crate::rng::{rng_from_seed, Rng};
use crate::sector::{SemanticMap, LABEL_LV_ENDO, NUM_LABELS};
use crate::spade::one_hot_batch;
use crate::tensor::{no_grad, Element, ResampleMode, Tensor};
use crate::vae::{batch_images, AugmentPolicy};

/// Dice = 2|X∩Y| / (|X|+|Y|); both empty → 1, exactly one empty → 0.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "dice needs equal-length masks, {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        a += (p != 0) as usize;
        b += (g != 0) as usize;
        inter += (p != 0 && g != 0) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Directed max–min Euclidean distances, brute force O(|X|·|Y|).
pub fn hausdorff_brute(x_bits: &[u8], y_bits: &[u8], h: usize, w: usize) -> Result<f64> {
    let xs = points_of(x_bits, h, w)?;
    let ys = points_of(y_bits, h, w)?;
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> f64 {
        let mut worst = 0i64;
        for &(ay, ax) in from {
            let mut best = i64::MAX;
            for &(by, bx) in to {
                let d = (ay - by) * (ay - by) + (ax - bx) * (ax - bx);
                if d < best {
                    best = d;
                }
            }
            if best > worst {
                worst = best;
            }
        }
        (worst as f64).sqrt()
    };
    Ok(directed(&xs, &ys).max(directed(&ys, &xs)))
}

fn points_of(bits: &[u8], h: usize, w: usize) -> Result<Vec<(i64, i64)>> {
    if bits.len() != h * w {
        return Err(Error::Shape("mask size mismatch".to_string()));
    }
    let pts: Vec<(i64, i64)> = (0..h * w)
        .filter(|&i| bits[i] != 0)
        .map(|i| ((i / w) as i64, (i % w) as i64))
        .collect();
    if pts.is_empty() {
        return Err(Error::Domain(
            "hausdorff is undefined for an empty mask (case excluded)".to_string(),
        ));
    }
    Ok(pts)
}

/// Exact squared Euclidean distance transform (two-pass 1-D lower
/// envelopes) to the nearest set pixel.
fn squared_edt(bits: &[u8], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = 1e18;
    let mut grid: Vec<f64> = bits.iter().map(|&b| if b != 0 { 0.0 } else { INF }).collect();
    let mut f = vec![0.0f64; h.max(w)];
    let mut d = vec![0.0f64; h.max(w)];
    let mut v = vec![0usize; h.max(w)];
    let mut z = vec![0.0f64; h.max(w) + 1];
    // columns
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    // rows
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] && k == 0 {
            // q dominates everywhere
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = ((q as i64 - p as i64) * (q as i64 - p as i64)) as f64 + f[p];
    }
}

/// H(X,Y) = max(h(X,Y), h(Y,X)) via the distance-transform fast path;
/// equals the brute-force computation exactly. Empty masks are an error
/// (the case is excluded from statistics, never scored 0).
pub fn hausdorff(x_bits: &[u8], y_bits: &[u8], h: usize, w: usize) -> Result<f64> {
    points_of(x_bits, h, w)?;
    points_of(y_bits, h, w)?;
    let dty = squared_edt(y_bits, h, w);
    let dtx = squared_edt(x_bits, h, w);
    let mut worst: f64 = 0.0;
    for i in 0..h * w {
        if x_bits[i] != 0 && dty[i] > worst {
            worst = dty[i];
        }
        if y_bits[i] != 0 && dtx[i] > worst {
            worst = dtx[i];
        }
    }
    Ok(worst.sqrt())
}

/// (TP+TN) / all for binary label sequences.
pub fn accuracy(preds: &[u8], gts: &[u8]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Shape("accuracy needs equal, non-empty label lists".to_string()));
    }
    if preds.iter().chain(gts).any(|&v| v > 1) {
        return Err(Error::InvalidParam("accuracy expects binary labels".to_string()));
    }
    let correct = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Metric point estimate plus subset-bootstrap statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: String,
    pub point: f64,
    pub bootstrap_mean: f64,
    pub bootstrap_std: f64,
    pub n_iterations: usize,
    pub fraction: f64,
    pub seed: u64,
}

/// Subset bootstrap: each iteration draws ⌊fraction·n⌋ cases without
/// replacement (set `with_replacement` for the classical variant) and
/// recomputes the mean; reports mean and std over iterations.
pub fn bootstrap(
    metric: &str,
    values: &[f64],
    fraction: f64,
    iterations: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<MetricsReport> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidParam(format!(
            "bootstrap needs >= 2 cases, got {n}"
        )));
    }
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::InvalidParam("fraction must be in (0, 1]".to_string()));
    }
    let k = ((fraction * n as f64).floor() as usize).max(1);
    let mut rng = rng_from_seed(seed);
    let mut means = Vec::with_capacity(iterations);
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..iterations {
        let mut acc = 0.0;
        if with_replacement {
            for _ in 0..k {
                acc += values[rand::Rng::random_range(&mut rng, 0..n)];
            }
        } else {
            // partial Fisher–Yates; sum in index order so the subset mean
            // is independent of the selection order
            for i in 0..k {
                let j = rand::Rng::random_range(&mut rng, i..n);
                idx.swap(i, j);
            }
            let mut subset: Vec<usize> = idx[..k].to_vec();
            subset.sort_unstable();
            for &i in &subset {
                acc += values[i];
            }
        }
        means.push(acc / k as f64);
    }
    let m = means.iter().sum::<f64>() / iterations as f64;
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // identical iteration means have zero spread; don't let the rounded
    // mean estimator manufacture a tiny variance
    let var = if lo == hi {
        0.0
    } else {
        means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / iterations as f64
    };
    Ok(MetricsReport {
        metric: metric.to_string(),
        point: values.iter().sum::<f64>() / n as f64,
        bootstrap_mean: m,
        bootstrap_std: var.sqrt(),
        n_iterations: iterations,
        fraction,
        seed,
    })
}

/// Small plain U-Net for segmentation (the desk-scale stand-in for the
/// paper's benchmark segmenter).
pub struct SegUNet<T: Element> {
    stem: Conv2d<T>,
    enc: Vec<(Conv2d<T>, Option<Conv2d<T>>)>,
    dec: Vec<(Conv2d<T>, Conv2d<T>)>,
    head: Conv2d<T>,
    pub levels: usize,
}

impl<T: Element> SegUNet<T> {
    pub fn new(rng: &mut Rng, levels: usize, base: usize, classes: usize) -> Self {
        let ch = |i: usize| base << i.min(3);
        let stem = Conv2d::new(rng, 1, ch(0), 3, 1, 1);
        let mut enc = Vec::new();
        for i in 0..levels {
            let conv = Conv2d::new(rng, ch(i), ch(i), 3, 1, 1);
            let down = if i + 1 < levels {
                Some(Conv2d::new(rng, ch(i), ch(i + 1), 3, 2, 1))
            } else {
                None
            };
            enc.push((conv, down));
        }
        let mut dec = Vec::new();
        for i in (0..levels.saturating_sub(1)).rev() {
            let up = Conv2d::new(rng, ch(i + 1), ch(i), 3, 1, 1);
            let fuse = Conv2d::new(rng, 2 * ch(i), ch(i), 3, 1, 1);
            dec.push((up, fuse));
        }
        let head = Conv2d::new(rng, ch(0), classes, 3, 1, 1);
        SegUNet {
            stem,
            enc,
            dec,
            head,
            levels,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.stem.forward(x)?.relu();
        let mut skips = Vec::new();
        for (conv, down) in &self.enc {
            h = conv.forward(&h)?.relu();
            if let Some(d) = down {
                skips.push(h.clone());
                h = d.forward(&h)?.relu();
            }
        }
        for (up, fuse) in &self.dec {
            let u = h.resample(ResampleMode::NearestUp, 2)?;
            h = up.forward(&u)?.relu();
            let skip = skips.pop().expect("skip per level");
            h = Tensor::concat(&[skip, h], 1)?;
            h = fuse.forward(&h)?.relu();
        }
        self.head.forward(&h)
    }

    pub fn named_params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.stem.collect_params("stem", &mut out);
        for (i, (c, d)) in self.enc.iter().enumerate() {
            c.collect_params(&format!("enc{i}"), &mut out);
            if let Some(d) = d {
                d.collect_params(&format!("enc{i}.down"), &mut out);
            }
        }
        for (i, (u, f)) in self.dec.iter().enumerate() {
            u.collect_params(&format!("dec{i}.up"), &mut out);
            f.collect_params(&format!("dec{i}.fuse"), &mut out);
        }
        self.head.collect_params("head", &mut out);
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Per-pixel argmax labels.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let logits = no_grad(|| self.forward(x))?;
        let s = logits.shape().to_vec();
        let (n, k, hh, ww) = (s[0], s[1], s[2], s[3]);
        let data = logits.to_vec();
        let mut out = vec![0u8; n * hh * ww];
        for i in 0..n {
            for p in 0..hh * ww {
                let mut best = (0usize, T::neg_infinity());
                for c in 0..k {
                    let v = data[(i * k + c) * hh * ww + p];
                    if v > best.1 {
                        best = (c, v);
                    }
                }
                out[i * hh * ww + p] = best.0 as u8;
            }
        }
        Ok(out)
    }
}

/// Four stride-2 convolutions with global average pooling: the desk-scale
/// view classifier.
pub struct ViewClassifier<T: Element> {
    convs: Vec<Conv2d<T>>,
    fc: Linear<T>,
}

impl<T: Element> ViewClassifier<T> {
    pub fn new(rng: &mut Rng, base: usize) -> Self {
        let mut convs = Vec::new();
        let widths = [1usize, base, base * 2, base * 4, base * 4];
        for i in 0..4 {
            convs.push(Conv2d::new(rng, widths[i], widths[i + 1], 3, 2, 1));
        }
        let fc = Linear::new(rng, base * 4, 2);
        ViewClassifier { convs, fc }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu();
        }
        let pooled = h.mean_axes(&[2, 3])?;
        let s = pooled.shape().to_vec();
        let flat = pooled.reshape(&[s[0], s[1]])?;
        self.fc.forward(&flat)
    }

    pub fn named_params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.collect_params(&format!("conv{i}"), &mut out);
        }
        self.fc.collect_params("fc", &mut out);
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let logits = no_grad(|| self.forward(x))?;
        let d = logits.to_vec();
        Ok((0..logits.shape()[0])
            .map(|i| u8::from(d[i * 2 + 1] > d[i * 2]))
            .collect())
    }
}

/// −mean log-softmax of the target class over all pixels.
pub fn cross_entropy_pixels<T: Element>(
    logits: &Tensor<T>,
    targets: &[&SemanticMap],
) -> Result<Tensor<T>> {
    let onehot = one_hot_batch::<T>(targets, logits.shape()[1])?;
    let m = logits.max_detached_axes(&[1])?;
    let z = logits.sub(&m)?;
    let lse = z.exp().sum_axes(&[1])?.ln()?;
    let ll = z.sub(&lse)?;
    let picked = onehot.mul(&ll)?;
    let s = logits.shape();
    let denom = T::from_f64((s[0] * s[2] * s[3]) as f64);
    Ok(picked.sum().scale(-T::one() / denom))
}

/// −mean log-softmax for [N,2] logits and binary labels.
pub fn cross_entropy_binary<T: Element>(logits: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    let n = logits.shape()[0];
    if labels.len() != n {
        return Err(Error::Shape("label count mismatch".to_string()));
    }
    let mut oh = vec![T::zero(); n * 2];
    for (i, &l) in labels.iter().enumerate() {
        oh[i * 2 + l as usize] = T::one();
    }
    let onehot = Tensor::from_vec(&[n, 2], oh)?;
    let m = logits.max_detached_axes(&[1])?;
    let z = logits.sub(&m)?;
    let lse = z.exp().sum_axes(&[1])?.ln()?;
    let ll = z.sub(&lse)?;
    Ok(onehot.mul(&ll)?.sum().scale(-T::one() / T::from_f64(n as f64)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Adam learning rate (1e-4, matching the downstream protocol).
    pub lr: f64,
    pub seed: u64,
    pub levels: usize,
    pub base_channels: usize,
    pub augment: AugmentPolicy,
    pub bootstrap_iterations: usize,
    pub bootstrap_fraction: f64,
}

impl Default for DownstreamTrainConfig {
    fn default() -> Self {
        DownstreamTrainConfig {
            steps: 600,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            levels: 3,
            base_channels: 8,
            augment: AugmentPolicy::full(),
            bootstrap_iterations: 1000,
            bootstrap_fraction: 0.8,
        }
    }
}

fn augmented_batch(records: &[DatasetRecord], idx: &[usize], rng: &mut Rng, policy: AugmentPolicy) -> Vec<DatasetRecord> {
    let mut batch: Vec<DatasetRecord> = idx.iter().map(|&i| records[i].clone()).collect();
    for rec in batch.iter_mut() {
        if policy.geometric {
            let t = GeomTransform::draw(rng, rec.h, rec.w);
            if let Ok(aug) = augment_record(rec, &t) {
                *rec = aug;
            }
        }
        if policy.colourimetric {
            colour_augment(&mut rec.image, rng);
        }
    }
    batch
}

/// Train the segmenter on (image → semantic map) pairs; returns the model
/// and the per-step loss trace.
pub fn train_segmenter(
    train: &[DatasetRecord],
    cfg: &DownstreamTrainConfig,
) -> Result<(SegUNet<f32>, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Dataset("empty segmentation training set".to_string()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let net = SegUNet::<f32>::new(&mut rng, cfg.levels, cfg.base_channels, NUM_LABELS);
    let mut opt = Adam::new(net.parameters(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..train.len()))
            .collect();
        let batch = augmented_batch(train, &idx, &mut rng, cfg.augment);
        let refs: Vec<&DatasetRecord> = batch.iter().collect();
        let x = batch_images::<f32>(&refs)?;
        let maps: Vec<&SemanticMap> = batch.iter().map(|r| &r.map).collect();
        let logits = net.forward(&x)?;
        let loss = cross_entropy_pixels(&logits, &maps)?;
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::Diverged(format!("segmenter loss became {v} at step {step}")));
        }
        loss.backward()?;
        opt.step();
        losses.push(v);
    }
    Ok((net, losses))
}

pub struct SegEvaluation {
    pub reports: Vec<MetricsReport>,
    /// Cases excluded from the Hausdorff statistics (empty prediction or
    /// ground truth); reported, never scored as zero.
    pub hd_excluded: usize,
}

/// Per-label Dice for the three structures plus LV-endocardium Hausdorff,
/// bootstrapped over test cases.
pub fn evaluate_segmenter(
    net: &SegUNet<f32>,
    test: &[DatasetRecord],
    cfg: &DownstreamTrainConfig,
) -> Result<SegEvaluation> {
    if test.len() < 2 {
        return Err(Error::Dataset("need >= 2 test cases".to_string()));
    }
    let mut dice_per_label: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut hd_vals = Vec::new();
    let mut hd_excluded = 0usize;
    for r in test {
        let x = batch_images::<f32>(&[r])?;
        let pred = net.predict(&x)?;
        for label in [1u8, 2, 3] {
            let pm: Vec<u8> = pred.iter().map(|&p| u8::from(p == label)).collect();
            let gm = r.map.label_mask(label);
            dice_per_label.entry(label).or_default().push(dice(&pm, &gm)?);
        }
        let pm: Vec<u8> = pred.iter().map(|&p| u8::from(p == LABEL_LV_ENDO)).collect();
        let gm = r.map.label_mask(LABEL_LV_ENDO);
        match hausdorff(&pm, &gm, r.h, r.w) {
            Ok(d) => hd_vals.push(d),
            Err(_) => hd_excluded += 1,
        }
    }
    let mut reports = Vec::new();
    let names: BTreeMap<u8, &str> = BTreeMap::from([(1u8, "dice_lv_myo"), (2, "dice_lv_endo"), (3, "dice_la")]);
    for (label, vals) in &dice_per_label {
        reports.push(bootstrap(
            names[label],
            vals,
            cfg.bootstrap_fraction,
            cfg.bootstrap_iterations,
            cfg.seed,
            false,
        )?);
    }
    if hd_vals.len() >= 2 {
        reports.push(bootstrap(
            "hd_lv_endo",
            &hd_vals,
            cfg.bootstrap_fraction,
            cfg.bootstrap_iterations,
            cfg.seed,
            false,
        )?);
    }
    Ok(SegEvaluation {
        reports,
        hd_excluded,
    })
}

/// Train the view classifier (A2C vs A4C).
pub fn train_classifier(
    train: &[DatasetRecord],
    cfg: &DownstreamTrainConfig,
) -> Result<(ViewClassifier<f32>, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Dataset("empty classification training set".to_string()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let net = ViewClassifier::<f32>::new(&mut rng, cfg.base_channels);
    let mut opt = Adam::new(net.parameters(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..train.len()))
            .collect();
        let batch = augmented_batch(train, &idx, &mut rng, cfg.augment);
        let refs: Vec<&DatasetRecord> = batch.iter().collect();
        let x = batch_images::<f32>(&refs)?;
        let labels: Vec<u8> = batch.iter().map(|r| u8::from(r.view == View::A4C)).collect();
        let logits = net.forward(&x)?;
        let loss = cross_entropy_binary(&logits, &labels)?;
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::Diverged(format!("classifier loss became {v} at step {step}")));
        }
        loss.backward()?;
        opt.step();
        losses.push(v);
    }
    Ok((net, losses))
}

/// Accuracy on the test split with a bootstrap over per-case correctness.
pub fn evaluate_classifier(
    net: &ViewClassifier<f32>,
    test: &[DatasetRecord],
    cfg: &DownstreamTrainConfig,
) -> Result<MetricsReport> {
    if test.len() < 2 {
        return Err(Error::Dataset("need >= 2 test cases".to_string()));
    }
    let mut correct = Vec::with_capacity(test.len());
    for r in test {
        let x = batch_images::<f32>(&[r])?;
        let pred = net.predict(&x)?[0];
        let gt = u8::from(r.view == View::A4C);
        correct.push(f64::from(pred == gt));
    }
    bootstrap(
        "accuracy",
        &correct,
        cfg.bootstrap_fraction,
        cfg.bootstrap_iterations,
        cfg.seed,
        false,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityCell {
    pub model_id: String,
    pub nfe: usize,
    pub dataset_dir: std::path::PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityRow {
    pub model: String,
    pub nfe: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

pub struct UtilityCurve {
    pub rows: Vec<UtilityRow>,
    /// Cells whose dataset was missing; reported, not failed.
    pub holes: Vec<UtilityCell>,
}

/// One downstream training per (model, NFE) cell, metrics via bootstrap.
/// `which` selects segmentation, classification, or both.
pub fn utility_curve(
    cells: &[UtilityCell],
    test: &[DatasetRecord],
    cfg: &DownstreamTrainConfig,
    seg: bool,
    cls: bool,
) -> Result<UtilityCurve> {
    let mut rows = Vec::new();
    let mut holes = Vec::new();
    for cell in cells {
        if !cell.dataset_dir.join("manifest.json").exists() {
            log::warn!("utility cell missing: {:?}", cell.dataset_dir);
            holes.push(cell.clone());
            continue;
        }
        let (_, train_records) = crate::sampler::load_generated(&cell.dataset_dir)?;
        if seg {
            let (net, _) = train_segmenter(&train_records, cfg)?;
            let ev = evaluate_segmenter(&net, test, cfg)?;
            for r in &ev.reports {
                rows.push(UtilityRow {
                    model: cell.model_id.clone(),
                    nfe: cell.nfe,
                    metric: r.metric.clone(),
                    mean: r.bootstrap_mean,
                    std: r.bootstrap_std,
                });
            }
        }
        if cls {
            let (net, _) = train_classifier(&train_records, cfg)?;
            let r = evaluate_classifier(&net, test, cfg)?;
            rows.push(UtilityRow {
                model: cell.model_id.clone(),
                nfe: cell.nfe,
                metric: r.metric.clone(),
                mean: r.bootstrap_mean,
                std: r.bootstrap_std,
            });
        }
    }
    Ok(UtilityCurve { rows, holes })
}

/// CSV with columns exactly: model,nfe,metric,mean,std.
pub fn write_utility_csv(path: &Path, rows: &[UtilityRow]) -> Result<()> {
    let mut out = String::from("model,nfe,metric,mean,std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model, r.nfe, r.metric, r.mean, r.std
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
