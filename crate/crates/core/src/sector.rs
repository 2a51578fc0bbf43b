//! Sector masks, semantic label maps, and sector-restricted loss reduction.
//! Every training objective in the crate funnels through `masked_mean_loss`,
//! which is what keeps background pixels exactly out of all gradients.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_LV_MYO: u8 = 1;
pub const LABEL_LV_ENDO: u8 = 2;
pub const LABEL_LA: u8 = 3;
pub const LABEL_SECTOR_TISSUE: u8 = 4;
/// The label alphabet: background, LV myocardium, LV endocardium, LA,
/// in-sector tissue.
pub const NUM_LABELS: usize = 5;

/// Binary in-sector mask with a cached in-sector pixel count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorMask {
    h: usize,
    w: usize,
    mask: Vec<u8>,
    count_in: usize,
}

impl SectorMask {
    /// Build from 0/1 values; rejects other values and empty masks.
    pub fn from_binary(h: usize, w: usize, bits: &[u8]) -> Result<Self> {
        let m = Self::from_binary_allow_empty(h, w, bits)?;
        if m.count_in == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(m)
    }

    /// Same, but permits an all-zero mask (loss ops still reject those).
    pub fn from_binary_allow_empty(h: usize, w: usize, bits: &[u8]) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!(
                "mask data length {} != {}x{}",
                bits.len(),
                h,
                w
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidParam("mask values must be 0 or 1".to_string()));
        }
        let count_in = bits.iter().map(|&b| b as usize).sum();
        Ok(SectorMask {
            h,
            w,
            mask: bits.to_vec(),
            count_in,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn count_in(&self) -> usize {
        self.count_in
    }

    pub fn bits(&self) -> &[u8] {
        &self.mask
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.mask[y * self.w + x]
    }

    /// Constant [1,1,h,w] tensor of the mask; broadcasts over batches.
    pub fn as_tensor<T: Element>(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .mask
            .iter()
            .map(|&b| if b == 1 { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(&[1, 1, self.h, self.w], data).expect("mask shape is consistent")
    }

    /// Majority-vote downsampling by an integer factor; ties resolve to
    /// in-sector so boundary pixels stay supervised.
    pub fn downsample(&self, factor: usize) -> Result<SectorMask> {
        if factor == 0 {
            return Err(Error::InvalidParam("factor must be >= 1".to_string()));
        }
        if self.h % factor != 0 || self.w % factor != 0 {
            return Err(Error::Shape(format!(
                "mask {}x{} not divisible by factor {}",
                self.h, self.w, factor
            )));
        }
        let (oh, ow) = (self.h / factor, self.w / factor);
        let mut out = vec![0u8; oh * ow];
        let block = factor * factor;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut ones = 0usize;
                for dy in 0..factor {
                    for dx in 0..factor {
                        ones += self.mask[(oy * factor + dy) * self.w + ox * factor + dx] as usize;
                    }
                }
                out[oy * ow + ox] = u8::from(2 * ones >= block);
            }
        }
        SectorMask::from_binary_allow_empty(oh, ow, &out)
    }
}

/// Integer label image over the five-label alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl SemanticMap {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "label data length {} != {}x{}",
                labels.len(),
                h,
                w
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_LABELS) {
            return Err(Error::InvalidParam(format!(
                "unknown label {bad}; alphabet is 0..{}",
                NUM_LABELS - 1
            )));
        }
        Ok(SemanticMap { h, w, labels })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    /// In-sector mask derived from label >= 1.
    pub fn sector_mask(&self) -> Result<SectorMask> {
        let bits: Vec<u8> = self.labels.iter().map(|&l| u8::from(l >= 1)).collect();
        SectorMask::from_binary(self.h, self.w, &bits)
    }

    /// Binary mask of one structure label.
    pub fn label_mask(&self, label: u8) -> Vec<u8> {
        self.labels.iter().map(|&l| u8::from(l == label)).collect()
    }

    /// Nearest-neighbor downsample (labels are never interpolated).
    pub fn downsample_nearest(&self, factor: usize) -> Result<SemanticMap> {
        if factor == 0 || self.h % factor != 0 || self.w % factor != 0 {
            return Err(Error::Shape(format!(
                "map {}x{} not divisible by factor {}",
                self.h, self.w, factor
            )));
        }
        let (oh, ow) = (self.h / factor, self.w / factor);
        let mut out = vec![0u8; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                out[oy * ow + ox] = self.labels[(oy * factor) * self.w + ox * factor];
            }
        }
        SemanticMap::new(oh, ow, out)
    }
}

/// Mask extraction from an intensity image: threshold at `threshold` × max,
/// 3×3 morphological closing, keep the largest 4-connected component, fill
/// its enclosed holes (speckle makes anechoic regions drop below any usable
/// threshold).
pub fn sector_from_image(img: &[f32], h: usize, w: usize, threshold: f32) -> Result<SectorMask> {
    if img.len() != h * w {
        return Err(Error::Shape(format!(
            "image length {} != {}x{}",
            img.len(),
            h,
            w
        )));
    }
    if img.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain("image values must lie in [0, 1]".to_string()));
    }
    let max = img.iter().cloned().fold(0.0f32, f32::max);
    let cut = threshold * max;
    let mut bits: Vec<u8> = img.iter().map(|&v| u8::from(v > cut)).collect();
    bits = dilate3(&bits, h, w);
    bits = erode3(&bits, h, w);
    let bits = largest_component(&bits, h, w);
    let bits = fill_holes(&bits, h, w);
    SectorMask::from_binary(h, w, &bits).map_err(|_| {
        Error::Domain("empty sector: no pixels above threshold".to_string())
    })
}

fn dilate3(bits: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            'probe: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    if yy >= 0 && yy < h as i32 && xx >= 0 && xx < w as i32
                        && bits[yy as usize * w + xx as usize] == 1
                    {
                        out[y * w + x] = 1;
                        break 'probe;
                    }
                }
            }
        }
    }
    out
}

fn erode3(bits: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut all = true;
            'probe: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    // out-of-frame neighbors are ignored so closing stays
                    // neutral along the frame border
                    if yy < 0 || yy >= h as i32 || xx < 0 || xx >= w as i32 {
                        continue;
                    }
                    if bits[yy as usize * w + xx as usize] == 0 {
                        all = false;
                        break 'probe;
                    }
                }
            }
            out[y * w + x] = u8::from(all);
        }
    }
    out
}

fn largest_component(bits: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut label = vec![0u32; h * w];
    let mut next = 1u32;
    let mut best = (0u32, 0usize);
    let mut queue = Vec::new();
    for start in 0..h * w {
        if bits[start] == 1 && label[start] == 0 {
            let id = next;
            next += 1;
            let mut size = 0usize;
            queue.push(start);
            label[start] = id;
            while let Some(p) = queue.pop() {
                size += 1;
                let (y, x) = (p / w, p % w);
                let mut push = |q: usize| {
                    if bits[q] == 1 && label[q] == 0 {
                        label[q] = id;
                        queue.push(q);
                    }
                };
                if y > 0 {
                    push(p - w);
                }
                if y + 1 < h {
                    push(p + w);
                }
                if x > 0 {
                    push(p - 1);
                }
                if x + 1 < w {
                    push(p + 1);
                }
            }
            if size > best.1 {
                best = (id, size);
            }
        }
    }
    label
        .iter()
        .map(|&l| u8::from(l == best.0 && best.0 != 0))
        .collect()
}

fn fill_holes(bits: &[u8], h: usize, w: usize) -> Vec<u8> {
    // flood the complement from the border; unreached zeros are holes
    let mut outside = vec![false; h * w];
    let mut queue = Vec::new();
    let seed = |p: usize, outside: &mut Vec<bool>, queue: &mut Vec<usize>| {
        if bits[p] == 0 && !outside[p] {
            outside[p] = true;
            queue.push(p);
        }
    };
    for x in 0..w {
        seed(x, &mut outside, &mut queue);
        seed((h - 1) * w + x, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(y * w, &mut outside, &mut queue);
        seed(y * w + w - 1, &mut outside, &mut queue);
    }
    while let Some(p) = queue.pop() {
        let (y, x) = (p / w, p % w);
        let mut push = |q: usize| {
            if bits[q] == 0 && !outside[q] {
                outside[q] = true;
                queue.push(q);
            }
        };
        if y > 0 {
            push(p - w);
        }
        if y + 1 < h {
            push(p + w);
        }
        if x > 0 {
            push(p - 1);
        }
        if x + 1 < w {
            push(p + 1);
        }
    }
    (0..h * w)
        .map(|p| u8::from(bits[p] == 1 || !outside[p]))
        .collect()
}

/// Sector-restricted mean: sum(loss ⊙ mask) / count_in, per map. Gradient
/// flows only to in-sector pixels. `per_pixel_loss` is [N,C,H,W] (or [H,W]
/// compatible); the mask must match the trailing spatial dims.
pub fn masked_mean_loss<T: Element>(
    per_pixel_loss: &Tensor<T>,
    mask: &SectorMask,
) -> Result<Tensor<T>> {
    if mask.count_in() == 0 {
        return Err(Error::EmptyMask);
    }
    let shp = per_pixel_loss.shape();
    let (mh, mw) = mask.size();
    if shp.len() < 2 || shp[shp.len() - 2] != mh || shp[shp.len() - 1] != mw {
        return Err(Error::Shape(format!(
            "loss {:?} does not match mask {}x{}",
            shp, mh, mw
        )));
    }
    let n_maps: usize = shp[..shp.len() - 2].iter().product();
    let denom = T::from_f64((mask.count_in() * n_maps) as f64);
    Ok(per_pixel_loss
        .mul(&mask.as_tensor::<T>())?
        .sum()
        .scale(T::one() / denom))
}

/// Stack per-sample masks into an [N,1,h,w] constant tensor, returning the
/// total in-sector count.
pub fn stack_masks<T: Element>(masks: &[&SectorMask]) -> Result<(Tensor<T>, usize)> {
    if masks.is_empty() {
        return Err(Error::Shape("stack_masks of zero masks".to_string()));
    }
    let (h, w) = masks[0].size();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    let mut total = 0usize;
    for m in masks {
        if m.size() != (h, w) {
            return Err(Error::Shape("masks in a batch must share a size".to_string()));
        }
        total += m.count_in();
        data.extend(m.bits().iter().map(|&b| if b == 1 { T::one() } else { T::zero() }));
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((Tensor::from_vec(&[masks.len(), 1, h, w], data)?, total))
}

/// Batch variant of `masked_mean_loss`: one mask per sample,
/// sum(loss ⊙ masks) / Σ count_in.
pub fn masked_mean_loss_multi<T: Element>(
    per_pixel_loss: &Tensor<T>,
    masks: &[&SectorMask],
) -> Result<Tensor<T>> {
    let shp = per_pixel_loss.shape();
    if shp.len() != 4 || shp[0] != masks.len() {
        return Err(Error::Shape(format!(
            "loss {:?} does not match {} masks",
            shp,
            masks.len()
        )));
    }
    let (mask_t, total) = stack_masks::<T>(masks)?;
    let channels = shp[1];
    let denom = T::from_f64((total * channels) as f64);
    Ok(per_pixel_loss.mul(&mask_t)?.sum().scale(T::one() / denom))
}
