//! Synthetic sector-masked echo phantoms: 4-label semantic maps, Rayleigh
//! speckle, geometric map augmentation, the on-disk dataset format, and a
//! loader for CAMUS-style per-patient directories.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, Rng};
use crate::sector::{
    sector_from_image, SectorMask, SemanticMap, LABEL_LA, LABEL_LV_ENDO, LABEL_LV_MYO,
    LABEL_SECTOR_TISSUE, NUM_LABELS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum View {
    A2C,
    A4C,
}

impl View {
    pub fn tag(self) -> &'static str {
        match self {
            View::A2C => "A2C",
            View::A4C => "A4C",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum Phase {
    ED,
    ES,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::ED => "ED",
            Phase::ES => "ES",
        }
    }
}

/// Ellipse chamber layout in normalized [0,1]² coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChamberGeometry {
    pub lv_center: (f64, f64),
    pub lv_axes: (f64, f64),
    pub la_center: (f64, f64),
    pub la_axes: (f64, f64),
    /// Myocardial shell = LV ellipse scaled by this factor, minus the LV.
    pub myo_scale: f64,
}

impl ChamberGeometry {
    /// Base layouts: A4C arranges the two pools side by side, A2C stacks
    /// them vertically, which keeps the views linearly separable on
    /// quadrant intensities.
    pub fn for_view(view: View) -> Self {
        match view {
            View::A4C => ChamberGeometry {
                lv_center: (0.37, 0.52),
                lv_axes: (0.105, 0.155),
                la_center: (0.64, 0.60),
                la_axes: (0.085, 0.115),
                myo_scale: 1.30,
            },
            View::A2C => ChamberGeometry {
                lv_center: (0.50, 0.40),
                lv_axes: (0.115, 0.165),
                la_center: (0.50, 0.73),
                la_axes: (0.11, 0.09),
                myo_scale: 1.30,
            },
        }
    }

    fn with_phase(mut self, phase: Phase) -> Self {
        let k = match phase {
            Phase::ED => 1.10,
            Phase::ES => 0.85,
        };
        self.lv_axes = (self.lv_axes.0 * k, self.lv_axes.1 * k);
        self
    }

    fn jittered(mut self, rng: &mut Rng, pos_jitter: f64, axis_jitter: f64) -> Self {
        let mut j = |c: f64| c + pos_jitter * (2.0 * rng.random::<f64>() - 1.0);
        self.lv_center = (j(self.lv_center.0), j(self.lv_center.1));
        self.la_center = (j(self.la_center.0), j(self.la_center.1));
        let mut s = |a: f64| a * (1.0 + axis_jitter * (2.0 * rng.random::<f64>() - 1.0));
        self.lv_axes = (s(self.lv_axes.0), s(self.lv_axes.1));
        self.la_axes = (s(self.la_axes.0), s(self.la_axes.1));
        self
    }
}

/// Phantom generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub view: View,
    pub phase: Phase,
    pub resolution: usize,
    pub seed: u64,
    /// Explicit layout; `None` draws the per-view default with jitter.
    pub geometry: Option<ChamberGeometry>,
    /// Rayleigh σ_r per tissue label (index = label).
    pub speckle_sigma: [f64; NUM_LABELS],
}

impl PhantomSpec {
    pub fn new(view: View, phase: Phase, resolution: usize, seed: u64) -> Self {
        PhantomSpec {
            view,
            phase,
            resolution,
            seed,
            geometry: None,
            speckle_sigma: [1.0; NUM_LABELS],
        }
    }
}

/// Mean reflectivity per label (background, myo, endo, LA, sector tissue).
const BASE_INTENSITY: [f64; NUM_LABELS] = [0.0, 0.55, 0.10, 0.12, 0.28];
/// Rayleigh mean is σ√(π/2); divide it out so each tissue keeps its base
/// mean intensity.
const RAYLEIGH_MEAN_UNIT: f64 = 1.253_314_137_315_500_3;

/// One dataset record: image in [0,1], its exact semantic map, the sector
/// mask, and the labels a downstream task consumes.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub patient_id: u32,
    pub view: View,
    pub phase: Phase,
    pub aug_index: Option<u32>,
    pub h: usize,
    pub w: usize,
    pub image: Vec<f32>,
    pub map: SemanticMap,
    pub sector: SectorMask,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image.len() != self.h * self.w {
            return Err(Error::Dataset("image size mismatch".to_string()));
        }
        for (i, &v) in self.image.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Dataset(format!("pixel {i} out of [0,1]: {v}")));
            }
            if self.sector.bits()[i] == 0 && v != 0.0 {
                return Err(Error::Dataset(format!(
                    "background pixel {i} is {v}, must be exactly 0"
                )));
            }
        }
        for (i, &l) in self.map.labels().iter().enumerate() {
            if l >= 1 && self.sector.bits()[i] == 0 {
                return Err(Error::Dataset(format!(
                    "label {l} at pixel {i} lies outside the sector"
                )));
            }
        }
        Ok(())
    }
}

struct SectorGeometry {
    apex: (f64, f64),
    half_angle: f64,
    radius: f64,
}

impl SectorGeometry {
    fn desk_default() -> Self {
        SectorGeometry {
            apex: (0.5, 0.04),
            half_angle: 0.72,
            radius: 0.90,
        }
    }

    fn contains(&self, yn: f64, xn: f64) -> bool {
        let dy = yn - self.apex.1;
        let dx = xn - self.apex.0;
        if dy <= 0.0 {
            return false;
        }
        let r = (dx * dx + dy * dy).sqrt();
        if r > self.radius {
            return false;
        }
        dx.abs().atan2(dy) <= self.half_angle
    }
}

fn ellipse_contains(c: (f64, f64), axes: (f64, f64), yn: f64, xn: f64) -> bool {
    let dx = (xn - c.0) / axes.0;
    let dy = (yn - c.1) / axes.1;
    dx * dx + dy * dy <= 1.0
}

/// Label map + the pre-blur speckle image (the KS-testable intermediate).
pub struct PhantomParts {
    pub map: SemanticMap,
    pub sector: SectorMask,
    /// Raw speckle intensities before blur/clamp, full frame.
    pub pre_blur: Vec<f64>,
}

/// Rasterize the labels and speckle for a spec. Errors if any chamber pixel
/// falls outside the sector.
pub fn generate_phantom_parts(spec: &PhantomSpec) -> Result<PhantomParts> {
    let res = spec.resolution;
    if res < 16 {
        return Err(Error::InvalidParam("phantom resolution must be >= 16".to_string()));
    }
    let mut rng = derive_rng(spec.seed, 0xF0);
    let geom = match spec.geometry {
        Some(g) => g,
        None => ChamberGeometry::for_view(spec.view)
            .with_phase(spec.phase)
            .jittered(&mut rng, 0.01, 0.05),
    };
    let sector = SectorGeometry::desk_default();
    let mut labels = vec![0u8; res * res];
    let myo_axes = (geom.lv_axes.0 * geom.myo_scale, geom.lv_axes.1 * geom.myo_scale);
    for y in 0..res {
        for x in 0..res {
            let yn = (y as f64 + 0.5) / res as f64;
            let xn = (x as f64 + 0.5) / res as f64;
            let in_sector = sector.contains(yn, xn);
            let mut label = if in_sector { LABEL_SECTOR_TISSUE } else { 0 };
            let structure = if ellipse_contains(geom.lv_center, geom.lv_axes, yn, xn) {
                Some(LABEL_LV_ENDO)
            } else if ellipse_contains(geom.lv_center, myo_axes, yn, xn) {
                Some(LABEL_LV_MYO)
            } else if ellipse_contains(geom.la_center, geom.la_axes, yn, xn) {
                Some(LABEL_LA)
            } else {
                None
            };
            if let Some(s) = structure {
                if !in_sector {
                    return Err(Error::Dataset(format!(
                        "chamber geometry leaves the sector at ({y},{x})"
                    )));
                }
                label = s;
            }
            labels[y * res + x] = label;
        }
    }
    let map = SemanticMap::new(res, res, labels)?;
    let sector_mask = map.sector_mask()?;
    // multiplicative Rayleigh speckle, mean-normalized per tissue
    let mut speckle_rng = derive_rng(spec.seed, 0xF1);
    let mut pre_blur = vec![0.0f64; res * res];
    for (i, &l) in map.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let sig = spec.speckle_sigma[l as usize];
        let u: f64 = speckle_rng.random::<f64>();
        let r = sig * (-2.0 * (1.0 - u).ln()).sqrt();
        pre_blur[i] = BASE_INTENSITY[l as usize] * r / (sig * RAYLEIGH_MEAN_UNIT);
    }
    Ok(PhantomParts {
        map,
        sector: sector_mask,
        pre_blur,
    })
}

/// Full phantom record: speckle is blurred with a 3×3 binomial point-spread
/// kernel, clamped to [0,1], and zeroed outside the sector.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<DatasetRecord> {
    let parts = generate_phantom_parts(spec)?;
    let res = spec.resolution;
    let blurred = binomial_blur3(&parts.pre_blur, res, res);
    let mut image = vec![0.0f32; res * res];
    for i in 0..res * res {
        if parts.sector.bits()[i] == 1 {
            image[i] = blurred[i].clamp(0.0, 1.0) as f32;
        }
    }
    let rec = DatasetRecord {
        patient_id: 0,
        view: spec.view,
        phase: spec.phase,
        aug_index: None,
        h: res,
        w: res,
        image,
        map: parts.map,
        sector: parts.sector,
    };
    rec.validate()?;
    Ok(rec)
}

fn binomial_blur3(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = [1.0, 2.0, 1.0];
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - 1;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * img[y * w + xx as usize];
                    norm += kv;
                }
            }
            tmp[y * w + x] = acc / norm;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - 1;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                    norm += kv;
                }
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

/// Geometric transform: rotate by `rot`, scale by `scale`, translate by
/// (tx, ty) in pixels, all about the frame center.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeomTransform {
    pub rot: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl GeomTransform {
    pub fn identity() -> Self {
        GeomTransform {
            rot: 0.0,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    /// Rotation ±10°, scale 0.9–1.1, translation ≤ 5% of the frame.
    pub fn draw(rng: &mut Rng, h: usize, w: usize) -> Self {
        let deg10 = 10.0_f64.to_radians();
        GeomTransform {
            rot: deg10 * (2.0 * rng.random::<f64>() - 1.0),
            scale: 0.9 + 0.2 * rng.random::<f64>(),
            tx: 0.05 * w as f64 * (2.0 * rng.random::<f64>() - 1.0),
            ty: 0.05 * h as f64 * (2.0 * rng.random::<f64>() - 1.0),
        }
    }

    /// Source coordinates for an output pixel (inverse mapping).
    fn src(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let cy = h as f64 / 2.0;
        let cx = w as f64 / 2.0;
        let (dy, dx) = (y - cy - self.ty, x - cx - self.tx);
        let (s, c) = (-self.rot).sin_cos();
        let ry = (c * dy - s * dx) / self.scale;
        let rx = (s * dy + c * dx) / self.scale;
        (ry + cy, rx + cx)
    }

    pub fn apply_to_labels(&self, map: &SemanticMap) -> SemanticMap {
        let (h, w) = map.size();
        let mut out = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.src(y as f64 + 0.5, x as f64 + 0.5, h, w);
                let (iy, ix) = (sy.floor() as isize, sx.floor() as isize);
                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                    out[y * w + x] = map.labels()[iy as usize * w + ix as usize];
                }
            }
        }
        SemanticMap::new(h, w, out).expect("nearest sampling preserves the alphabet")
    }

    /// Bilinear warp; out-of-frame reads as 0. No range clamp: callers warp
    /// latents as well as [0,1] images (interpolation cannot leave the hull
    /// of the inputs anyway).
    pub fn apply_to_image(&self, img: &[f32], h: usize, w: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.src(y as f64 + 0.5, x as f64 + 0.5, h, w);
                let (fy, fx) = (sy - 0.5, sx - 0.5);
                let (y0, x0) = (fy.floor(), fx.floor());
                let (wy, wx) = (fy - y0, fx - x0);
                let mut acc = 0.0f64;
                for (dy, wyv) in [(0isize, 1.0 - wy), (1, wy)] {
                    for (dx, wxv) in [(0isize, 1.0 - wx), (1, wx)] {
                        let (iy, ix) = (y0 as isize + dy, x0 as isize + dx);
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            acc += wyv * wxv * img[iy as usize * w + ix as usize] as f64;
                        }
                    }
                }
                out[y * w + x] = acc as f32;
            }
        }
        out
    }
}

/// Geometric-only map augmentation: n variants, nearest-neighbor labels,
/// sector re-derived from the transformed map. A draw that pushes all
/// structures out of frame is retried (up to 10 times).
pub fn augment_map(map: &SemanticMap, n_variants: usize, seed: u64) -> Result<Vec<SemanticMap>> {
    if n_variants == 0 {
        return Err(Error::InvalidParam("n_variants must be >= 1".to_string()));
    }
    let (h, w) = map.size();
    let mut out = Vec::with_capacity(n_variants);
    for k in 0..n_variants {
        let mut produced = None;
        for attempt in 0..10 {
            let mut rng = derive_rng(seed, (k as u64) << 8 | attempt);
            let t = GeomTransform::draw(&mut rng, h, w);
            let cand = t.apply_to_labels(map);
            if cand.labels().iter().any(|&l| (1..=3).contains(&l)) {
                produced = Some(cand);
                break;
            }
        }
        out.push(produced.ok_or_else(|| {
            Error::Dataset("augmentation kept pushing all foreground out of frame".to_string())
        })?);
    }
    Ok(out)
}

/// Apply one shared geometric transform to an (image, map) pair; used by
/// training-time augmentation. The sector is re-derived from the map and
/// the image re-zeroed outside it.
pub fn augment_record(rec: &DatasetRecord, t: &GeomTransform) -> Result<DatasetRecord> {
    let map = t.apply_to_labels(&rec.map);
    if !map.labels().iter().any(|&l| (1..=3).contains(&l)) {
        return Err(Error::Dataset("transform removed all structures".to_string()));
    }
    let sector = map.sector_mask()?;
    let mut image = t.apply_to_image(&rec.image, rec.h, rec.w);
    for (i, v) in image.iter_mut().enumerate() {
        if sector.bits()[i] == 0 {
            *v = 0.0;
        }
    }
    Ok(DatasetRecord {
        patient_id: rec.patient_id,
        view: rec.view,
        phase: rec.phase,
        aug_index: rec.aug_index,
        h: rec.h,
        w: rec.w,
        image,
        map,
        sector,
    })
}

/// Multiplicative brightness/contrast jitter (keeps the zero background).
pub fn colour_augment(image: &mut [f32], rng: &mut Rng) {
    let gain = 0.85 + 0.3 * rng.random::<f64>();
    let gamma = 0.9 + 0.2 * rng.random::<f64>();
    for v in image.iter_mut() {
        let x = (*v as f64).max(0.0);
        *v = (gain * x.powf(gamma)).clamp(0.0, 1.0) as f32;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train_patients: usize,
    pub val_patients: usize,
    pub test_patients: usize,
    pub views: Vec<View>,
    pub phases: Vec<Phase>,
    /// Augmented variants per train/val record (test keeps originals only).
    pub variants: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_patients: 90,
            val_patients: 10,
            test_patients: 20,
            views: vec![View::A2C, View::A4C],
            phases: vec![Phase::ED, Phase::ES],
            variants: 5,
            resolution: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: String,
    pub patient: u32,
    pub view: View,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aug: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub resolution: usize,
    pub seed: u64,
    pub records: Vec<ManifestEntry>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn record_stem(r: &DatasetRecord) -> String {
    match r.aug_index {
        Some(k) => format!(
            "patient{:04}_{}_{}_aug{}",
            r.patient_id,
            r.view.tag(),
            r.phase.tag(),
            k
        ),
        None => format!("patient{:04}_{}_{}", r.patient_id, r.view.tag(), r.phase.tag()),
    }
}

/// Build the phantom corpus on disk. Patient ids are globally disjoint
/// across splits; only train/val records get augmented variants, so the
/// test split is never touched by the generation protocol.
pub fn build_training_corpus(cfg: &CorpusConfig, root: &Path) -> Result<BTreeMap<String, usize>> {
    if cfg.views.is_empty() || cfg.phases.is_empty() {
        return Err(Error::InvalidParam("corpus needs at least one view and phase".to_string()));
    }
    let mut counts = BTreeMap::new();
    let mut patient = 0u32;
    for (split, n_patients, variants) in [
        ("train", cfg.train_patients, cfg.variants),
        ("val", cfg.val_patients, cfg.variants),
        ("test", cfg.test_patients, 0usize),
    ] {
        let mut records = Vec::new();
        for _ in 0..n_patients {
            patient += 1;
            for &view in &cfg.views {
                for &phase in &cfg.phases {
                    let rec_seed = crate::rng::derive_seed(
                        cfg.seed,
                        (u64::from(patient) << 8)
                            | (matches!(view, View::A4C) as u64) << 1
                            | matches!(phase, Phase::ES) as u64,
                    );
                    let spec = PhantomSpec::new(view, phase, cfg.resolution, rec_seed);
                    let mut rec = generate_phantom(&spec)?;
                    rec.patient_id = patient;
                    if variants > 0 {
                        for k in 0..variants {
                            let mut rng = derive_rng(rec_seed, 0xA000 + k as u64);
                            let t = GeomTransform::draw(&mut rng, rec.h, rec.w);
                            let mut aug = augment_record(&rec, &t)?;
                            aug.aug_index = Some(k as u32);
                            records.push(aug);
                        }
                    }
                    records.push(rec);
                }
            }
        }
        write_split(root, split, cfg, &records)?;
        counts.insert(split.to_string(), records.len());
    }
    Ok(counts)
}

fn write_split(root: &Path, split: &str, cfg: &CorpusConfig, records: &[DatasetRecord]) -> Result<()> {
    let img_dir = root.join(split).join("images");
    let lab_dir = root.join(split).join("labels");
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&lab_dir)?;
    let mut entries = Vec::new();
    for r in records {
        let stem = record_stem(r);
        let img_rel = format!("images/{stem}.png");
        let lab_rel = format!("labels/{stem}.png");
        write_gray_png(&root.join(split).join(&img_rel), r.h, r.w, &quantize(&r.image))?;
        write_indexed_png(&root.join(split).join(&lab_rel), r.h, r.w, r.map.labels())?;
        entries.push(ManifestEntry {
            image: img_rel,
            label: lab_rel,
            patient: r.patient_id,
            view: r.view,
            phase: r.phase,
            aug: r.aug_index,
        });
    }
    let manifest = SplitManifest {
        split: split.to_string(),
        resolution: cfg.resolution,
        seed: cfg.seed,
        records: entries,
    };
    let f = fs::File::create(root.join(split).join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest)?;
    Ok(())
}

/// Load one split back from disk.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<DatasetRecord>> {
    let manifest_path = root.join(split).join("manifest.json");
    let manifest: SplitManifest = serde_json::from_reader(fs::File::open(&manifest_path)?)?;
    let mut out = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let (h, w, img) = read_gray_png(&root.join(split).join(&e.image))?;
        let (lh, lw, labels) = read_label_png(&root.join(split).join(&e.label))?;
        if (h, w) != (lh, lw) {
            return Err(Error::Dataset(format!(
                "{}: image {}x{} vs labels {}x{}",
                e.image, h, w, lh, lw
            )));
        }
        let map = SemanticMap::new(lh, lw, labels)?;
        let sector = map.sector_mask()?;
        let image: Vec<f32> = img
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if sector.bits()[i] == 1 {
                    v as f32 / 255.0
                } else {
                    0.0
                }
            })
            .collect();
        out.push(DatasetRecord {
            patient_id: e.patient,
            view: e.view,
            phase: e.phase,
            aug_index: e.aug,
            h,
            w,
            image,
            map,
            sector,
        });
    }
    Ok(out)
}

pub fn quantize(img: &[f32]) -> Vec<u8> {
    img.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_gray_png(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    Ok(())
}

const LABEL_PALETTE: [[u8; 3]; NUM_LABELS] = [
    [0, 0, 0],
    [200, 80, 80],
    [80, 80, 200],
    [80, 200, 80],
    [150, 150, 150],
];

pub fn write_indexed_png(path: &Path, h: usize, w: usize, labels: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(LABEL_PALETTE.concat());
    let mut writer = enc.write_header()?;
    writer.write_image_data(labels)?;
    Ok(())
}

pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Dataset(format!(
            "{path:?}: expected 8-bit grayscale PNG, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Dataset(format!(
            "{path:?}: expected 8-bit indexed PNG, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

/// Load a CAMUS-style directory: `root/patientNNNN/{view}_{phase}.png` plus
/// `{view}_{phase}_gt.png` at 256×256. Per-file failures become diagnostics
/// and loading continues. When the ground truth only carries structure
/// labels 0–3, the in-sector tissue label is added by thresholding the
/// image.
pub fn load_camus_layout(root: &Path) -> Result<(Vec<DatasetRecord>, Vec<String>)> {
    const CAMUS_RES: usize = 256;
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        let Some(id_str) = name.strip_prefix("patient") else {
            diagnostics.push(format!("{name}: not a patient directory, skipped"));
            continue;
        };
        let Ok(patient_id) = id_str.parse::<u32>() else {
            diagnostics.push(format!("{name}: bad patient id, skipped"));
            continue;
        };
        for view in [View::A2C, View::A4C] {
            for phase in [Phase::ED, Phase::ES] {
                let img_path = dir.join(format!("{}_{}.png", view.tag(), phase.tag()));
                let gt_path = dir.join(format!("{}_{}_gt.png", view.tag(), phase.tag()));
                if !img_path.exists() && !gt_path.exists() {
                    continue;
                }
                match load_camus_pair(&img_path, &gt_path, CAMUS_RES, patient_id, view, phase) {
                    Ok(rec) => records.push(rec),
                    Err(e) => diagnostics.push(format!("{name}/{}_{}: {e}", view.tag(), phase.tag())),
                }
            }
        }
    }
    Ok((records, diagnostics))
}

fn load_camus_pair(
    img_path: &Path,
    gt_path: &Path,
    expect_res: usize,
    patient_id: u32,
    view: View,
    phase: Phase,
) -> Result<DatasetRecord> {
    if !gt_path.exists() {
        return Err(Error::Dataset("missing semantic map file".to_string()));
    }
    let (h, w, img8) = read_gray_png(img_path)?;
    if h != expect_res || w != expect_res {
        return Err(Error::Dataset(format!(
            "expected {expect_res}x{expect_res}, got {h}x{w}"
        )));
    }
    let (lh, lw, mut labels) = read_label_png(gt_path)?;
    if (lh, lw) != (h, w) {
        return Err(Error::Dataset("image/label size mismatch".to_string()));
    }
    let image_f: Vec<f32> = img8.iter().map(|&v| v as f32 / 255.0).collect();
    if labels.iter().any(|&l| l as usize >= NUM_LABELS) {
        return Err(Error::Dataset("unknown label value".to_string()));
    }
    // three-label maps get the sector label added by thresholding
    if !labels.iter().any(|&l| l == LABEL_SECTOR_TISSUE) {
        let sector = sector_from_image(&image_f, h, w, 0.05)?;
        for i in 0..h * w {
            if sector.bits()[i] == 1 && labels[i] == 0 {
                labels[i] = LABEL_SECTOR_TISSUE;
            }
        }
    }
    let map = SemanticMap::new(h, w, labels)?;
    let sector = map.sector_mask()?;
    let image: Vec<f32> = image_f
        .iter()
        .enumerate()
        .map(|(i, &v)| if sector.bits()[i] == 1 { v } else { 0.0 })
        .collect();
    let rec = DatasetRecord {
        patient_id,
        view,
        phase,
        aug_index: None,
        h,
        w,
        image,
        map,
        sector,
    };
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn phantom_background_exactly_zero_and_deterministic() {
        let spec = PhantomSpec::new(View::A4C, Phase::ED, 64, 11);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.map.labels(), b.map.labels());
        for (i, &v) in a.image.iter().enumerate() {
            if a.sector.bits()[i] == 0 {
                assert_eq!(v, 0.0);
            }
        }
        a.validate().unwrap();
    }

    #[test]
    fn phantom_rejects_out_of_sector_geometry() {
        let mut spec = PhantomSpec::new(View::A4C, Phase::ED, 64, 3);
        spec.geometry = Some(ChamberGeometry {
            lv_center: (0.06, 0.08),
            lv_axes: (0.1, 0.1),
            la_center: (0.5, 0.5),
            la_axes: (0.05, 0.05),
            myo_scale: 1.3,
        });
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn speckle_is_rayleigh_per_tissue_pre_blur() {
        // KS against the Rayleigh CDF with a fitted scale, 1% level
        let spec = PhantomSpec::new(View::A4C, Phase::ED, 64, 29);
        let parts = generate_phantom_parts(&spec).unwrap();
        for label in [LABEL_LV_MYO, LABEL_SECTOR_TISSUE] {
            let xs: Vec<f64> = parts
                .map
                .labels()
                .iter()
                .zip(&parts.pre_blur)
                .filter(|(&l, _)| l == label)
                .map(|(_, &v)| v)
                .collect();
            assert!(xs.len() > 100, "need enough pixels for label {label}");
            let sigma2 = xs.iter().map(|x| x * x).sum::<f64>() / (2.0 * xs.len() as f64);
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len() as f64;
            let mut ks: f64 = 0.0;
            for (i, &x) in sorted.iter().enumerate() {
                let cdf = 1.0 - (-x * x / (2.0 * sigma2)).exp();
                let lo = i as f64 / n;
                let hi = (i + 1) as f64 / n;
                ks = ks.max((cdf - lo).abs()).max((cdf - hi).abs());
            }
            let critical = 1.63 / n.sqrt(); // 1% asymptotic
            assert!(ks < critical, "label {label}: KS {ks} >= {critical}");
        }
    }

    #[test]
    fn augment_identity_is_identity() {
        let spec = PhantomSpec::new(View::A2C, Phase::ES, 32, 5);
        let rec = generate_phantom(&spec).unwrap();
        let t = GeomTransform::identity();
        let m2 = t.apply_to_labels(&rec.map);
        assert_eq!(m2.labels(), rec.map.labels());
    }

    #[test]
    fn augment_preserves_alphabet_and_count() {
        let spec = PhantomSpec::new(View::A4C, Phase::ED, 48, 8);
        let rec = generate_phantom(&spec).unwrap();
        let variants = augment_map(&rec.map, 5, 123).unwrap();
        assert_eq!(variants.len(), 5);
        for v in &variants {
            assert!(v.labels().iter().all(|&l| (l as usize) < NUM_LABELS));
            assert!(v.labels().iter().any(|&l| (1..=3).contains(&l)));
        }
        // distinct seeds -> distinct outputs (with overwhelming probability)
        assert_ne!(variants[0].labels(), variants[1].labels());
    }

    #[test]
    fn augment_area_within_scale_bounds() {
        let spec = PhantomSpec::new(View::A4C, Phase::ED, 64, 21);
        let rec = generate_phantom(&spec).unwrap();
        let base: usize = rec.map.labels().iter().filter(|&&l| l == LABEL_LV_ENDO).count();
        for v in augment_map(&rec.map, 8, 77).unwrap() {
            let area = v.labels().iter().filter(|&&l| l == LABEL_LV_ENDO).count();
            let ratio = area as f64 / base as f64;
            assert!(
                (0.7..=1.4).contains(&ratio),
                "area ratio {ratio} outside loose scale bounds"
            );
        }
    }

    #[test]
    fn corpus_roundtrip_and_split_disjointness() {
        let dir = tempdir().unwrap();
        let cfg = CorpusConfig {
            train_patients: 2,
            val_patients: 1,
            test_patients: 1,
            variants: 2,
            resolution: 32,
            seed: 9,
            ..Default::default()
        };
        let counts = build_training_corpus(&cfg, dir.path()).unwrap();
        // per patient: 2 views × 2 phases × (1 + variants) for train/val
        assert_eq!(counts["train"], 2 * 4 * 3);
        assert_eq!(counts["val"], 4 * 3);
        assert_eq!(counts["test"], 4);
        let train = load_split(dir.path(), "train").unwrap();
        let test = load_split(dir.path(), "test").unwrap();
        let train_ids: std::collections::HashSet<u32> =
            train.iter().map(|r| r.patient_id).collect();
        let test_ids: std::collections::HashSet<u32> = test.iter().map(|r| r.patient_id).collect();
        assert!(train_ids.is_disjoint(&test_ids));
        assert!(test.iter().all(|r| r.aug_index.is_none()));
        for r in &train {
            r.validate().unwrap();
        }
    }

    #[test]
    fn corpus_reproducible_under_fixed_seed() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let cfg = CorpusConfig {
            train_patients: 1,
            val_patients: 0,
            test_patients: 1,
            variants: 1,
            resolution: 32,
            seed: 4,
            ..Default::default()
        };
        build_training_corpus(&cfg, d1.path()).unwrap();
        build_training_corpus(&cfg, d2.path()).unwrap();
        let a = load_split(d1.path(), "train").unwrap();
        let b = load_split(d2.path(), "train").unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.map.labels(), y.map.labels());
        }
    }

    #[test]
    fn views_linearly_separable_on_quadrant_means() {
        // nearest-centroid (a linear rule) on mean-intensity-per-quadrant
        let mut feats: Vec<([f64; 4], bool)> = Vec::new();
        for i in 0..120 {
            let view = if i % 2 == 0 { View::A2C } else { View::A4C };
            let phase = if i % 4 < 2 { Phase::ED } else { Phase::ES };
            let rec = generate_phantom(&PhantomSpec::new(view, phase, 64, 1000 + i)).unwrap();
            let mut f = [0.0f64; 4];
            let mut c = [0usize; 4];
            for y in 0..rec.h {
                for x in 0..rec.w {
                    let q = (y >= rec.h / 2) as usize * 2 + (x >= rec.w / 2) as usize;
                    f[q] += rec.image[y * rec.w + x] as f64;
                    c[q] += 1;
                }
            }
            for q in 0..4 {
                f[q] /= c[q] as f64;
            }
            feats.push((f, view == View::A4C));
        }
        // Fisher discriminant: w = S⁻¹(μ₁ − μ₀), threshold at the midpoint
        let mean_of = |cls: bool| -> [f64; 4] {
            let sel: Vec<&[f64; 4]> =
                feats.iter().filter(|(_, c)| *c == cls).map(|(f, _)| f).collect();
            let mut m = [0.0f64; 4];
            for f in &sel {
                for q in 0..4 {
                    m[q] += f[q];
                }
            }
            for q in 0..4 {
                m[q] /= sel.len() as f64;
            }
            m
        };
        let (m0, m1) = (mean_of(false), mean_of(true));
        let mut cov = [[0.0f64; 4]; 4];
        for (f, cls) in &feats {
            let m = if *cls { &m1 } else { &m0 };
            for a in 0..4 {
                for b in 0..4 {
                    cov[a][b] += (f[a] - m[a]) * (f[b] - m[b]);
                }
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                cov[a][b] /= feats.len() as f64;
            }
            cov[a][a] += 1e-9;
        }
        // solve cov · w = (m1 − m0) by Gaussian elimination
        let mut aug = [[0.0f64; 5]; 4];
        for a in 0..4 {
            aug[a][..4].copy_from_slice(&cov[a]);
            aug[a][4] = m1[a] - m0[a];
        }
        for col in 0..4 {
            let piv = (col..4)
                .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
                .unwrap();
            aug.swap(col, piv);
            for row in 0..4 {
                if row != col {
                    let f = aug[row][col] / aug[col][col];
                    for k in col..5 {
                        aug[row][k] -= f * aug[col][k];
                    }
                }
            }
        }
        let w: Vec<f64> = (0..4).map(|i| aug[i][4] / aug[i][i]).collect();
        let proj = |f: &[f64; 4]| -> f64 { f.iter().zip(&w).map(|(a, b)| a * b).sum() };
        let thresh = (proj(&m0) + proj(&m1)) / 2.0;
        let flip = proj(&m1) < proj(&m0);
        let correct = feats
            .iter()
            .filter(|(f, cls)| ((proj(f) > thresh) != flip) == *cls)
            .count();
        let acc = correct as f64 / feats.len() as f64;
        assert!(acc >= 0.95, "quadrant separability {acc}");
    }

    #[test]
    fn camus_loader_roundtrip_and_diagnostics() {
        let dir = tempdir().unwrap();
        // two valid patients, one broken (missing gt)
        for pid in 1..=2u32 {
            let pdir = dir.path().join(format!("patient{:04}", pid));
            fs::create_dir_all(&pdir).unwrap();
            let spec = PhantomSpec::new(View::A2C, Phase::ED, 256, 100 + pid as u64);
            let rec = generate_phantom(&spec).unwrap();
            write_gray_png(&pdir.join("A2C_ED.png"), 256, 256, &quantize(&rec.image)).unwrap();
            if pid == 1 {
                write_indexed_png(&pdir.join("A2C_ED_gt.png"), 256, 256, rec.map.labels()).unwrap();
            }
        }
        let (records, diags) = load_camus_layout(dir.path()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].patient_id, 1);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].contains("missing semantic map"), "{diags:?}");
    }

    #[test]
    fn camus_loader_adds_sector_label_when_absent() {
        let dir = tempdir().unwrap();
        let pdir = dir.path().join("patient0001");
        fs::create_dir_all(&pdir).unwrap();
        let rec = generate_phantom(&PhantomSpec::new(View::A4C, Phase::ES, 256, 7)).unwrap();
        // strip label 4 down to 0 to simulate a three-label ground truth
        let stripped: Vec<u8> = rec
            .map
            .labels()
            .iter()
            .map(|&l| if l == LABEL_SECTOR_TISSUE { 0 } else { l })
            .collect();
        write_gray_png(&pdir.join("A4C_ES.png"), 256, 256, &quantize(&rec.image)).unwrap();
        write_indexed_png(&pdir.join("A4C_ES_gt.png"), 256, 256, &stripped).unwrap();
        let (records, diags) = load_camus_layout(dir.path()).unwrap();
        assert!(diags.is_empty(), "{diags:?}");
        assert_eq!(records.len(), 1);
        let loaded = &records[0];
        assert!(loaded.map.labels().iter().any(|&l| l == LABEL_SECTOR_TISSUE));
        // recovered sector agrees with the generator ground truth nearly everywhere
        let agree = loaded
            .map
            .sector_mask()
            .unwrap()
            .bits()
            .iter()
            .zip(rec.sector.bits())
            .filter(|(a, b)| a == b)
            .count();
        assert!(agree as f64 / (256.0 * 256.0) >= 0.995, "agreement {agree}");
    }

    #[test]
    fn record_validator_catches_violations() {
        let spec = PhantomSpec::new(View::A2C, Phase::ED, 32, 88);
        let mut rec = generate_phantom(&spec).unwrap();
        // corrupt one background pixel
        let bg = rec.sector.bits().iter().position(|&b| b == 0).unwrap();
        rec.image[bg] = 0.5;
        assert!(rec.validate().is_err());
    }
}
