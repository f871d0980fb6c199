//! Synthetic dense-prediction task with the two difficulties the fusion
//! block targets: defect size spans a 10x range within one class, and the
//! two defect classes look nearly alike at high similarity settings.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::reference::resize_bilinear_loop;
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::tensor::Tensor;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_DENT: u8 = 1;
pub const LABEL_HOLE: u8 = 2;

const DATASET_SCHEMA: &str = "crossfuse-dataset/1";

/// Peak darkening shared by both defect classes.
const DENT_DEPTH: f64 = 0.25;
/// Extra core darkening of holes at class_similarity 0; scales to zero as
/// similarity approaches 1.
const CORE_GAP_MAX: f64 = 0.45;
/// Core radius as a fraction of the blob radius.
const CORE_FRACTION: f64 = 0.5;

const BACKGROUND_LO: f64 = 0.35;
const BACKGROUND_HI: f64 = 0.7;

const MAX_PLACEMENTS: usize = 400;
const MAX_RESTARTS: usize = 1000;

/// Blob-count weights for 1..=5. Skewed toward sparse images so that
/// placement restarts stay rare and the radius distribution unbiased.
const COUNT_WEIGHTS: [u32; 5] = [30, 25, 20, 15, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_size: usize,
    pub samples: usize,
    /// Blob radius range in pixels; radii are drawn log-uniformly.
    pub scale_range: (f64, f64),
    /// 0 = classes maximally separated, 1 = visually identical.
    pub class_similarity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            samples: 2500,
            scale_range: (2.0, 20.0),
            class_similarity: 0.8,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(CoreError::invalid(
                "GenConfig",
                format!("scale_range ({lo}, {hi}) must satisfy 1 <= min <= max"),
            ));
        }
        if hi > self.image_size as f64 / 2.0 {
            return Err(CoreError::invalid(
                "GenConfig",
                format!("max radius {hi} exceeds image_size/2 = {}", self.image_size / 2),
            ));
        }
        if !(0.0..=1.0).contains(&self.class_similarity) {
            return Err(CoreError::invalid(
                "GenConfig",
                format!("class_similarity {} outside [0, 1]", self.class_similarity),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(CoreError::invalid("GenConfig", "noise_sigma must be >= 0"));
        }
        if self.image_size < 4 {
            return Err(CoreError::invalid("GenConfig", "image_size must be >= 4"));
        }
        Ok(())
    }
}

/// One rendered defect: generator class, radius, and continuous center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub class: u8,
    pub radius: f64,
    pub cy: f64,
    pub cx: f64,
}

/// Image in [0,1] plus a per-pixel label mask holding {0, 1, 2} and the
/// blob geometry the pair was rendered from.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub blobs: Vec<BlobSpec>,
}

impl SyntheticSample {
    pub fn class_pixels(&self) -> [u64; 3] {
        let mut counts = [0u64; 3];
        for &v in self.mask.data() {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// Smooth low-frequency texture: a coarse random grid bilinearly upsampled
/// to full resolution.
fn background_texture<R: Rng>(size: usize, rng: &mut R) -> Tensor<f64> {
    let coarse = (size / 8).max(2);
    let grid =
        Tensor::from_fn(vec![1, coarse, coarse], |_| rng.gen_range(BACKGROUND_LO..BACKGROUND_HI));
    resize_bilinear_loop(&grid, size, size)
}

/// Radial falloff, smooth and zero at the rim.
fn falloff(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let v = 1.0 - u * u;
        v * v
    }
}

fn paint_blob(img: &mut Tensor<f64>, mask: &mut Tensor<f32>, blob: &BlobSpec, similarity: f64) {
    let size = mask.dims()[0];
    let core_r = blob.radius * CORE_FRACTION;
    let gap = CORE_GAP_MAX * (1.0 - similarity);
    let y0 = (blob.cy - blob.radius).floor().max(0.0) as usize;
    let y1 = ((blob.cy + blob.radius).ceil() as usize).min(size - 1);
    let x0 = (blob.cx - blob.radius).floor().max(0.0) as usize;
    let x1 = ((blob.cx + blob.radius).ceil() as usize).min(size - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((y as f64 - blob.cy).powi(2) + (x as f64 - blob.cx).powi(2)).sqrt();
            if d > blob.radius {
                continue;
            }
            let mut depth = DENT_DEPTH * falloff(d / blob.radius);
            if blob.class == LABEL_HOLE {
                depth += gap * falloff(d / core_r);
            }
            *img.at3_mut(0, y, x) -= depth;
            *mask.at2_mut(y, x) = blob.class as f32;
        }
    }
}

fn draw_count<R: Rng>(rng: &mut R) -> usize {
    let total: u32 = COUNT_WEIGHTS.iter().sum();
    let mut pick = rng.gen_range(0..total);
    for (i, &w) in COUNT_WEIGHTS.iter().enumerate() {
        if pick < w {
            return i + 1;
        }
        pick -= w;
    }
    COUNT_WEIGHTS.len()
}

fn place_blobs<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Result<Vec<BlobSpec>> {
    let (lo, hi) = cfg.scale_range;
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let s = cfg.image_size as f64 - 1.0;
    'restart: for _ in 0..MAX_RESTARTS {
        let count = draw_count(rng);
        // Radii and classes are drawn up front and kept through position
        // retries; placing the largest blob first keeps restarts (which
        // would re-draw radii and skew their distribution) rare.
        let mut specs: Vec<(f64, u8)> = (0..count)
            .map(|_| {
                let radius = if ln_hi > ln_lo { rng.gen_range(ln_lo..ln_hi).exp() } else { lo };
                let class = if rng.gen_range(0..2) == 0 { LABEL_DENT } else { LABEL_HOLE };
                (radius, class)
            })
            .collect();
        specs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut blobs: Vec<BlobSpec> = Vec::with_capacity(count);
        for (radius, class) in specs {
            // Rims may clip at the frame, but the core stays fully visible;
            // this keeps large-radius pairs placeable so restarts stay rare.
            let margin = radius * CORE_FRACTION + 1.0;
            if margin >= s - margin {
                continue 'restart;
            }
            let mut placed = false;
            for _ in 0..MAX_PLACEMENTS {
                let cy = rng.gen_range(margin..s - margin);
                let cx = rng.gen_range(margin..s - margin);
                let disjoint = blobs.iter().all(|b| {
                    let dist = ((cy - b.cy).powi(2) + (cx - b.cx).powi(2)).sqrt();
                    dist > radius + b.radius + 1.0
                });
                if disjoint {
                    blobs.push(BlobSpec { class, radius, cy, cx });
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Ok(blobs);
    }
    let size = cfg.image_size;
    Err(CoreError::invalid(
        "gen_sample",
        format!(
            "no feasible blob placement for scale_range {:?} in {size}x{size} images",
            cfg.scale_range
        ),
    ))
}

/// Render a sample with a fixed blob layout. Exposed so tests can pair
/// identical geometry across classes and similarity settings.
pub fn gen_sample_with_blobs(cfg: &GenConfig, seed: u64, blobs: &[BlobSpec]) -> SyntheticSample {
    let size = cfg.image_size;
    let mut rng = rng_from_seed(seed);
    let mut img = background_texture(size, &mut rng);
    let mut mask = Tensor::<f32>::zeros(vec![size, size]);
    for blob in blobs {
        paint_blob(&mut img, &mut mask, blob, cfg.class_similarity);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in img.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let image = Tensor::from_fn(vec![1, size, size], |i| img.data()[i].clamp(0.0, 1.0) as f32);
    SyntheticSample { image, mask, blobs: blobs.to_vec() }
}

/// Generate one sample: background texture, 1 to 5 disjoint blobs fully
/// inside the frame, Gaussian pixel noise, clamp to [0,1]. Deterministic in
/// `seed`.
pub fn gen_sample(cfg: &GenConfig, seed: u64) -> Result<SyntheticSample> {
    cfg.validate()?;
    // Blob layout comes from its own stream so a placement restart does not
    // shift the texture and noise draws.
    let mut layout_rng = rng_from_seed(derive_seed(seed, &[1]));
    let blobs = place_blobs(cfg, &mut layout_rng)?;
    Ok(gen_sample_with_blobs(cfg, seed, &blobs))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub seed: u64,
    pub img: String,
    pub mask: String,
    pub class_pixels: [u64; 3],
    pub blobs: Vec<BlobSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub config: GenConfig,
    pub samples: Vec<SampleEntry>,
}

/// Write `cfg.samples` samples plus a manifest into `dir`.
pub fn gen_dataset(cfg: &GenConfig, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let seed = derive_seed(cfg.seed, &[stream::SAMPLE, i as u64]);
        let sample = gen_sample(cfg, seed)?;
        let img = format!("{i:04}_img.cft");
        let mask = format!("{i:04}_mask.cft");
        sample.image.write_cft(&dir.join(&img))?;
        sample.mask.write_cft(&dir.join(&mask))?;
        entries.push(SampleEntry {
            index: i,
            seed,
            img,
            mask,
            class_pixels: sample.class_pixels(),
            blobs: sample.blobs,
        });
    }
    let manifest = DatasetManifest {
        schema: DATASET_SCHEMA.to_string(),
        config: cfg.clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Json { path: path.display().to_string(), source: e })?;
    fs::write(&path, json).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// Handle to an on-disk dataset; samples load lazily and are verified
/// against the manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    dir: PathBuf,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let json =
        fs::read_to_string(&path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&json)
        .map_err(|e| CoreError::Json { path: path.display().to_string(), source: e })?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(CoreError::SchemaVersion {
            found: manifest.schema,
            expected: DATASET_SCHEMA.to_string(),
        });
    }
    Ok(Dataset { manifest, dir: dir.to_path_buf() })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    /// Load one sample, checking shapes, label values, and the manifest's
    /// class-pixel counts.
    pub fn load_sample(&self, index: usize) -> Result<SyntheticSample> {
        let entry = self.manifest.samples.get(index).ok_or_else(|| {
            CoreError::invalid("load_sample", format!("index {index} out of range"))
        })?;
        let size = self.manifest.config.image_size;
        let image = Tensor::<f32>::read_cft(&self.dir.join(&entry.img))?;
        if image.dims() != [1, size, size] {
            return Err(CoreError::ManifestMismatch {
                file: entry.img.clone(),
                reason: format!("image shape {:?}, expected [1, {size}, {size}]", image.dims()),
            });
        }
        let mask = Tensor::<f32>::read_cft(&self.dir.join(&entry.mask))?;
        if mask.dims() != [size, size] {
            return Err(CoreError::ManifestMismatch {
                file: entry.mask.clone(),
                reason: format!("mask shape {:?}, expected [{size}, {size}]", mask.dims()),
            });
        }
        let mut counts = [0u64; 3];
        for &v in mask.data() {
            if !(v == 0.0 || v == 1.0 || v == 2.0) {
                return Err(CoreError::ManifestMismatch {
                    file: entry.mask.clone(),
                    reason: format!("mask value {v} is not a label in {{0, 1, 2}}"),
                });
            }
            counts[v as usize] += 1;
        }
        if counts != entry.class_pixels {
            return Err(CoreError::ManifestMismatch {
                file: entry.mask.clone(),
                reason: format!(
                    "class pixels recount {counts:?} disagrees with manifest {:?}",
                    entry.class_pixels
                ),
            });
        }
        Ok(SyntheticSample { image, mask, blobs: entry.blobs.clone() })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SyntheticSample>> + '_ {
        (0..self.len()).map(|i| self.load_sample(i))
    }

    pub fn load_all(&self) -> Result<Vec<SyntheticSample>> {
        self.iter().collect()
    }
}
