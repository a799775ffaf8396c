//! Synthetic multi-site data: seeded ellipse subjects pushed through a
//! per-site intensity shift.
//!
//! Every subject is a random ellipse rendered as foreground/background
//! intensities; the site then applies `intensity * contrast_scale +
//! intensity_bias`, a repeated 3x3 box blur, and additive Gaussian noise.
//! Masks are never transformed. Pixel values are quantized to f32 at
//! generation time so the on-disk format (raw f32) reproduces the in-memory
//! dataset exactly.
//!
//! All randomness is derived from `SiteSpec::seed` via a per-subject
//! splitmix64 stream, so subjects are independent of generation order and a
//! site can be regenerated bit-identically from its spec alone.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{EngineError, Result};
use crate::model::Subject;

const DATASET_MAGIC: &[u8; 8] = b"SSITED01";

/// Subject counts used when a stream is asked for more sites than the
/// default pattern covers.
const DEFAULT_PATTERN: [usize; 6] = [30, 30, 19, 13, 12, 12];
const EXTRA_SITE_SUBJECTS: usize = 12;

/// Everything needed to regenerate one site bit-identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_id: u32,
    pub n_subjects: usize,
    pub intensity_bias: f64,
    pub contrast_scale: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub seed: u64,
}

/// A generated site with its train/val/test split (60% / 15% / remainder,
/// floors, seeded shuffle). Subjects within a split are ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub spec: SiteSpec,
    pub h: usize,
    pub w: usize,
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
}

impl SiteDataset {
    /// Look a subject up by id across all splits (used when rebuilding a
    /// replay buffer from its manifest).
    pub fn subject(&self, subject_id: u32) -> Option<&Subject> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .find(|s| s.subject_id == subject_id)
    }

    pub fn n_subjects(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// splitmix64; used to derive independent seeds (per subject, per round, per
/// namespace) from one base seed.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Split sizes: floor(0.6 n) train, floor(0.15 n) val, remainder test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.6 * n as f64).floor() as usize;
    let val = (0.15 * n as f64).floor() as usize;
    (train, val, n - train - val)
}

/// Specs for an `n_sites` stream whose shift parameters vary monotonically
/// with the site index, so "farther" sites are more shifted and any two
/// sites have distinct (bias, contrast) pairs.
///
/// Contrast falls and noise rises along the stream, so the per-pixel
/// signal-to-noise ratio collapses from ~30 at site 0 to below 1 at site 5.
/// Late sites are therefore only solvable by pooling spatial context, and
/// with just a handful of training subjects each they invite overfitting —
/// training on them degrades a model of the clean early sites unless
/// something (a replay buffer, an alignment term) anchors it. That is what
/// makes retention across rounds a real constraint instead of a freebie.
/// Purely affine brightness changes would not achieve this: the model class
/// is largely invariant to them, and every site would stay compatible with
/// every other.
pub fn default_stream(n_sites: usize, base_seed: u64) -> Vec<SiteSpec> {
    (0..n_sites)
        .map(|i| SiteSpec {
            site_id: i as u32,
            n_subjects: *DEFAULT_PATTERN.get(i).unwrap_or(&EXTRA_SITE_SUBJECTS),
            intensity_bias: 0.053 * i as f64,
            contrast_scale: 1.0 - 0.17 * i as f64,
            noise_sigma: 0.02 + 0.008 * i as f64,
            blur_radius: (i + 1) / 3,
            seed: mix_seed(base_seed, i as u64),
        })
        .collect()
}

struct SubjectRng(rand_chacha::ChaCha8Rng);

impl SubjectRng {
    fn new(spec_seed: u64, subject_id: u32) -> Self {
        use rand::SeedableRng;
        SubjectRng(rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(
            spec_seed,
            subject_id as u64,
        )))
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        use rand::Rng;
        self.0.random_range(lo..hi)
    }

    /// Standard normal via Box-Muller (keeps the dependency set down and the
    /// draw order explicit).
    fn normal(&mut self) -> f64 {
        use rand::Rng;
        let u1: f64 = 1.0 - self.0.random::<f64>(); // (0, 1], ln is finite
        let u2: f64 = self.0.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Clean ellipse render before the site transform: background/foreground
/// levels with the mask where pixel centers fall inside the ellipse.
/// Returns the subject's rng so the noise stage continues the same stream.
fn render_clean(
    spec: &SiteSpec,
    h: usize,
    w: usize,
    subject_id: u32,
) -> (Array2<f64>, Array2<u8>, SubjectRng) {
    let mut rng = SubjectRng::new(spec.seed, subject_id);
    // The subject family balances two pressures: the split sizes are small
    // (down to 7 train subjects per site), so the family must stay learnable
    // from that few examples, yet the position spread is kept wide enough
    // that two exemplars drawn near the family centre do not cover it --
    // coverage of a site then genuinely depends on which subjects a replay
    // buffer keeps.
    let cx = rng.range(0.34 * w as f64, 0.66 * w as f64);
    let cy = rng.range(0.34 * h as f64, 0.66 * h as f64);
    let a = rng.range(0.22 * w as f64, 0.27 * w as f64);
    let b = a * rng.range(0.90, 1.10);
    let phi = rng.range(0.0, std::f64::consts::PI);
    let fg = rng.range(0.82, 0.88);
    let bg = rng.range(0.12, 0.18);
    let (sin, cos) = phi.sin_cos();
    let mask = Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = (x as f64 + 0.5) - cx;
        let dy = (y as f64 + 0.5) - cy;
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        u8::from((u / a).powi(2) + (v / b).powi(2) <= 1.0)
    });
    let image = Array2::from_shape_fn((h, w), |(y, x)| {
        if mask[(y, x)] != 0 {
            fg
        } else {
            bg
        }
    });
    (image, mask, rng)
}

/// One pass of a 3x3 box blur; edge pixels average over their in-bounds
/// neighborhood only.
fn box_blur(image: &Array2<f64>) -> Array2<f64> {
    let (h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut sum = 0.0;
        let mut count = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                    sum += image[(ny as usize, nx as usize)];
                    count += 1.0;
                }
            }
        }
        sum / count
    })
}

fn generate_subject(spec: &SiteSpec, h: usize, w: usize, subject_id: u32) -> Subject {
    let (clean, mask, mut rng) = render_clean(spec, h, w, subject_id);
    let mut image = clean.mapv(|v| v * spec.contrast_scale + spec.intensity_bias);
    for _ in 0..spec.blur_radius {
        image = box_blur(&image);
    }
    if spec.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v += spec.noise_sigma * rng.normal();
        }
    }
    // f32 quantization keeps export/import lossless
    image.mapv_inplace(|v| v as f32 as f64);
    Subject {
        site_id: spec.site_id,
        subject_id,
        image,
        mask,
    }
}

/// Generate and split one site. Fails if any split would be empty
/// (n_subjects must be at least 7 so that floor(0.15 n) >= 1).
pub fn generate_site(spec: &SiteSpec, h: usize, w: usize) -> Result<SiteDataset> {
    if spec.n_subjects == 0 || split_sizes(spec.n_subjects).1 == 0 {
        return Err(EngineError::Config(format!(
            "site {}: {} subjects is too small for non-empty train/val/test splits",
            spec.site_id, spec.n_subjects
        )));
    }
    if !(spec.contrast_scale.is_finite() && spec.intensity_bias.is_finite())
        || spec.noise_sigma < 0.0
    {
        return Err(EngineError::Config(format!(
            "site {}: invalid transform parameters",
            spec.site_id
        )));
    }
    let subjects: Vec<Subject> = (0..spec.n_subjects as u32)
        .map(|id| generate_subject(spec, h, w, id))
        .collect();
    for s in &subjects {
        debug_assert!(
            s.mask.iter().any(|&m| m != 0),
            "generated mask must be non-empty"
        );
    }

    // seeded shuffle drives the split assignment
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut ids: Vec<u32> = (0..spec.n_subjects as u32).collect();
    // salt keeps the split shuffle stream separate from the subject streams
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x53_50_4c_49_54));
    ids.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(spec.n_subjects);
    let mut train_ids: Vec<u32> = ids[..n_train].to_vec();
    let mut val_ids: Vec<u32> = ids[n_train..n_train + n_val].to_vec();
    let mut test_ids: Vec<u32> = ids[n_train + n_val..].to_vec();
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    test_ids.sort_unstable();

    let pick = |ids: &[u32]| -> Vec<Subject> {
        ids.iter()
            .map(|&id| subjects[id as usize].clone())
            .collect()
    };
    Ok(SiteDataset {
        spec: *spec,
        h,
        w,
        train: pick(&train_ids),
        val: pick(&val_ids),
        test: pick(&test_ids),
    })
}

#[derive(Serialize, Deserialize)]
struct SiteHeader {
    spec: SiteSpec,
    h: usize,
    w: usize,
    train_ids: Vec<u32>,
    val_ids: Vec<u32>,
    test_ids: Vec<u32>,
}

/// Write a site as magic + header JSON + per-subject raw payload
/// (f32 LE image then u8 mask, subjects ordered by id).
pub fn export_site(path: &Path, ds: &SiteDataset) -> Result<()> {
    let header = SiteHeader {
        spec: ds.spec,
        h: ds.h,
        w: ds.w,
        train_ids: ds.train.iter().map(|s| s.subject_id).collect(),
        val_ids: ds.val.iter().map(|s| s.subject_id).collect(),
        test_ids: ds.test.iter().map(|s| s.subject_id).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut subjects: Vec<&Subject> = ds.train.iter().chain(&ds.val).chain(&ds.test).collect();
    subjects.sort_by_key(|s| s.subject_id);

    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in subjects {
        for &v in s.image.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &m in s.mask.iter() {
            buf.push(m);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn import_site(path: &Path) -> Result<SiteDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != DATASET_MAGIC {
        return Err(EngineError::Integrity(format!(
            "{} is not a site dataset (bad magic)",
            path.display()
        )));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(EngineError::Integrity(format!(
            "{} is truncated in the header",
            path.display()
        )));
    }
    let header: SiteHeader = serde_json::from_slice(&bytes[16..16 + json_len])?;
    let n = header.train_ids.len() + header.val_ids.len() + header.test_ids.len();
    let px = header.h * header.w;
    let stride = px * 4 + px;
    let payload = &bytes[16 + json_len..];
    if payload.len() != n * stride {
        return Err(EngineError::Integrity(format!(
            "{}: payload is {} bytes, expected {} for {} subjects",
            path.display(),
            payload.len(),
            n * stride,
            n
        )));
    }

    let mut all_ids: Vec<u32> = header
        .train_ids
        .iter()
        .chain(&header.val_ids)
        .chain(&header.test_ids)
        .copied()
        .collect();
    all_ids.sort_unstable();
    let read_subject = |k: usize, subject_id: u32| -> Result<Subject> {
        let at = k * stride;
        let img_bytes = &payload[at..at + px * 4];
        let mask_bytes = &payload[at + px * 4..at + stride];
        let image: Vec<f64> = img_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if image.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::Integrity(format!(
                "{}: subject {} has non-finite pixels",
                path.display(),
                subject_id
            )));
        }
        Ok(Subject {
            site_id: header.spec.site_id,
            subject_id,
            image: Array2::from_shape_vec((header.h, header.w), image).expect("h*w image"),
            mask: Array2::from_shape_vec((header.h, header.w), mask_bytes.to_vec())
                .expect("h*w mask"),
        })
    };
    let mut by_id = std::collections::BTreeMap::new();
    for (k, &id) in all_ids.iter().enumerate() {
        by_id.insert(id, read_subject(k, id)?);
    }
    let pick = |ids: &[u32]| -> Vec<Subject> {
        ids.iter().map(|id| by_id[id].clone()).collect()
    };
    Ok(SiteDataset {
        spec: header.spec,
        h: header.h,
        w: header.w,
        train: pick(&header.train_ids),
        val: pick(&header.val_ids),
        test: pick(&header.test_ids),
    })
}
