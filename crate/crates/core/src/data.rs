//! Synthetic speckle-scene dataset: class-imbalanced chips of fully developed
//! speckle with class-specific highlight-plus-shadow targets, plus the
//! crop-shift augmentation and the nine-crop test protocol.
//!
//! Background intensity is i.i.d. exponential (so the raw field has unit
//! stdev/mean ratio), lightly smoothed by a short correlation kernel.
//! Targets are multiplicative templates whose brightest point sits at the
//! target center; highlight contrast falls off inversely with the simulated
//! sensor range. Round "clutter" blobs without the trailing shadow appear in
//! chips of every class as hard negatives.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "chips.blob";

/// Maximum |component| of the centering jitter applied to targets, px.
pub const JITTER_PX: f64 = 2.0;

/// Highlight amplitude at the reference range.
const HIGHLIGHT_AMP: f64 = 2.4;
/// Range at which the highlight amplitude equals `HIGHLIGHT_AMP`.
const REFERENCE_RANGE_M: f64 = 60.0;
/// Multiplicative depth of target shadows.
const SHADOW_DEPTH: f64 = 0.85;
/// Simulated sensor range window, meters.
pub const RANGE_WINDOW_M: (f64, f64) = (40.0, 150.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Class labels: 0 background, then the three target shapes.
pub const LABEL_NAMES: [&str; 4] = ["background", "cylinder", "truncated-cone", "wedge"];

/// One grayscale chip with its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Vec<f32>,
    pub extent: usize,
    pub label: u8,
    /// Target center offset from the chip center (row, col) in pixels;
    /// absent for background chips.
    pub p_center: Option<(f32, f32)>,
    pub range_m: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Byte offset of the chip in the blob file.
    pub offset: u64,
    pub label: u8,
    pub p_center: Option<(f32, f32)>,
    pub range_m: f32,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub chip_extent: usize,
    pub crop_extent: usize,
    pub pixel_pitch_cm: f32,
    /// Extreme shift of the nine-crop protocol, px.
    pub shift_px: usize,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_counts(&self, split: Split) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for r in self.records.iter().filter(|r| r.split == split) {
            counts[r.label as usize] += 1;
        }
        counts
    }
}

/// Manifest plus chip pixels held in memory.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pixels: Vec<f32>,
}

impl Dataset {
    pub fn image(&self, index: usize) -> &[f32] {
        let e = self.manifest.chip_extent;
        let start = self.manifest.records[index].offset as usize / 4;
        &self.pixels[start..start + e * e]
    }

    pub fn sample(&self, index: usize) -> Sample {
        let r = &self.manifest.records[index];
        Sample {
            image: self.image(index).to_vec(),
            extent: self.manifest.chip_extent,
            label: r.label,
            p_center: r.p_center,
            range_m: r.range_m,
        }
    }
}

/// Generation parameters. `counts` are per-split chips per class
/// `[background, cylinder, truncated-cone, wedge]`.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub chip_extent: usize,
    pub crop_extent: usize,
    pub pixel_pitch_cm: f32,
    pub shift_px: usize,
    pub train_counts: [usize; 4],
    pub val_counts: [usize; 4],
}

impl Default for GenConfig {
    fn default() -> Self {
        // chip 96 / crop 64 gives a +-16 px crop margin; the nine-crop
        // extreme shift uses all of it.
        GenConfig {
            chip_extent: 96,
            crop_extent: 64,
            pixel_pitch_cm: 1.5,
            shift_px: 16,
            train_counts: [3200, 267, 267, 266],
            val_counts: [800, 67, 67, 66],
        }
    }
}

impl GenConfig {
    /// Split a chip budget into per-class counts at `imbalance : 1`
    /// background-to-target ratio, targets spread evenly.
    pub fn counts_for(total: usize, imbalance: f64) -> [usize; 4] {
        let bg = ((total as f64) * imbalance / (imbalance + 1.0)).round() as usize;
        let targets = total - bg;
        let per = targets / 3;
        [bg, per, per, targets - 2 * per]
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_extent >= self.chip_extent {
            return Err(Error::InvalidConfig(format!(
                "crop extent {} must be smaller than chip extent {}",
                self.crop_extent, self.chip_extent
            )));
        }
        if self.chip_extent < 48 {
            return Err(Error::InvalidConfig(
                "chip extent too small for the target templates".into(),
            ));
        }
        if self.train_counts.iter().sum::<usize>() == 0
            || self.val_counts.iter().sum::<usize>() == 0
        {
            return Err(Error::InvalidConfig("chip counts must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// speckle and templates
// ---------------------------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent per-sample generator stream.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index.wrapping_add(1))))
}

/// Raw fully developed speckle: i.i.d. exponential intensities with the
/// given mean, one draw per pixel.
pub fn speckle_field(rng: &mut ChaCha8Rng, n: usize, mean: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            -mean * (1.0 - u).ln()
        })
        .collect()
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    j.clamp(0, n - 1) as usize
}

/// Short-range correlation: one pass of the 3x3 binomial kernel.
fn smooth3(field: &[f64], e: usize) -> Vec<f64> {
    let taps = [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0];
    let mut out = vec![0.0; field.len()];
    for i in 0..e {
        for j in 0..e {
            let mut acc = 0.0;
            for di in 0..3 {
                for dj in 0..3 {
                    let si = mirror(i as isize + di - 1, e);
                    let sj = mirror(j as isize + dj - 1, e);
                    acc += taps[(di * 3 + dj) as usize] / 16.0 * field[si * e + sj];
                }
            }
            out[i * e + j] = acc;
        }
    }
    out
}

#[inline]
fn soft_edge(t: f64) -> f64 {
    // logistic edge roughly one pixel wide
    1.0 / (1.0 + (-t / 0.8).exp())
}

/// Class-specific multiplicative target template. The highlight is modulated
/// by a radial envelope so its brightest pixel is the target center.
#[derive(Clone, Copy, Debug)]
pub struct TargetTemplate {
    pub label: u8,
    pub orientation: f64,
    pub amplitude: f64,
}

impl TargetTemplate {
    fn highlight(&self, dr: f64, dc: f64) -> f64 {
        let (sin, cos) = self.orientation.sin_cos();
        let u = dr * cos + dc * sin;
        let v = -dr * sin + dc * cos;
        let shape = match self.label {
            1 => soft_edge(9.0 - u.abs()) * soft_edge(2.5 - v.abs()),
            2 => soft_edge(4.5 - (u * u + v * v).sqrt()),
            3 => {
                // isoceles wedge pointing along +u
                soft_edge(u + 4.0) * soft_edge(8.0 - u) * soft_edge((8.0 - u) * 0.45 - v.abs())
            }
            _ => 0.0,
        };
        let r2 = dr * dr + dc * dc;
        let envelope = (-r2 / (2.0 * 7.0 * 7.0)).exp();
        // bright point return at the object center; also pins the template
        // argmax to the center pixel regardless of orientation
        let peak = 0.5 * (-r2 / (2.0 * 1.2 * 1.2)).exp();
        shape * envelope + peak
    }

    fn shadow(&self, dr: f64, dc: f64) -> f64 {
        // acoustic shadow trails away from the sensor, along +col
        let (len, width, gap) = match self.label {
            1 => (9.0, 4.5, 5.0),
            2 => (12.0, 4.0, 5.0),
            3 => (7.0, 3.5, 4.5),
            _ => return 0.0,
        };
        let cc = dc - (gap + len);
        let n = (dr / width).powi(2) + (cc / len).powi(2);
        soft_edge((1.0 - n) * 3.0)
    }

    /// Render the multiplier field (nominally 1.0) for a chip of `extent`
    /// with the target centered at the continuous position `center`.
    pub fn render(&self, extent: usize, center: (f64, f64)) -> Vec<f64> {
        let mut field = vec![1.0; extent * extent];
        self.render_into(&mut field, extent, center);
        field
    }

    fn render_into(&self, field: &mut [f64], extent: usize, center: (f64, f64)) {
        for i in 0..extent {
            for j in 0..extent {
                let (dr, dc) = (i as f64 - center.0, j as f64 - center.1);
                let m = (1.0 + self.amplitude * self.highlight(dr, dc))
                    * (1.0 - SHADOW_DEPTH * self.shadow(dr, dc));
                field[i * extent + j] *= m.max(0.02);
            }
        }
    }
}

/// Highlight amplitude at a given range: contrast falls off inversely.
pub fn amplitude_at_range(range_m: f64) -> f64 {
    HIGHLIGHT_AMP * (REFERENCE_RANGE_M / range_m)
}

fn render_clutter(field: &mut [f64], extent: usize, center: (f64, f64), radius: f64, amp: f64) {
    for i in 0..extent {
        for j in 0..extent {
            let (dr, dc) = (i as f64 - center.0, j as f64 - center.1);
            let shape = soft_edge(radius - (dr * dr + dc * dc).sqrt());
            let envelope = (-(dr * dr + dc * dc) / (2.0 * 6.0 * 6.0)).exp();
            field[i * extent + j] *= 1.0 + amp * shape * envelope;
        }
    }
}

fn render_chip(
    rng: &mut ChaCha8Rng,
    extent: usize,
    label: u8,
) -> (Vec<f32>, Option<(f32, f32)>, f32) {
    let range_m = rng.random_range(RANGE_WINDOW_M.0..RANGE_WINDOW_M.1);
    // range-dependent mean; the stdev/mean ratio stays 1 regardless
    let mean = 100.0 / range_m;
    let raw = speckle_field(rng, extent * extent, mean);
    let speckle = smooth3(&raw, extent);

    let mut multiplier = vec![1.0f64; extent * extent];
    let center = (extent as f64 - 1.0) / 2.0;

    let p_center = if label != 0 {
        let jr = rng.random_range(-JITTER_PX..JITTER_PX);
        let jc = rng.random_range(-JITTER_PX..JITTER_PX);
        let template = TargetTemplate {
            label,
            orientation: rng.random_range(0.0..std::f64::consts::TAU),
            amplitude: amplitude_at_range(range_m),
        };
        template.render_into(&mut multiplier, extent, (center + jr, center + jc));
        Some((jr as f32, jc as f32))
    } else {
        None
    };

    // clutter blobs: bright rounded returns with no trailing shadow
    let n_clutter = match rng.random::<f64>() {
        u if u < 0.35 => 0,
        u if u < 0.75 => 1,
        _ => 2,
    };
    for _ in 0..n_clutter {
        let margin = 8.0;
        let hi = extent as f64 - margin;
        let (mut cr, mut cc);
        loop {
            cr = rng.random_range(margin..hi);
            cc = rng.random_range(margin..hi);
            // keep clutter clear of a real target's footprint
            let clear = label == 0 || ((cr - center).powi(2) + (cc - center).powi(2)).sqrt() > 16.0;
            if clear {
                break;
            }
        }
        let radius = rng.random_range(2.5..4.5);
        let amp = 0.7 * amplitude_at_range(range_m) * rng.random_range(0.6..1.1);
        render_clutter(&mut multiplier, extent, (cr, cc), radius, amp);
    }

    let combined: Vec<f64> = speckle
        .iter()
        .zip(&multiplier)
        .map(|(s, m)| s * m)
        .collect();
    let lo = combined.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = combined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom = (hi - lo).max(1e-12);
    let image: Vec<f32> = combined
        .iter()
        .map(|v| (((v - lo) / denom) as f32).clamp(0.0, 1.0))
        .collect();
    (image, p_center, range_m as f32)
}

/// Generate a dataset deterministically from `seed`.
pub fn generate(seed: u64, cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let e = cfg.chip_extent;
    let chip_bytes = (e * e * 4) as u64;
    let mut records = Vec::new();
    let mut pixels = Vec::new();
    let mut index = 0u64;
    for (split, counts) in [
        (Split::Train, cfg.train_counts),
        (Split::Val, cfg.val_counts),
    ] {
        for label in 0u8..4 {
            for _ in 0..counts[label as usize] {
                let mut rng = sample_rng(seed, index);
                let (image, p_center, range_m) = render_chip(&mut rng, e, label);
                records.push(ManifestRecord {
                    offset: index * chip_bytes,
                    label,
                    p_center,
                    range_m,
                    split,
                });
                pixels.extend_from_slice(&image);
                index += 1;
            }
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            chip_extent: cfg.chip_extent,
            crop_extent: cfg.crop_extent,
            pixel_pitch_cm: cfg.pixel_pitch_cm,
            shift_px: cfg.shift_px,
            records,
        },
        pixels,
    })
}

// ---------------------------------------------------------------------------
// disk format: manifest.json + raw little-endian f32 blob
// ---------------------------------------------------------------------------

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    let mut blob = std::io::BufWriter::new(std::fs::File::create(dir.join(BLOB_FILE))?);
    for v in &dataset.pixels {
        blob.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let bytes = std::fs::read(dir.join(BLOB_FILE))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Corrupt("blob length not a multiple of 4".into()));
    }
    let pixels: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    // offsets must address disjoint, in-range chips
    let chip_bytes = (manifest.chip_extent * manifest.chip_extent * 4) as u64;
    let mut offsets: Vec<u64> = manifest.records.iter().map(|r| r.offset).collect();
    offsets.sort_unstable();
    for pair in offsets.windows(2) {
        if pair[0] + chip_bytes > pair[1] {
            return Err(Error::Corrupt("overlapping blob records".into()));
        }
    }
    if let Some(&last) = offsets.last() {
        if last + chip_bytes > bytes.len() as u64 {
            return Err(Error::Corrupt("blob record out of range".into()));
        }
    }
    Ok(Dataset { manifest, pixels })
}

// ---------------------------------------------------------------------------
// cropping
// ---------------------------------------------------------------------------

/// A training view of one sample.
#[derive(Clone, Debug)]
pub struct CroppedSample {
    pub image: Vec<f32>,
    pub extent: usize,
    pub label: u8,
    /// Target center relative to the crop center (row, col), px; absent for
    /// background.
    pub p_shift: Option<(f32, f32)>,
    pub range_m: f32,
}

pub fn crop_at(image: &[f32], chip: usize, crop: usize, r0: usize, c0: usize) -> Vec<f32> {
    debug_assert!(r0 + crop <= chip && c0 + crop <= chip);
    let mut out = Vec::with_capacity(crop * crop);
    for i in 0..crop {
        let row = (r0 + i) * chip + c0;
        out.extend_from_slice(&image[row..row + crop]);
    }
    out
}

fn crop_with_origin(sample: &Sample, crop: usize, r0: usize, c0: usize) -> CroppedSample {
    let centered = (sample.extent - crop) / 2;
    // integer displacement first, so a centered crop keeps p_center exactly
    let dr = (centered as isize - r0 as isize) as f32;
    let dc = (centered as isize - c0 as isize) as f32;
    let p_shift = sample.p_center.map(|(pr, pc)| (pr + dr, pc + dc));
    CroppedSample {
        image: crop_at(&sample.image, sample.extent, crop, r0, c0),
        extent: crop,
        label: sample.label,
        p_shift,
        range_m: sample.range_m,
    }
}

/// Uniform random crop; the induced target shift becomes the localization
/// ground truth.
pub fn crop_augment(sample: &Sample, crop: usize, rng: &mut ChaCha8Rng) -> CroppedSample {
    let lim = sample.extent - crop;
    let r0 = rng.random_range(0..=lim);
    let c0 = rng.random_range(0..=lim);
    crop_with_origin(sample, crop, r0, c0)
}

/// The centered crop (nine-crop index 4).
pub fn center_crop(sample: &Sample, crop: usize) -> CroppedSample {
    let o = (sample.extent - crop) / 2;
    crop_with_origin(sample, crop, o, o)
}

/// The 3x3 grid of crops at offsets `{-shift, 0, +shift}` squared, row-major
/// over (row, col) offsets; index 4 is the center crop.
pub fn nine_crops(sample: &Sample, crop: usize, shift: usize) -> Result<Vec<CroppedSample>> {
    let margin = (sample.extent - crop) / 2;
    if margin < shift {
        return Err(Error::InsufficientMargin {
            needed: shift,
            available: margin,
        });
    }
    let o = margin as isize;
    let s = shift as isize;
    let mut crops = Vec::with_capacity(9);
    for dr in [-s, 0, s] {
        for dc in [-s, 0, s] {
            crops.push(crop_with_origin(
                sample,
                crop,
                (o + dr) as usize,
                (o + dc) as usize,
            ));
        }
    }
    Ok(crops)
}

// ---------------------------------------------------------------------------
// balanced batches
// ---------------------------------------------------------------------------

/// One epoch of balanced batches over a split: each batch draws half from
/// the background pool and half from the target pool, uniformly with
/// replacement; the epoch covers the split once on average.
pub fn epoch_batches(
    manifest: &DatasetManifest,
    indices: &[usize],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let background: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| manifest.records[i].label == 0)
        .collect();
    let targets: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| manifest.records[i].label != 0)
        .collect();
    if background.is_empty() {
        return Err(Error::EmptyPool("background class".into()));
    }
    if targets.is_empty() {
        return Err(Error::EmptyPool("target classes".into()));
    }
    let n_batches = indices.len().div_ceil(batch);
    let half = batch / 2;
    let mut out = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut b = Vec::with_capacity(batch);
        for _ in 0..half {
            b.push(background[rng.random_range(0..background.len())]);
        }
        for _ in 0..(batch - half) {
            b.push(targets[rng.random_range(0..targets.len())]);
        }
        out.push(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig {
            train_counts: [40, 6, 6, 6],
            val_counts: [12, 2, 2, 2],
            ..GenConfig::default()
        }
    }

    #[test]
    fn raw_speckle_has_unit_stdev_over_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = speckle_field(&mut rng, 1_000_000, 0.7);
        let mean: f64 = field.iter().sum::<f64>() / field.len() as f64;
        let var: f64 =
            field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64;
        let ratio = var.sqrt() / mean;
        assert!((ratio - 1.0).abs() < 0.05, "stdev/mean = {ratio}");
    }

    #[test]
    fn manifest_counts_match_request() {
        let cfg = small_cfg();
        let ds = generate(7, &cfg).unwrap();
        assert_eq!(ds.manifest.class_counts(Split::Train), cfg.train_counts);
        assert_eq!(ds.manifest.class_counts(Split::Val), cfg.val_counts);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate(9, &cfg).unwrap();
        let b = generate(9, &cfg).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(
            serde_json::to_string(&a.manifest).unwrap(),
            serde_json::to_string(&b.manifest).unwrap()
        );
        let c = generate(10, &cfg).unwrap();
        assert!(a.pixels != c.pixels);
    }

    #[test]
    fn images_live_in_unit_interval() {
        let ds = generate(11, &small_cfg()).unwrap();
        for &v in &ds.pixels {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn jitter_respects_bound() {
        let ds = generate(13, &small_cfg()).unwrap();
        for r in &ds.manifest.records {
            assert_eq!(r.label != 0, r.p_center.is_some());
            if let Some((pr, pc)) = r.p_center {
                assert!(pr.abs() <= JITTER_PX as f32 && pc.abs() <= JITTER_PX as f32);
            }
        }
    }

    #[test]
    fn dataset_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(15, &small_cfg()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.pixels, loaded.pixels);
        assert_eq!(ds.manifest.records.len(), loaded.manifest.records.len());
        save_dataset(&loaded, dir.path()).unwrap();
        let again = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.pixels, again.pixels);
    }

    #[test]
    fn center_crop_of_centered_target_keeps_p_center() {
        let ds = generate(17, &small_cfg()).unwrap();
        let idx = ds.manifest.split_indices(Split::Train)[45]; // a target chip
        let sample = ds.sample(idx);
        assert!(sample.label != 0);
        let c = center_crop(&sample, 64);
        let (pr, pc) = sample.p_center.unwrap();
        let (sr, sc) = c.p_shift.unwrap();
        assert_eq!((sr, sc), (pr, pc));
    }

    #[test]
    fn crop_origin_displacement_moves_shift_oppositely() {
        let ds = generate(19, &small_cfg()).unwrap();
        let idx = ds.manifest.split_indices(Split::Train)[46];
        let sample = ds.sample(idx);
        let (pr, pc) = sample.p_center.unwrap();
        let centered = (sample.extent - 64) / 2;
        let c = crop_with_origin(&sample, 64, centered + 5, centered - 3);
        let (sr, sc) = c.p_shift.unwrap();
        assert_eq!(sr, pr - 5.0);
        assert_eq!(sc, pc + 3.0);
    }

    #[test]
    fn p_shift_is_bounded_by_margin_plus_jitter() {
        let ds = generate(21, &small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bound = ((96 - 64) / 2) as f32 + JITTER_PX as f32;
        for idx in ds.manifest.split_indices(Split::Train) {
            let sample = ds.sample(idx);
            let c = crop_augment(&sample, 64, &mut rng);
            if let Some((sr, sc)) = c.p_shift {
                assert!(sr.abs() <= bound && sc.abs() <= bound);
            } else {
                assert_eq!(c.label, 0);
            }
        }
    }

    #[test]
    fn template_argmax_sits_at_the_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let template = TargetTemplate {
                label: (trial % 3 + 1) as u8,
                orientation: rng.random_range(0.0..std::f64::consts::TAU),
                amplitude: rng.random_range(1.0..3.0),
            };
            let center = (rng.random_range(40.0..56.0), rng.random_range(40.0..56.0));
            let field = template.render(96, center);
            let argmax = field
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let (ar, ac) = ((argmax / 96) as f64, (argmax % 96) as f64);
            let dist = ((ar - center.0).powi(2) + (ac - center.1).powi(2)).sqrt();
            assert!(dist <= 1.0, "trial {trial}: argmax {dist} px from center");
        }
    }

    #[test]
    fn nine_crops_protocol() {
        let ds = generate(23, &small_cfg()).unwrap();
        let sample = ds.sample(ds.manifest.split_indices(Split::Train)[47]);
        let crops = nine_crops(&sample, 64, 16).unwrap();
        assert_eq!(crops.len(), 9);
        assert!(crops.iter().all(|c| c.image.len() == 64 * 64));
        let center = center_crop(&sample, 64);
        assert_eq!(crops[4].image, center.image);
        assert_eq!(crops[4].p_shift, center.p_shift);
    }

    #[test]
    fn nine_crop_corner_shifts_content() {
        // a delta-marked image makes the content shift visible exactly
        let mut image = vec![0.0f32; 96 * 96];
        image[47 * 96 + 47] = 1.0;
        let sample = Sample {
            image,
            extent: 96,
            label: 1,
            p_center: Some((-0.5, -0.5)),
            range_m: 80.0,
        };
        let crops = nine_crops(&sample, 64, 16).unwrap();
        // crop 0 originates 16 px up-left, so the delta lands 16 px down-right
        let center_pos = crops[4].image.iter().position(|&v| v == 1.0).unwrap();
        let corner_pos = crops[0].image.iter().position(|&v| v == 1.0).unwrap();
        let (cr, cc) = (center_pos / 64, center_pos % 64);
        let (kr, kc) = (corner_pos / 64, corner_pos % 64);
        assert_eq!((kr, kc), (cr + 16, cc + 16));
    }

    #[test]
    fn nine_crops_needs_margin() {
        let sample = Sample {
            image: vec![0.0; 80 * 80],
            extent: 80,
            label: 0,
            p_center: None,
            range_m: 50.0,
        };
        assert!(matches!(
            nine_crops(&sample, 64, 16),
            Err(Error::InsufficientMargin {
                needed: 16,
                available: 8
            })
        ));
    }

    #[test]
    fn batches_are_half_background() {
        let ds = generate(25, &small_cfg()).unwrap();
        let idx = ds.manifest.split_indices(Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches = epoch_batches(&ds.manifest, &idx, 16, &mut rng).unwrap();
        assert_eq!(batches.len(), idx.len().div_ceil(16));
        for b in &batches {
            let bg = b
                .iter()
                .filter(|&&i| ds.manifest.records[i].label == 0)
                .count();
            assert_eq!(bg, 8);
            assert_eq!(b.len(), 16);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let again = epoch_batches(&ds.manifest, &idx, 16, &mut rng2).unwrap();
        assert_eq!(batches, again);
    }

    #[test]
    fn sampler_rejects_empty_pools() {
        let ds = generate(27, &small_cfg()).unwrap();
        let bg_only: Vec<usize> = ds
            .manifest
            .split_indices(Split::Train)
            .into_iter()
            .filter(|&i| ds.manifest.records[i].label == 0)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            epoch_batches(&ds.manifest, &bg_only, 16, &mut rng),
            Err(Error::EmptyPool(_))
        ));
    }

    #[test]
    fn counts_for_imbalance() {
        let counts = GenConfig::counts_for(4000, 4.0);
        assert_eq!(counts, [3200, 266, 266, 268]);
        assert_eq!(counts.iter().sum::<usize>(), 4000);
    }
}
