//! Quantitative instruments: precision-recall curves and average precision,
//! confusion matrices, per-range performance, the shift-invariance score,
//! magnitude pruning sweeps, and windowed average spectra.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{center_crop, nine_crops, Dataset, Split, LABEL_NAMES};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability mass assigned to the target classes (everything but class 0).
pub fn target_score<T: Scalar>(probs: &[T]) -> f64 {
    probs[1..].iter().map(|p| p.as_f64()).sum()
}

/// Precision-recall curve over descending score thresholds, with the
/// step-sum average precision `sum_k (R_k - R_{k-1}) P_k`. Tied scores are
/// grouped at one threshold.
#[derive(Clone, Debug)]
pub struct PRCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub area: f64,
}

pub fn aucpr(scores: &[f64], labels: &[bool]) -> Result<PRCurve> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = Vec::new();
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut area = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // absorb the whole tie group before scoring the threshold
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / positives as f64;
        area += (r - prev_recall) * p;
        prev_recall = r;
        thresholds.push(threshold);
        precision.push(p);
        recall.push(r);
    }
    Ok(PRCurve {
        thresholds,
        precision,
        recall,
        area,
    })
}

/// Row-major `n x n` counts, rows true class, columns predicted argmax.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn add(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.n + predicted] += 1;
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> usize {
        self.counts[true_class * self.n + predicted]
    }

    pub fn row_sum(&self, true_class: usize) -> usize {
        (0..self.n).map(|p| self.at(true_class, p)).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: usize = (0..self.n).map(|c| self.at(c, c)).sum();
        trace as f64 / self.total().max(1) as f64
    }
}

/// Population standard deviation.
pub fn population_stdev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug)]
pub struct RangeBinRow {
    pub lo_m: f64,
    pub hi_m: f64,
    pub crops: usize,
    pub positives: usize,
    pub aucpr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PsiRow {
    pub sample_index: usize,
    pub label: u8,
    pub range_m: f32,
    pub psi: f64,
}

/// Everything the evaluation protocol measures over one split.
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub overall: PRCurve,
    /// One-versus-all curves for the three target classes.
    pub per_class: Vec<(String, PRCurve)>,
    pub range_rows: Vec<RangeBinRow>,
    /// Present when the nine-crop protocol ran.
    pub psi: Option<Vec<PsiRow>>,
    pub mean_psi: Option<f64>,
    pub inferences: usize,
}

const RANGE_BIN_M: f64 = 10.0;

/// Run the model over every crop of a split. With `nine_crop_protocol` each
/// sample contributes its full 3x3 translation grid (9 inferences) and the
/// per-sample shift-invariance score; otherwise the center crop alone.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    split: Split,
    nine_crop_protocol: bool,
) -> Result<EvalReport> {
    let indices = dataset.manifest.split_indices(split);
    if indices.is_empty() {
        return Err(Error::EmptyPool(format!("{split:?} split")));
    }
    let params = params.detached();
    let crop = dataset.manifest.crop_extent;
    let shift = dataset.manifest.shift_px;
    let classes = params.config.num_classes;

    // assemble every crop in deterministic order
    let mut images: Vec<Vec<f32>> = Vec::new();
    let mut crop_meta: Vec<(usize, u8, f32)> = Vec::new(); // (sample, label, range)
    for &idx in &indices {
        let sample = dataset.sample(idx);
        let crops = if nine_crop_protocol {
            nine_crops(&sample, crop, shift)?
        } else {
            vec![center_crop(&sample, crop)]
        };
        for c in crops {
            images.push(c.image);
            crop_meta.push((idx, sample.label, sample.range_m));
        }
    }

    // batched forward, preserving order
    let mut probs: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let n = chunk.len();
        let mut flat = Vec::with_capacity(n * crop * crop);
        for img in chunk {
            flat.extend_from_slice(img);
        }
        let x = Tensor::<T>::from_f32(&[n, 1, crop, crop], &flat)?;
        let out = forward(&params, &x)?;
        for r in 0..n {
            probs.push(
                out.probs.data()[r * classes..(r + 1) * classes]
                    .iter()
                    .map(|p| p.as_f64())
                    .collect(),
            );
        }
    }

    let mut confusion = ConfusionMatrix::new(classes);
    let mut scores = Vec::with_capacity(probs.len());
    let mut binary = Vec::with_capacity(probs.len());
    for (p, &(_, label, _)) in probs.iter().zip(&crop_meta) {
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        confusion.add(label as usize, argmax);
        scores.push(1.0 - p[0]);
        binary.push(label != 0);
    }
    let overall = aucpr(&scores, &binary)?;

    let mut per_class = Vec::new();
    for c in 1..classes {
        let class_scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let class_labels: Vec<bool> = crop_meta.iter().map(|&(_, l, _)| l as usize == c).collect();
        if let Ok(curve) = aucpr(&class_scores, &class_labels) {
            let name = LABEL_NAMES.get(c).copied().unwrap_or("class").to_string();
            per_class.push((name, curve));
        }
    }

    // range-binned one-versus-all performance
    let mut range_rows = Vec::new();
    let (lo0, hi0) = crate::data::RANGE_WINDOW_M;
    let n_bins = ((hi0 - lo0) / RANGE_BIN_M).ceil() as usize;
    for b in 0..n_bins {
        let lo = lo0 + b as f64 * RANGE_BIN_M;
        let hi = (lo + RANGE_BIN_M).min(hi0);
        let mut s = Vec::new();
        let mut l = Vec::new();
        for (i, &(_, label, range)) in crop_meta.iter().enumerate() {
            let r = range as f64;
            if r >= lo && (r < hi || (b + 1 == n_bins && r <= hi)) {
                s.push(scores[i]);
                l.push(label != 0);
            }
        }
        let positives = l.iter().filter(|&&x| x).count();
        range_rows.push(RangeBinRow {
            lo_m: lo,
            hi_m: hi,
            crops: s.len(),
            positives,
            aucpr: aucpr(&s, &l).ok().map(|c| c.area),
        });
    }

    let (psi, mean_psi) = if nine_crop_protocol {
        let mut rows = Vec::new();
        let mut by_sample: HashMap<usize, Vec<f64>> = HashMap::new();
        for (i, &(idx, _, _)) in crop_meta.iter().enumerate() {
            by_sample.entry(idx).or_default().push(scores[i]);
        }
        for &idx in &indices {
            let nine = &by_sample[&idx];
            debug_assert_eq!(nine.len(), 9);
            rows.push(PsiRow {
                sample_index: idx,
                label: dataset.manifest.records[idx].label,
                range_m: dataset.manifest.records[idx].range_m,
                psi: population_stdev(nine),
            });
        }
        let mean = rows.iter().map(|r| r.psi).sum::<f64>() / rows.len() as f64;
        (Some(rows), Some(mean))
    } else {
        (None, None)
    };

    Ok(EvalReport {
        confusion,
        overall,
        per_class,
        range_rows,
        psi,
        mean_psi,
        inferences: probs.len(),
    })
}

/// Shift-invariance score of one sample: population standard deviation of
/// the target score over the nine translation crops. Lower is more robust.
pub fn shift_invariance_score<T: Scalar>(
    params: &ModelParams<T>,
    sample: &crate::data::Sample,
    crop: usize,
    shift: usize,
) -> Result<f64> {
    let params = params.detached();
    let crops = nine_crops(sample, crop, shift)?;
    let mut flat = Vec::with_capacity(9 * crop * crop);
    for c in &crops {
        flat.extend_from_slice(&c.image);
    }
    let x = Tensor::<T>::from_f32(&[9, 1, crop, crop], &flat)?;
    let out = forward(&params, &x)?;
    let classes = params.config.num_classes;
    let scores: Vec<f64> = (0..9)
        .map(|r| target_score(&out.probs.data()[r * classes..(r + 1) * classes]))
        .collect();
    Ok(population_stdev(&scores))
}

// ---------------------------------------------------------------------------
// magnitude pruning
// ---------------------------------------------------------------------------

/// Zero the lowest-magnitude fraction `p` of all non-bias weights, ranked
/// globally across every parameter group. Biases are never ranked or zeroed.
/// Returns a modified copy.
pub fn prune_by_magnitude<T: Scalar>(params: &ModelParams<T>, p: f64) -> Result<ModelParams<T>> {
    assert!((0.0..=1.0).contains(&p), "proportion must be in [0, 1]");
    // (magnitude, param index, element index); ties resolved by position so
    // repeated pruning at the same p zeroes the same set
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        if name.ends_with(".bias") {
            continue;
        }
        for (ei, v) in tensor.data().iter().enumerate() {
            entries.push((v.as_f64().abs(), pi, ei));
        }
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let k = ((p * entries.len() as f64) + 1e-9).floor() as usize;

    let mut zero_sets: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(_, pi, ei) in entries.iter().take(k) {
        zero_sets.entry(pi).or_default().push(ei);
    }
    let mut pi = 0usize;
    params.map_tensors(|_, tensor| {
        let mut data = tensor.data().to_vec();
        if let Some(set) = zero_sets.get(&pi) {
            for &ei in set {
                data[ei] = T::zero();
            }
        }
        pi += 1;
        Tensor::param(tensor.shape(), data)
    })
}

/// Validation performance as a function of pruning proportion, without
/// retraining.
pub fn prune_sweep<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    proportions: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::with_capacity(proportions.len());
    for &p in proportions {
        let pruned = prune_by_magnitude(params, p)?;
        let report = evaluate(&pruned, dataset, Split::Val, false)?;
        rows.push((p, report.overall.area));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// averaged spectrum
// ---------------------------------------------------------------------------

/// Zero-frequency-centered mean magnitude spectrum.
pub struct Spectrum {
    pub extent: usize,
    pub magnitudes: Vec<f64>,
    pub images: usize,
}

/// Periodic (DFT-even) Hamming taps: the window's own transform then
/// occupies exactly the three central bins per axis.
fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// 2-D DFT magnitude of one image, optionally Hamming-windowed, not yet
/// shifted.
fn dft2_magnitude(
    image: &[f64],
    n: usize,
    planner: &mut FftPlanner<f64>,
    windowed: bool,
) -> Vec<f64> {
    let fft = planner.plan_fft_forward(n);
    let w = if windowed { hamming(n) } else { vec![1.0; n] };
    let mut grid: Vec<Complex<f64>> = (0..n * n)
        .map(|i| Complex::new(image[i] * w[i / n] * w[i % n], 0.0))
        .collect();
    for row in grid.chunks_exact_mut(n) {
        fft.process(row);
    }
    // columns via transpose, fft, transpose back
    let mut t = vec![Complex::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = grid[i * n + j];
        }
    }
    for row in t.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut mag = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            mag[i * n + j] = t[j * n + i].norm();
        }
    }
    mag
}

fn fft_shift(mag: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[((i + n / 2) % n) * n + (j + n / 2) % n] = mag[i * n + j];
        }
    }
    out
}

/// Average the Hamming-windowed DFT magnitude over the target-class images
/// of a split. With `params` the enhancement output is analyzed instead of
/// the original chips; both use the center crop.
pub fn avg_spectrum<T: Scalar>(
    dataset: &Dataset,
    split: Split,
    params: Option<&ModelParams<T>>,
) -> Result<Spectrum> {
    let indices: Vec<usize> = dataset
        .manifest
        .split_indices(split)
        .into_iter()
        .filter(|&i| dataset.manifest.records[i].label != 0)
        .collect();
    if indices.is_empty() {
        return Err(Error::EmptyPool("target-class split".into()));
    }
    let crop = dataset.manifest.crop_extent;
    let detached = params.map(|p| p.detached());
    let mut planner = FftPlanner::new();
    let mut acc = vec![0.0f64; crop * crop];
    for &idx in &indices {
        let sample = dataset.sample(idx);
        let c = center_crop(&sample, crop);
        let image: Vec<f64> = match &detached {
            None => c.image.iter().map(|&v| v as f64).collect(),
            Some(p) => {
                let x = Tensor::<T>::from_f32(&[1, 1, crop, crop], &c.image)?;
                let out = forward(p, &x)?;
                out.x_enhanced.data().iter().map(|v| v.as_f64()).collect()
            }
        };
        let mag = dft2_magnitude(&image, crop, &mut planner, true);
        for (a, m) in acc.iter_mut().zip(&mag) {
            *a += m;
        }
    }
    let n = indices.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(Spectrum {
        extent: crop,
        magnitudes: fft_shift(&acc, crop),
        images: indices.len(),
    })
}

/// Windowed spectrum of a single image (used by tests and diagnostics).
pub fn single_spectrum(image: &[f64], extent: usize) -> Spectrum {
    let mut planner = FftPlanner::new();
    let mag = dft2_magnitude(image, extent, &mut planner, true);
    Spectrum {
        extent,
        magnitudes: fft_shift(&mag, extent),
        images: 1,
    }
}

/// Plain (unwindowed) spectrum; a constant image transforms to a single
/// zero-frequency peak.
pub fn raw_spectrum(image: &[f64], extent: usize) -> Spectrum {
    let mut planner = FftPlanner::new();
    let mag = dft2_magnitude(image, extent, &mut planner, false);
    Spectrum {
        extent,
        magnitudes: fft_shift(&mag, extent),
        images: 1,
    }
}

// ---------------------------------------------------------------------------
// csv emission
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

/// Write `pr_curve.csv`, `confusion.csv`, `range_aucpr.csv` and, when the
/// nine-crop protocol ran, `psi.csv` into `dir`.
pub fn write_eval_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut pr = String::new();
    pr.push_str(&format!(
        "# curve=overall aucpr={}\n",
        fmt_f64(report.overall.area)
    ));
    for (name, curve) in &report.per_class {
        pr.push_str(&format!("# curve={name} aucpr={}\n", fmt_f64(curve.area)));
    }
    pr.push_str("curve,threshold,precision,recall\n");
    let dump = |label: &str, curve: &PRCurve, pr: &mut String| {
        for i in 0..curve.thresholds.len() {
            pr.push_str(&format!(
                "{label},{},{},{}\n",
                fmt_f64(curve.thresholds[i]),
                fmt_f64(curve.precision[i]),
                fmt_f64(curve.recall[i])
            ));
        }
    };
    dump("overall", &report.overall, &mut pr);
    for (name, curve) in &report.per_class {
        dump(name, curve, &mut pr);
    }
    std::fs::write(dir.join("pr_curve.csv"), pr)?;

    let mut cm = String::from("true_class");
    let n = report.confusion.n;
    for p in 0..n {
        cm.push_str(&format!(
            ",{}",
            LABEL_NAMES.get(p).copied().unwrap_or("class")
        ));
    }
    cm.push('\n');
    for t in 0..n {
        cm.push_str(LABEL_NAMES.get(t).copied().unwrap_or("class"));
        for p in 0..n {
            cm.push_str(&format!(",{}", report.confusion.at(t, p)));
        }
        cm.push('\n');
    }
    std::fs::write(dir.join("confusion.csv"), cm)?;

    let mut rr = String::from("range_lo_m,range_hi_m,crops,positives,aucpr\n");
    for row in &report.range_rows {
        rr.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(row.lo_m),
            fmt_f64(row.hi_m),
            row.crops,
            row.positives,
            row.aucpr.map(fmt_f64).unwrap_or_default()
        ));
    }
    std::fs::write(dir.join("range_aucpr.csv"), rr)?;

    if let (Some(rows), Some(mean)) = (&report.psi, report.mean_psi) {
        let mut psi = format!("# mean_psi={}\n", fmt_f64(mean));
        psi.push_str("sample_index,label,range_m,psi\n");
        for r in rows {
            psi.push_str(&format!(
                "{},{},{},{}\n",
                r.sample_index,
                r.label,
                fmt_f64(r.range_m as f64),
                fmt_f64(r.psi)
            ));
        }
        std::fs::write(dir.join("psi.csv"), psi)?;
    }
    Ok(())
}

pub fn write_prune_sweep(rows: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("proportion,aucpr\n");
    for (p, a) in rows {
        out.push_str(&format!("{},{}\n", fmt_f64(*p), fmt_f64(*a)));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_spectrum(spec: &Spectrum, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# extent={} images={}", spec.extent, spec.images)?;
    for row in spec.magnitudes.chunks_exact(spec.extent) {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_score_direct() {
        assert_eq!(target_score(&[1.0f64, 0.0, 0.0, 0.0]), 0.0);
        assert_eq!(target_score(&[0.25f64, 0.25, 0.25, 0.25]), 0.75);
        let p = [0.1f64, 0.5, 0.3, 0.1];
        assert!((target_score(&p) + p[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn aucpr_perfect_separation_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        let curve = aucpr(&scores, &labels).unwrap();
        assert!((curve.area - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aucpr_constant_scores_equal_prevalence() {
        let scores = [0.5; 10];
        let labels = [
            true, true, true, false, false, false, false, false, false, false,
        ];
        let curve = aucpr(&scores, &labels).unwrap();
        assert!((curve.area - 0.3).abs() < 1e-12);
    }

    #[test]
    fn aucpr_hand_case() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let labels = [true, true, false, true, false, false];
        let curve = aucpr(&scores, &labels).unwrap();
        let want = (1.0 + 1.0 + 0.75) / 3.0;
        assert!((curve.area - want).abs() < 1e-12, "{}", curve.area);
        assert!((curve.area - 0.9167).abs() < 1e-4);
    }

    #[test]
    fn aucpr_rejects_single_class() {
        assert!(matches!(
            aucpr(&[0.1, 0.2], &[true, true]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn aucpr_is_invariant_to_monotone_transforms() {
        let scores = [0.11, 0.52, 0.48, 0.93, 0.27, 0.69, 0.05, 0.81];
        let labels = [false, true, false, true, false, true, false, false];
        let base = aucpr(&scores, &labels).unwrap().area;
        let squashed: Vec<f64> = scores
            .iter()
            .map(|s| 1.0 / (1.0 + (-7.0 * s).exp()))
            .collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        assert!((aucpr(&squashed, &labels).unwrap().area - base).abs() < 1e-12);
        assert!((aucpr(&cubed, &labels).unwrap().area - base).abs() < 1e-12);
    }

    #[test]
    fn recall_is_monotone_along_the_curve() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3];
        let labels = [false, true, true, false, true, false, true];
        let curve = aucpr(&scores, &labels).unwrap();
        for pair in curve.recall.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
        assert!((0.0..=1.0).contains(&curve.area));
    }

    #[test]
    fn confusion_bookkeeping() {
        let mut cm = ConfusionMatrix::new(4);
        cm.add(0, 0);
        cm.add(0, 1);
        cm.add(2, 2);
        assert_eq!(cm.row_sum(0), 2);
        assert_eq!(cm.total(), 3);
        assert!((cm.accuracy() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn psi_hand_value_and_permutation_invariance() {
        let mut scores = [0.0; 9];
        scores[8] = 1.0;
        let psi = population_stdev(&scores);
        assert!((psi - 0.3143).abs() < 1e-4, "psi = {psi}");
        let mut permuted = scores;
        permuted.swap(0, 8);
        permuted.swap(3, 5);
        assert!((population_stdev(&permuted) - psi).abs() < 1e-15);
    }

    #[test]
    fn prune_direct_case() {
        // weights [0.1, -0.2, 0.3, -0.4] at p = 0.5 keep the two largest
        let params = fixture_params(vec![0.1, -0.2, 0.3, -0.4]);
        let pruned = prune_by_magnitude(&params, 0.5).unwrap();
        assert_eq!(
            pruned.get("backbone.w.weight").data(),
            &[0.0, 0.0, 0.3, -0.4]
        );
        // bias untouched even at p = 1
        let all = prune_by_magnitude(&params, 1.0).unwrap();
        assert_eq!(all.get("backbone.w.weight").data(), &[0.0; 4]);
        assert_eq!(all.get("backbone.w.bias").data(), &[0.7]);
        let none = prune_by_magnitude(&params, 0.0).unwrap();
        assert_eq!(
            none.get("backbone.w.weight").data(),
            &[0.1, -0.2, 0.3, -0.4]
        );
    }

    #[test]
    fn prune_is_idempotent_and_nested() {
        let params = fixture_params(vec![0.05, 0.4, -0.1, 0.2, -0.3, 0.25, -0.15, 0.35]);
        let half = prune_by_magnitude(&params, 0.5).unwrap();
        let again = prune_by_magnitude(&half, 0.5).unwrap();
        assert_eq!(
            half.get("backbone.w.weight").data(),
            again.get("backbone.w.weight").data()
        );
        let quarter = prune_by_magnitude(&params, 0.25).unwrap();
        let zeros_q: Vec<usize> = quarter
            .get("backbone.w.weight")
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect();
        let zeros_h: Vec<usize> = half
            .get("backbone.w.weight")
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect();
        assert!(zeros_q.iter().all(|i| zeros_h.contains(i)));
    }

    /// Minimal hand-built parameter set for pruning tests.
    fn fixture_params(weights: Vec<f32>) -> ModelParams<f32> {
        let n = weights.len();
        ModelParams::from_parts(
            crate::model::ModelConfig::micro(),
            0,
            vec![
                (
                    "backbone.w.weight".into(),
                    Tensor::param(&[n], weights).unwrap(),
                ),
                (
                    "backbone.w.bias".into(),
                    Tensor::param(&[1], vec![0.7]).unwrap(),
                ),
            ],
        )
    }

    #[test]
    fn spectrum_of_constant_is_a_dc_peak() {
        let image = vec![1.0f64; 32 * 32];
        let spec = raw_spectrum(&image, 32);
        let dc = spec.magnitudes[16 * 32 + 16];
        for (i, &v) in spec.magnitudes.iter().enumerate() {
            if i != 16 * 32 + 16 {
                assert!(v < dc * 1e-6, "bin {i}: {v} vs dc {dc}");
            }
        }
        // windowed, the energy stays within the window's 3x3 central block
        let windowed = single_spectrum(&image, 32);
        let dc = windowed.magnitudes[16 * 32 + 16];
        for i in 0..32usize {
            for j in 0..32usize {
                if i.abs_diff(16) > 1 || j.abs_diff(16) > 1 {
                    let v = windowed.magnitudes[i * 32 + j];
                    assert!(v < dc * 1e-9, "bin ({i},{j}): {v} vs dc {dc}");
                }
            }
        }
    }

    #[test]
    fn spectrum_magnitude_is_conjugate_symmetric() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(31);
        let image: Vec<f64> = (0..32 * 32)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        let mut planner = FftPlanner::new();
        let mag = dft2_magnitude(&image, 32, &mut planner, true);
        let n = 32;
        for i in 0..n {
            for j in 0..n {
                let mirror = mag[((n - i) % n) * n + (n - j) % n];
                let rel = (mag[i * n + j] - mirror).abs() / (mag[i * n + j].abs() + 1e-9);
                assert!(rel < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn spectrum_of_sinusoid_peaks_at_its_frequency() {
        let n = 64;
        let f = 9;
        let image: Vec<f64> = (0..n * n)
            .map(|i| (std::f64::consts::TAU * f as f64 * (i % n) as f64 / n as f64).cos())
            .collect();
        let spec = single_spectrum(&image, n);
        let mut order: Vec<usize> = (0..n * n).collect();
        order.sort_by(|&a, &b| spec.magnitudes[b].total_cmp(&spec.magnitudes[a]));
        let c = n / 2;
        let top2: Vec<(usize, usize)> = order[..2].iter().map(|&i| (i / n, i % n)).collect();
        assert!(top2.contains(&(c, c + f)), "{top2:?}");
        assert!(top2.contains(&(c, c - f)), "{top2:?}");
    }
}
