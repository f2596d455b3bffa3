//! Optimization loop: RMSProp at a fixed learning rate over balanced
//! crop-augmented batches of the joint objective, early stopping on
//! validation average precision, and the fixed-despeckler baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{crop_augment, epoch_batches, nine_crops, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::aucpr;
use crate::loss::{joint_loss, JointConfig, JointInputs, LossBreakdown};
use crate::model::{build, forward, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed preprocessing filter that supplants the learned enhancement network
/// in the despeckler-baseline ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Despeckler {
    None,
    /// 5x5 Gaussian, sigma 1.0.
    Gaussian,
    /// 3x3 median.
    Median,
}

impl Despeckler {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Despeckler::None),
            "gaussian" => Ok(Despeckler::Gaussian),
            "median" => Ok(Despeckler::Median),
            other => Err(Error::InvalidConfig(format!("unknown despeckler {other}"))),
        }
    }
}

/// Training hyperparameters. Defaults: RMSProp at a fixed 1e-4 learning
/// rate, batch 16, lambda1 = 1e-6, lambda2 = 1e-1, early stopping on
/// validation average precision with patience 10.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub rho: f64,
    pub eps: f64,
    pub use_ssp: bool,
    pub use_sscp: bool,
    pub despeckler: Despeckler,
    /// Fraction of the training split actually used (seed-consistent subset).
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            lambda1: 1e-6,
            lambda2: 1e-1,
            batch: 16,
            max_epochs: 100,
            patience: 10,
            rho: 0.9,
            eps: 1e-7,
            use_ssp: true,
            use_sscp: true,
            despeckler: Despeckler::None,
            train_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidConfig("lambdas must be non-negative".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "train fraction must lie in (0, 1]".into(),
            ));
        }
        if self.despeckler != Despeckler::None && self.use_ssp {
            return Err(Error::InvalidConfig(
                "a fixed despeckler supplants the enhancement network; disable the similarity prior".into(),
            ));
        }
        if self.batch < 2 {
            return Err(Error::InvalidConfig("batch must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-epoch record of the loss composition and validation performance.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub focal: f64,
    pub ssp: f64,
    pub sscp: f64,
    pub total: f64,
    pub val_aucpr: f64,
}

/// Full training trace. The best epoch maximizes validation average
/// precision; the returned parameters are a snapshot of that epoch.
#[derive(Clone, Debug)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub train_size: usize,
}

impl TrainLog {
    /// CSV with one row per epoch. Wall time is deliberately not a column so
    /// that seed-identical runs serialize byte-identically.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,focal,ssp,sscp,total,val_aucpr,is_best\n");
        for (e, s) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{e},{:.6},{:.8},{:.6},{:.6},{:.6},{}\n",
                s.focal,
                s.ssp,
                s.sscp,
                s.total,
                s.val_aucpr,
                usize::from(e == self.best_epoch)
            ));
        }
        out
    }

    pub fn best_val_aucpr(&self) -> f64 {
        self.epochs[self.best_epoch].val_aucpr
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// One RMSProp update on raw buffers:
/// `s <- rho s + (1 - rho) g^2; theta <- theta - lr g / (sqrt(s) + eps)`.
pub fn rmsprop_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    state: &mut [T],
    lr: T,
    rho: T,
    eps: T,
) {
    debug_assert!(theta.len() == grad.len() && grad.len() == state.len());
    let one_minus = T::one() - rho;
    for ((t, &g), s) in theta.iter_mut().zip(grad).zip(state.iter_mut()) {
        *s = rho * *s + one_minus * g * g;
        *t = *t - lr * g / (s.sqrt() + eps);
    }
}

/// Optimizer state: one accumulator per parameter tensor.
pub struct RmsPropState<T> {
    acc: Vec<Vec<T>>,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        RmsPropState {
            acc: params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect(),
        }
    }
}

/// Apply one step over every parameter, reading gradients accumulated by the
/// last backward pass. Parameters without gradient stay untouched.
pub fn rmsprop_step<T: Scalar>(
    params: &ModelParams<T>,
    state: &mut RmsPropState<T>,
    cfg: &TrainConfig,
) -> Result<ModelParams<T>> {
    let (lr, rho, eps) = (
        T::cast(cfg.learning_rate),
        T::cast(cfg.rho),
        T::cast(cfg.eps),
    );
    let mut i = 0usize;
    params.map_tensors(|_, tensor| {
        let mut theta = tensor.data().to_vec();
        if let Some(grad) = tensor.grad() {
            if grad.len() != theta.len() {
                return Err(Error::ShapeMismatch {
                    op: "rmsprop_step",
                    lhs: vec![theta.len()],
                    rhs: vec![grad.len()],
                });
            }
            rmsprop_update(&mut theta, &grad, &mut state.acc[i], lr, rho, eps);
        }
        i += 1;
        Tensor::param(tensor.shape(), theta)
    })
}

// ---------------------------------------------------------------------------
// fixed despecklers
// ---------------------------------------------------------------------------

/// Normalized 5x5 Gaussian taps.
pub fn gaussian_kernel5(sigma: f64) -> [f64; 25] {
    let mut taps = [0.0; 25];
    let mut sum = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let (r, c) = (i as f64 - 2.0, j as f64 - 2.0);
            let v = (-(r * r + c * c) / (2.0 * sigma * sigma)).exp();
            taps[i * 5 + j] = v;
            sum += v;
        }
    }
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
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

/// Classical despeckling filter applied as frozen preprocessing.
pub fn fixed_despeckle(image: &[f32], extent: usize, kind: Despeckler) -> Vec<f32> {
    match kind {
        Despeckler::None => image.to_vec(),
        Despeckler::Gaussian => {
            let taps = gaussian_kernel5(1.0);
            let mut out = vec![0.0f32; image.len()];
            for i in 0..extent {
                for j in 0..extent {
                    let mut acc = 0.0f64;
                    for di in 0..5 {
                        for dj in 0..5 {
                            let si = mirror(i as isize + di - 2, extent);
                            let sj = mirror(j as isize + dj - 2, extent);
                            acc += taps[(di * 5 + dj) as usize] * image[si * extent + sj] as f64;
                        }
                    }
                    out[i * extent + j] = acc as f32;
                }
            }
            out
        }
        Despeckler::Median => {
            let mut out = vec![0.0f32; image.len()];
            let mut window = [0.0f32; 9];
            for i in 0..extent {
                for j in 0..extent {
                    let mut k = 0;
                    for di in -1isize..=1 {
                        for dj in -1isize..=1 {
                            let (si, sj) = (i as isize + di, j as isize + dj);
                            if si >= 0
                                && sj >= 0
                                && (si as usize) < extent
                                && (sj as usize) < extent
                            {
                                window[k] = image[si as usize * extent + sj as usize];
                                k += 1;
                            }
                        }
                    }
                    window[..k].sort_by(f32::total_cmp);
                    out[i * extent + j] = window[k / 2];
                }
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

fn substream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15))
}

/// Seed-consistent training subset: the same seed and fraction select the
/// same chips regardless of ablation flags.
pub fn training_subset(dataset: &Dataset, fraction: f64, seed: u64) -> Vec<usize> {
    let mut indices = dataset.manifest.split_indices(Split::Train);
    if fraction >= 1.0 {
        return indices;
    }
    let mut rng = substream(seed, 0xa5a5);
    // Fisher-Yates, then truncate
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let keep = ((indices.len() as f64) * fraction).floor() as usize;
    indices.truncate(keep.max(1));
    indices.sort_unstable();
    indices
}

struct ValCrop {
    image: Vec<f32>,
    is_target: bool,
}

/// One random crop per validation image, drawn from the nine-crop grid and
/// fixed for the whole run.
fn validation_crops(dataset: &Dataset, seed: u64) -> Result<Vec<ValCrop>> {
    let crop = dataset.manifest.crop_extent;
    let shift = dataset.manifest.shift_px;
    let mut rng = substream(seed, 0xb6b6);
    let mut out = Vec::new();
    for idx in dataset.manifest.split_indices(Split::Val) {
        let sample = dataset.sample(idx);
        let crops = nine_crops(&sample, crop, shift)?;
        let pick = rng.random_range(0..9);
        out.push(ValCrop {
            image: crops[pick].image.clone(),
            is_target: sample.label != 0,
        });
    }
    Ok(out)
}

fn validation_aucpr<T: Scalar>(
    params: &ModelParams<T>,
    crops: &[ValCrop],
    extent: usize,
) -> Result<f64> {
    let detached = params.detached();
    let classes = detached.config.num_classes;
    let mut scores = Vec::with_capacity(crops.len());
    let mut labels = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(16) {
        let mut flat = Vec::with_capacity(chunk.len() * extent * extent);
        for c in chunk {
            flat.extend_from_slice(&c.image);
        }
        let x = Tensor::<T>::from_f32(&[chunk.len(), 1, extent, extent], &flat)?;
        let out = forward(&detached, &x)?;
        for (r, c) in chunk.iter().enumerate() {
            scores.push(crate::eval::target_score(
                &out.probs.data()[r * classes..(r + 1) * classes],
            ));
            labels.push(c.is_target);
        }
    }
    Ok(aucpr(&scores, &labels)?.area)
}

/// Train a model on the dataset's training split.
///
/// Each step crops every batch sample at a random offset, runs the forward
/// pass, composes the joint objective with the ablation-masked weights,
/// backpropagates and applies RMSProp. Validation average precision is
/// measured each epoch on fixed random crops; training stops after
/// `patience` epochs without improvement and the best-epoch parameters are
/// returned.
pub fn train<T: Scalar>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<(ModelParams<T>, TrainLog)> {
    train_cfg.validate()?;
    let mut model_cfg = model_cfg.clone();
    if train_cfg.despeckler != Despeckler::None {
        model_cfg.enhancement = false;
    }
    model_cfg.validate()?;
    let crop = dataset.manifest.crop_extent;
    if crop != model_cfg.input_extent {
        return Err(Error::InvalidConfig(format!(
            "dataset crop extent {} does not match model input extent {}",
            crop, model_cfg.input_extent
        )));
    }

    let subset = training_subset(dataset, train_cfg.train_fraction, seed);
    let val_crops = validation_crops(dataset, seed)?;
    let mut params = build::<T>(&model_cfg, seed)?;
    let mut opt_state = RmsPropState::new(&params);
    let mut train_rng = substream(seed, 0xc7c7);

    let joint_cfg = JointConfig {
        lambda1: if train_cfg.use_ssp && model_cfg.enhancement {
            train_cfg.lambda1
        } else {
            0.0
        },
        lambda2: if train_cfg.use_sscp {
            train_cfg.lambda2
        } else {
            0.0
        },
        ..JointConfig::default()
    };

    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        train_size: subset.len(),
    };
    let mut best: Option<(f64, ModelParams<T>)> = None;

    for epoch in 0..train_cfg.max_epochs {
        let batches = epoch_batches(&dataset.manifest, &subset, train_cfg.batch, &mut train_rng)?;
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for batch in &batches {
            let breakdown = train_step(
                &params,
                &mut opt_state,
                train_cfg,
                &joint_cfg,
                dataset,
                batch,
                &mut train_rng,
            )
            .map(|(new_params, bd)| {
                params = new_params;
                bd
            })?;
            sums.0 += breakdown.focal;
            sums.1 += breakdown.ssp;
            sums.2 += breakdown.sscp;
            sums.3 += breakdown.total;
        }
        let nb = batches.len() as f64;
        let val = validation_aucpr(&params, &val_crops, crop)?;
        log.epochs.push(EpochStats {
            focal: sums.0 / nb,
            ssp: sums.1 / nb,
            sscp: sums.2 / nb,
            total: sums.3 / nb,
            val_aucpr: val,
        });
        let improved = best.as_ref().map(|(b, _)| val > *b).unwrap_or(true);
        if improved {
            best = Some((val, params.deep_clone()));
            log.best_epoch = epoch;
        } else if epoch - log.best_epoch >= train_cfg.patience {
            break;
        }
    }

    let (_, best_params) = best.expect("at least one epoch");
    Ok((best_params, log))
}

#[allow(clippy::too_many_arguments)]
fn train_step<T: Scalar>(
    params: &ModelParams<T>,
    opt_state: &mut RmsPropState<T>,
    train_cfg: &TrainConfig,
    joint_cfg: &JointConfig,
    dataset: &Dataset,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams<T>, LossBreakdown)> {
    let crop = dataset.manifest.crop_extent;
    let n = batch.len();
    let mut flat = Vec::with_capacity(n * crop * crop);
    let mut labels = Vec::with_capacity(n);
    let mut shifts = Vec::with_capacity(n);
    for &idx in batch {
        let sample = dataset.sample(idx);
        let cropped = crop_augment(&sample, crop, rng);
        let image = if train_cfg.despeckler != Despeckler::None {
            fixed_despeckle(&cropped.image, crop, train_cfg.despeckler)
        } else {
            cropped.image
        };
        flat.extend_from_slice(&image);
        labels.push(cropped.label);
        shifts.push(cropped.p_shift);
    }
    let x = Tensor::<T>::from_f32(&[n, 1, crop, crop], &flat)?;
    let out = forward(params, &x)?;
    let p_hat = out.p_hat.as_ref().expect("configured extent");
    let inputs = JointInputs {
        x: &x,
        x_enhanced: params.config.enhancement.then_some(&out.x_enhanced),
        probs: &out.probs,
        p_hat,
        labels: &labels,
        shifts: &shifts,
    };
    let (total, breakdown) = joint_loss(&inputs, joint_cfg)?;
    if !breakdown.total.is_finite() {
        let node = total
            .first_non_finite()
            .unwrap_or_else(|| "loss output".into());
        return Err(Error::NonFinite { node });
    }
    total.backward()?;
    let new_params = rmsprop_step(params, opt_state, train_cfg)?;
    Ok((new_params, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};
    use crate::model::group_of;

    fn tiny_dataset(seed: u64) -> Dataset {
        generate(
            seed,
            &GenConfig {
                chip_extent: 48,
                crop_extent: 32,
                shift_px: 8,
                train_counts: [24, 4, 4, 4],
                val_counts: [12, 2, 2, 2],
                ..GenConfig::default()
            },
        )
        .unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_extent: 32,
            unet_depth: 2,
            unet_base_width: 4,
            backbone_widths: vec![8, 16],
            ..ModelConfig::default()
        }
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rmsprop_zero_gradient_is_a_fixed_point() {
        let mut theta = vec![1.5f64, -0.3];
        let grad = vec![0.0, 0.0];
        let mut state = vec![0.0, 0.0];
        rmsprop_update(&mut theta, &grad, &mut state, 0.1, 0.9, 1e-7);
        assert_eq!(theta, vec![1.5, -0.3]);
    }

    #[test]
    fn rmsprop_single_step_hand_value() {
        let mut theta = vec![1.0f64];
        let grad = vec![1.0];
        let mut state = vec![0.0];
        rmsprop_update(&mut theta, &grad, &mut state, 0.1, 0.9, 0.0);
        assert!((state[0] - 0.1).abs() < 1e-12);
        let want = 1.0 - 0.1 / 0.1f64.sqrt();
        assert!((theta[0] - want).abs() < 1e-12);
        assert!((theta[0] - 0.6838).abs() < 1e-4);
    }

    #[test]
    fn rmsprop_is_deterministic() {
        let run = || {
            let mut theta = vec![0.5f32, -1.0, 2.0];
            let grad = vec![0.1, -0.2, 0.05];
            let mut state = vec![0.01, 0.02, 0.0];
            rmsprop_update(&mut theta, &grad, &mut state, 1e-2, 0.9, 1e-7);
            (theta, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_flag_combinations_are_rejected() {
        let cfg = TrainConfig {
            despeckler: Despeckler::Gaussian,
            use_ssp: true,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let cfg = TrainConfig {
            train_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn despecklers_preserve_constants() {
        let image = vec![0.42f32; 16 * 16];
        for kind in [Despeckler::Gaussian, Despeckler::Median] {
            let out = fixed_despeckle(&image, 16, kind);
            for &v in &out {
                assert!((v - 0.42).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn median_of_ramp_patch() {
        // interior 3x3 window over values 1..=9 has median 5
        let image: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let out = fixed_despeckle(&image, 3, Despeckler::Median);
        assert_eq!(out[4], 5.0);
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        let sum: f64 = gaussian_kernel5(1.0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn smoke_two_epochs_finishes_finite() {
        let dataset = tiny_dataset(1);
        let (params, log) = train::<f32>(&tiny_model(), &fast_cfg(), &dataset, 7).unwrap();
        assert_eq!(log.epochs.len(), 2);
        for s in &log.epochs {
            assert!(s.total.is_finite() && s.val_aucpr.is_finite());
        }
        assert!(params.scalar_count() > 0);
    }

    #[test]
    fn zero_lambdas_log_components_but_apply_no_weight() {
        let dataset = tiny_dataset(2);
        let cfg = TrainConfig {
            use_ssp: false,
            use_sscp: false,
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let (_, log) = train::<f32>(&tiny_model(), &cfg, &dataset, 3).unwrap();
        let s = &log.epochs[0];
        assert!(s.sscp > 0.0, "components still measured");
        assert!((s.total - s.focal).abs() < 1e-9, "total equals focal");
    }

    #[test]
    fn disabled_localization_prior_freezes_its_parameters() {
        let dataset = tiny_dataset(3);
        let cfg = TrainConfig {
            use_sscp: false,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let (trained, _) = train::<f32>(&tiny_model(), &cfg, &dataset, 11).unwrap();
        let fresh = build::<f32>(&tiny_model(), 11).unwrap();
        for ((name, t), (_, f)) in trained.iter().zip(fresh.iter()) {
            if group_of(name) == crate::model::ParamGroup::Localizer {
                assert_eq!(t.data(), f.data(), "{name} moved");
            }
        }
    }

    #[test]
    fn early_stopping_returns_the_best_epoch() {
        let dataset = tiny_dataset(4);
        let cfg = TrainConfig {
            max_epochs: 4,
            patience: 2,
            ..TrainConfig::default()
        };
        let (_, log) = train::<f32>(&tiny_model(), &cfg, &dataset, 5).unwrap();
        let best = log.best_val_aucpr();
        for s in &log.epochs {
            assert!(best >= s.val_aucpr);
        }
    }

    #[test]
    fn training_subset_is_flag_independent_and_sized() {
        let dataset = tiny_dataset(5);
        let a = training_subset(&dataset, 0.25, 9);
        let b = training_subset(&dataset, 0.25, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 9); // floor(0.25 * 36)
        let c = training_subset(&dataset, 0.25, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn identical_seeds_reproduce_logs_and_parameters() {
        let dataset = tiny_dataset(6);
        let (p1, l1) = train::<f32>(&tiny_model(), &fast_cfg(), &dataset, 21).unwrap();
        let (p2, l2) = train::<f32>(&tiny_model(), &fast_cfg(), &dataset, 21).unwrap();
        assert_eq!(l1.to_csv(), l2.to_csv());
        for ((n1, t1), (_, t2)) in p1.iter().zip(p2.iter()) {
            assert_eq!(t1.data(), t2.data(), "{n1} differs");
        }
    }

    #[test]
    fn despeckler_baseline_trains_without_enhancement_net() {
        let dataset = tiny_dataset(7);
        let cfg = TrainConfig {
            despeckler: Despeckler::Median,
            use_ssp: false,
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let (params, log) = train::<f32>(&tiny_model(), &cfg, &dataset, 13).unwrap();
        assert!(!params.config.enhancement);
        assert!(params.iter().all(|(n, _)| !n.starts_with("enhance.")));
        assert_eq!(log.epochs[0].ssp, 0.0);
    }
}
