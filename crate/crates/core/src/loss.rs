//! Loss stack: windowed structural similarity and its multi-scale variant,
//! the enhancement similarity term, the localization term, the focal
//! classification loss, and their weighted joint composition.

use crate::error::{Error, Result};
use crate::nn::avg_pool2;
use crate::ops::{self, Padding, ReduceKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-scale structural similarity configuration.
///
/// Local statistics are taken under an 11x11 Gaussian window (sigma 1.5).
/// With the conventional stabilizers `C1 = (K1 L)^2`, `C2 = (K2 L)^2`,
/// `C3 = C2 / 2` and unit exponents, the contrast and structure factors fuse
/// into `(2 sigma_xy + C2) / (sigma_x^2 + sigma_y^2 + C2)`.
#[derive(Clone, Debug)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the inputs (1.0 for images in [0, 1]).
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    /// Normalized Gaussian window taps, row-major `window x window`.
    pub fn window_taps(&self) -> Vec<f64> {
        let n = self.window;
        let c = (n as f64 - 1.0) / 2.0;
        let mut taps: Vec<f64> = (0..n * n)
            .map(|i| {
                let (r, q) = ((i / n) as f64 - c, (i % n) as f64 - c);
                (-(r * r + q * q) / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= total);
        taps
    }
}

/// Multi-scale configuration: up to five dyadic scales with the customary
/// per-scale weights. When the image is too small for the full pyramid the
/// scale count drops to `floor(log2(min_extent / window)) + 1` and the
/// retained weights are renormalized to sum to one.
#[derive(Clone, Debug)]
pub struct MsSsimConfig {
    pub ssim: SsimConfig,
    pub max_scales: usize,
    pub weights: Vec<f64>,
    /// Per-scale factors are clamped to at least this before exponentiation.
    pub factor_floor: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            ssim: SsimConfig::default(),
            max_scales: 5,
            weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
            factor_floor: 1e-6,
        }
    }
}

impl MsSsimConfig {
    /// Number of scales usable for an `h x w` image.
    pub fn effective_scales(&self, h: usize, w: usize) -> Result<usize> {
        let min = h.min(w);
        let win = self.ssim.window;
        if min < win {
            return Err(Error::Domain {
                op: "ms_ssim",
                detail: format!("image extent {min} smaller than the {win} window"),
            });
        }
        let by_size = ((min / win) as f64).log2().floor() as usize + 1;
        Ok(self.max_scales.min(by_size).max(1))
    }

    /// First `m` weights, renormalized to sum to one.
    pub fn scale_weights(&self, m: usize) -> Vec<f64> {
        let slice = &self.weights[..m];
        let total: f64 = slice.iter().sum();
        slice.iter().map(|w| w / total).collect()
    }
}

fn as_nchw<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.shape().len() {
        4 => Ok(x.clone()),
        2 => crate::nn::reshape(x, &[1, 1, x.shape()[0], x.shape()[1]]),
        _ => Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Luminance and fused contrast-structure maps for a pair of image batches.
fn ssim_maps<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SsimConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let channels = x.shape()[1];
    if channels != 1 {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: x.shape().to_vec(),
            rhs: vec![x.shape()[0], 1],
        });
    }
    let taps: Vec<T> = cfg.window_taps().iter().map(|&t| T::cast(t)).collect();
    let window = Tensor::new(&[1, 1, cfg.window, cfg.window], taps)?;
    let local = |t: &Tensor<T>| ops::conv2d(t, &window, 1, Padding::Valid);

    let (c1, c2) = (T::cast(cfg.c1()), T::cast(cfg.c2()));
    let two = T::cast(2.0);

    let mu_x = local(x)?;
    let mu_y = local(y)?;
    let mu_x2 = ops::mul(&mu_x, &mu_x)?;
    let mu_y2 = ops::mul(&mu_y, &mu_y)?;
    let mu_xy = ops::mul(&mu_x, &mu_y)?;

    let var_x = ops::sub(&local(&ops::mul(x, x)?)?, &mu_x2)?;
    let var_y = ops::sub(&local(&ops::mul(y, y)?)?, &mu_y2)?;
    let cov_xy = ops::sub(&local(&ops::mul(x, y)?)?, &mu_xy)?;

    let luminance = ops::div(
        &ops::add_scalar(&ops::mul_scalar(&mu_xy, two), c1),
        &ops::add_scalar(&ops::add(&mu_x2, &mu_y2)?, c1),
    )?;
    let cs = ops::div(
        &ops::add_scalar(&ops::mul_scalar(&cov_xy, two), c2),
        &ops::add_scalar(&ops::add(&var_x, &var_y)?, c2),
    )?;
    Ok((luminance, cs))
}

fn per_sample_mean<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    ops::reduce(map, ReduceKind::Mean, &[1, 2, 3], false)
}

/// Mean structural similarity between two images or image batches, in
/// `[0, 1]` for non-negative inputs. Differentiable w.r.t. both arguments.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    let (x, y) = (as_nchw(x)?, as_nchw(y)?);
    let (l, cs) = ssim_maps(&x, &y, cfg)?;
    ops::mean_all(&ops::mul(&l, &cs)?)
}

/// Per-sample multi-scale structural similarity, shape `[N]`.
///
/// Contrast-structure factors are taken at every scale of a dyadic
/// average-pool pyramid; luminance enters at the coarsest scale only. Each
/// factor is floored before exponentiation by its scale weight.
pub fn ms_ssim_per_sample<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &MsSsimConfig,
) -> Result<Tensor<T>> {
    let (mut cx, mut cy) = (as_nchw(x)?, as_nchw(y)?);
    if cx.shape() != cy.shape() {
        return Err(Error::ShapeMismatch {
            op: "ms_ssim",
            lhs: cx.shape().to_vec(),
            rhs: cy.shape().to_vec(),
        });
    }
    let scales = cfg.effective_scales(cx.shape()[2], cx.shape()[3])?;
    let weights = cfg.scale_weights(scales);
    let floor = T::cast(cfg.factor_floor);
    let inf = T::infinity();

    let mut product: Option<Tensor<T>> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let (l, cs) = ssim_maps(&cx, &cy, &cfg.ssim)?;
        let factor = if j + 1 == scales {
            // coarsest scale: full per-pixel similarity including luminance
            per_sample_mean(&ops::mul(&l, &cs)?)?
        } else {
            per_sample_mean(&cs)?
        };
        let term = ops::pow_scalar(&ops::clamp(&factor, floor, inf), T::cast(wj));
        product = Some(match product {
            None => term,
            Some(p) => ops::mul(&p, &term)?,
        });
        if j + 1 < scales {
            cx = avg_pool2(&cx)?;
            cy = avg_pool2(&cy)?;
        }
    }
    Ok(product.expect("at least one scale"))
}

/// Batch-mean multi-scale structural similarity.
pub fn ms_ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &MsSsimConfig) -> Result<Tensor<T>> {
    ops::mean_all(&ms_ssim_per_sample(x, y, cfg)?)
}

/// Enhancement similarity loss: `1 - MS-SSIM(x, x_enhanced)`, averaged over
/// the batch. Zero when the enhanced image equals the input.
pub fn loss_ssp<T: Scalar>(
    x: &Tensor<T>,
    x_enhanced: &Tensor<T>,
    cfg: &MsSsimConfig,
) -> Result<Tensor<T>> {
    let per = ms_ssim_per_sample(x, x_enhanced, cfg)?;
    let one = Tensor::scalar(T::one());
    ops::mean_all(&ops::sub(&one, &per)?)
}

/// Localization loss: half squared Euclidean distance between true and
/// estimated shifts, averaged over samples with `mask > 0` (the target-class
/// samples). An all-background batch yields exactly zero.
pub fn loss_sscp<T: Scalar>(
    p_shift: &Tensor<T>,
    p_hat: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    if p_shift.shape() != p_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_sscp",
            lhs: p_shift.shape().to_vec(),
            rhs: p_hat.shape().to_vec(),
        });
    }
    let diff = ops::sub(p_shift, p_hat)?;
    let sq = ops::mul(&diff, &diff)?;
    let per_sample = ops::reduce(&sq, ReduceKind::Sum, &[1], false)?;
    let half = ops::mul_scalar(&per_sample, T::cast(0.5));
    let masked = ops::mul(&half, mask)?;
    let count = mask
        .data()
        .iter()
        .filter(|&&m| m > T::zero())
        .count()
        .max(1);
    Ok(ops::mul_scalar(
        &ops::reduce(&masked, ReduceKind::Sum, &[], false)?,
        T::one() / T::cast(count as f64),
    ))
}

/// Focal classification loss configuration.
#[derive(Clone, Debug)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` before the log.
    pub clamp: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.25,
            gamma: 2.0,
            clamp: 1e-7,
        }
    }
}

/// Focal loss `sum_c -alpha (1 - p_c)^gamma y_c log p_c`, averaged over the
/// batch. `probs` are simplex rows `[N, K]`, `onehot` the true classes.
pub fn focal_loss<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    cfg: &FocalConfig,
) -> Result<Tensor<T>> {
    if probs.shape() != onehot.shape() {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            lhs: probs.shape().to_vec(),
            rhs: onehot.shape().to_vec(),
        });
    }
    let lo = T::cast(cfg.clamp);
    let p = ops::clamp(probs, lo, T::one() - lo);
    let log_p = ops::log(&p)?;
    let one = Tensor::scalar(T::one());
    let modulator = ops::pow_scalar(&ops::sub(&one, &p)?, T::cast(cfg.gamma));
    let weighted = ops::mul_scalar(
        &ops::mul(&ops::mul(&modulator, &log_p)?, onehot)?,
        -T::cast(cfg.alpha),
    );
    let per_sample = ops::reduce(&weighted, ReduceKind::Sum, &[1], false)?;
    ops::mean_all(&per_sample)
}

/// One-hot encode labels into `[N, num_classes]`.
pub fn one_hot<T: Scalar>(labels: &[u8], num_classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if (l as usize) >= num_classes {
            return Err(Error::Domain {
                op: "one_hot",
                detail: format!("label {l} out of range for {num_classes} classes"),
            });
        }
        data[i * num_classes + l as usize] = T::one();
    }
    Tensor::new(&[labels.len(), num_classes], data)
}

/// Weights of the joint objective.
#[derive(Clone, Debug)]
pub struct JointConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub focal: FocalConfig,
    pub ms_ssim: MsSsimConfig,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            lambda1: 1e-6,
            lambda2: 1e-1,
            focal: FocalConfig::default(),
            ms_ssim: MsSsimConfig::default(),
        }
    }
}

/// Scalar record of one batch's loss composition:
/// `total = focal + lambda1 * ssp + w * lambda2 * sscp`, where `w` is 1 when
/// the batch contains any target-class sample and 0 otherwise.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub focal: f64,
    pub ssp: f64,
    pub sscp: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub w: f64,
}

/// Forward outputs and ground truth entering the joint objective.
pub struct JointInputs<'a, T: Scalar> {
    pub x: &'a Tensor<T>,
    /// Enhancement network output; `None` when a fixed filter supplants it.
    pub x_enhanced: Option<&'a Tensor<T>>,
    pub probs: &'a Tensor<T>,
    pub p_hat: &'a Tensor<T>,
    pub labels: &'a [u8],
    /// Per-sample shift ground truth; required for target-class samples.
    pub shifts: &'a [Option<(f32, f32)>],
}

/// Compose the joint objective. Returns the differentiable total plus the
/// scalar breakdown; gradients flow into all participating parameter groups.
pub fn joint_loss<T: Scalar>(
    inputs: &JointInputs<'_, T>,
    cfg: &JointConfig,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let n = inputs.labels.len();
    let num_classes = inputs.probs.shape()[1];

    let mut shift_data = vec![T::zero(); n * 2];
    let mut mask_data = vec![T::zero(); n];
    for i in 0..n {
        if inputs.labels[i] != 0 {
            let (dr, dc) = inputs.shifts[i].ok_or(Error::MissingShift { index: i })?;
            shift_data[i * 2] = T::cast_f32(dr);
            shift_data[i * 2 + 1] = T::cast_f32(dc);
            mask_data[i] = T::one();
        }
    }
    let any_target = mask_data.iter().any(|&m| m > T::zero());
    let p_shift = Tensor::new(&[n, 2], shift_data)?;
    let mask = Tensor::new(&[n], mask_data)?;

    let onehot = one_hot::<T>(inputs.labels, num_classes)?;
    let focal = focal_loss(inputs.probs, &onehot, &cfg.focal)?;
    let ssp = match inputs.x_enhanced {
        Some(enhanced) => loss_ssp(inputs.x, enhanced, &cfg.ms_ssim)?,
        None => Tensor::scalar(T::zero()),
    };
    let sscp = loss_sscp(&p_shift, inputs.p_hat, &mask)?;

    let total = ops::add(
        &focal,
        &ops::add(
            &ops::mul_scalar(&ssp, T::cast(cfg.lambda1)),
            &ops::mul_scalar(&sscp, T::cast(cfg.lambda2)),
        )?,
    )?;

    let breakdown = LossBreakdown {
        focal: focal.item().as_f64(),
        ssp: ssp.item().as_f64(),
        sscp: sscp.item().as_f64(),
        total: total.item().as_f64(),
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        w: if any_target { 1.0 } else { 0.0 },
    };
    Ok((total, breakdown))
}
