//! The four-network model: image enhancement U-Net, convolutional feature
//! extraction backbone, classification head, and target localization head.
//!
//! The builder lays out named parameters in four groups (`enhance.*`,
//! `backbone.*`, `cls.*`, `loc.*`); the forward pass assembles the graph from
//! those names. `plan` walks the same topology symbolically and is used for
//! shape conformance checks and the anti-aliasing audit.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{
    self, aa_maxpool, concat, coordconv_augment, dense, flatten, global_avg_pool, max_pool2,
    minmax_normalize, softmax, upsample_nearest2, LayerSpec,
};
use crate::ops::{self, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPDM";
const CHECKPOINT_VERSION: u32 = 1;

/// Model topology at a configurable scale.
///
/// The default is the desk scale: 64x64 inputs, a 3-level U-Net with base
/// width 16, and a compact 3-block backbone. `full_scale` reproduces the
/// reference 256x256 topology for shape conformance checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_extent: usize,
    pub unet_depth: usize,
    pub unet_base_width: usize,
    pub backbone_widths: Vec<usize>,
    pub num_classes: usize,
    pub anti_alias: bool,
    pub coordconv: bool,
    /// When false the enhancement network is omitted (its role supplanted by
    /// a fixed preprocessing filter) and the backbone consumes the input.
    pub enhancement: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_extent: 64,
            unet_depth: 3,
            unet_base_width: 16,
            backbone_widths: vec![32, 64, 128],
            num_classes: 4,
            anti_alias: true,
            coordconv: true,
            enhancement: true,
        }
    }
}

impl ModelConfig {
    /// Reference-scale topology: 256x256 input, 4-level U-Net, backbone
    /// ending at 1024 channels.
    pub fn full_scale() -> Self {
        ModelConfig {
            input_extent: 256,
            unet_depth: 4,
            unet_base_width: 16,
            backbone_widths: vec![64, 128, 256, 512, 1024],
            ..ModelConfig::default()
        }
    }

    /// Tiny topology for gradient checks; every network is present but narrow.
    pub fn micro() -> Self {
        ModelConfig {
            input_extent: 16,
            unet_depth: 2,
            unet_base_width: 2,
            backbone_widths: vec![3, 4],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.unet_depth;
        if self.enhancement && self.input_extent % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "input extent {} not divisible by 2^{}",
                self.input_extent, self.unet_depth
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.backbone_widths.is_empty() {
            return Err(Error::InvalidConfig(
                "backbone needs at least one block".into(),
            ));
        }
        if self.input_extent >> self.backbone_widths.len() == 0 {
            return Err(Error::InvalidConfig("backbone pools below 1 pixel".into()));
        }
        Ok(())
    }

    /// U-Net encoder widths, shallow to deep.
    fn unet_widths(&self) -> Vec<usize> {
        (0..self.unet_depth)
            .map(|l| self.unet_base_width << l)
            .collect()
    }

    fn unet_bottleneck_width(&self) -> usize {
        self.unet_base_width << self.unet_depth
    }

    /// Localization bottleneck widths: 1/4, 1/8, 1/16 of the backbone output.
    pub fn loc_widths(&self) -> [usize; 3] {
        let c = *self.backbone_widths.last().expect("validated");
        [(c / 4).max(1), (c / 8).max(1), (c / 16).max(1)]
    }

    /// Spatial extent of the backbone output at the configured input extent.
    fn backbone_out_extent(&self) -> usize {
        let mut e = self.input_extent;
        for _ in &self.backbone_widths {
            e = e.div_ceil(2);
        }
        e
    }

    /// Canonical `key=value` text used in checkpoints and run records.
    pub fn canonical_text(&self) -> String {
        let widths: Vec<String> = self.backbone_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "anti_alias={}\nbackbone_widths={}\ncoordconv={}\nenhancement={}\ninput_extent={}\nnum_classes={}\nunet_base_width={}\nunet_depth={}\n",
            self.anti_alias,
            widths.join(","),
            self.coordconv,
            self.enhancement,
            self.input_extent,
            self.num_classes,
            self.unet_base_width,
            self.unet_depth,
        )
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("bad config line: {line}")))?;
            macro_rules! parse {
                () => {
                    value
                        .parse()
                        .map_err(|_| Error::Corrupt(format!("bad config value: {line}")))?
                };
            }
            match key {
                "anti_alias" => cfg.anti_alias = parse!(),
                "coordconv" => cfg.coordconv = parse!(),
                "enhancement" => cfg.enhancement = parse!(),
                "input_extent" => cfg.input_extent = parse!(),
                "num_classes" => cfg.num_classes = parse!(),
                "unet_base_width" => cfg.unet_base_width = parse!(),
                "unet_depth" => cfg.unet_depth = parse!(),
                "backbone_widths" => {
                    cfg.backbone_widths = value
                        .split(',')
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Corrupt(format!("bad config value: {line}")))?;
                }
                other => return Err(Error::Corrupt(format!("unknown config key: {other}"))),
            }
        }
        Ok(cfg)
    }
}

/// Parameter group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Enhance,
    FeatureExtractor,
    Classifier,
    Localizer,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("enhance.") {
        ParamGroup::Enhance
    } else if name.starts_with("backbone.") {
        ParamGroup::FeatureExtractor
    } else if name.starts_with("cls.") {
        ParamGroup::Classifier
    } else {
        ParamGroup::Localizer
    }
}

/// Named, ordered collection of learnable tensors.
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub seed: u64,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    #[cfg(test)]
    pub(crate) fn from_parts(
        config: ModelConfig,
        seed: u64,
        params: Vec<(String, Tensor<T>)>,
    ) -> Self {
        ModelParams {
            config,
            seed,
            params,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self
            .params
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    /// Rebuild with new tensor values in the same order (used by optimizer
    /// steps and pruning). The mapper receives `(name, tensor)`.
    pub fn map_tensors(
        &self,
        mut f: impl FnMut(&str, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<ModelParams<T>> {
        let mut params = Vec::with_capacity(self.params.len());
        for (name, tensor) in &self.params {
            params.push((name.clone(), f(name, tensor)?));
        }
        Ok(ModelParams {
            config: self.config.clone(),
            seed: self.seed,
            params,
        })
    }

    /// Copy with gradient tracking detached, for inference-only passes.
    pub fn detached(&self) -> ModelParams<T> {
        self.map_tensors(|_, t| Ok(t.detach())).expect("detach")
    }

    /// Deep copy preserving gradient participation.
    pub fn deep_clone(&self) -> ModelParams<T> {
        self.map_tensors(|_, t| Tensor::param(t.shape(), t.data().to_vec()))
            .expect("clone")
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }
}

struct Builder<T: Scalar> {
    rng: ChaCha8Rng,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Builder<T> {
    fn gaussian(&mut self, n: usize, std: f64) -> Vec<T> {
        let dist = Normal::new(0.0, std).expect("std > 0");
        (0..n)
            .map(|_| T::cast(dist.sample(&mut self.rng)))
            .collect()
    }

    /// Kaiming-style initialization: zero-mean Gaussian with variance
    /// 2 / fan_in; biases start at zero.
    fn conv(&mut self, name: &str, f: usize, c: usize, k: usize) {
        let fan_in = c * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = self.gaussian(f * c * k * k, std);
        self.params.push((
            format!("{name}.weight"),
            Tensor::param(&[f, c, k, k], weight).expect("shape"),
        ));
        self.params.push((
            format!("{name}.bias"),
            Tensor::param(&[f], vec![T::zero(); f]).expect("shape"),
        ));
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = self.gaussian(fan_in * fan_out, std);
        self.params.push((
            format!("{name}.weight"),
            Tensor::param(&[fan_in, fan_out], weight).expect("shape"),
        ));
        self.params.push((
            format!("{name}.bias"),
            Tensor::param(&[fan_out], vec![T::zero(); fan_out]).expect("shape"),
        ));
    }
}

/// Build a parameter set for `config`, deterministically from `seed`.
pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut b = Builder::<T> {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
    };

    if config.enhancement {
        let widths = config.unet_widths();
        let mut prev = 1usize;
        for (l, &w) in widths.iter().enumerate() {
            b.conv(&format!("enhance.enc{}.conv_a", l + 1), w, prev, 3);
            b.conv(&format!("enhance.enc{}.conv_b", l + 1), w, w, 3);
            prev = w;
        }
        let bw = config.unet_bottleneck_width();
        b.conv("enhance.bottleneck.conv_a", bw, prev, 3);
        b.conv("enhance.bottleneck.conv_b", bw, bw, 3);
        let mut below = bw;
        for (l, &w) in widths.iter().enumerate().rev() {
            b.conv(&format!("enhance.dec{}.conv_a", l + 1), w, below, 3);
            b.conv(&format!("enhance.dec{}.conv_b", l + 1), w, 2 * w, 3);
            b.conv(&format!("enhance.dec{}.conv_c", l + 1), w, w, 3);
            below = w;
        }
        b.conv("enhance.out.conv_a", 2, config.unet_base_width, 3);
        b.conv("enhance.out.conv_b", 1, 2, 1);
    }

    let mut prev = if config.coordconv { 3 } else { 1 };
    for (i, &w) in config.backbone_widths.iter().enumerate() {
        b.conv(&format!("backbone.block{}.conv_a", i + 1), w, prev, 3);
        b.conv(&format!("backbone.block{}.conv_b", i + 1), w, w, 3);
        prev = w;
    }

    b.dense("cls.dense", prev, config.num_classes);

    let [l1, l2, l3] = config.loc_widths();
    b.conv("loc.conv1", l1, prev, 1);
    b.conv("loc.conv2", l2, l1, 1);
    b.conv("loc.conv3", l3, l2, 1);
    let flat = l3 * config.backbone_out_extent() * config.backbone_out_extent();
    b.dense("loc.dense_row", flat, 1);
    b.dense("loc.dense_col", flat, 1);

    Ok(ModelParams {
        config: config.clone(),
        seed,
        params: b.params,
    })
}

/// Outputs of a full forward pass.
pub struct ForwardOutputs<T: Scalar> {
    /// Enhanced image in `[0, 1]`, same shape as the input. Equal to the
    /// input when the enhancement network is disabled.
    pub x_enhanced: Tensor<T>,
    /// Class probabilities `[N, num_classes]` on the simplex.
    pub probs: Tensor<T>,
    /// Estimated shift `[N, 2]` (row, col) in input pixels. `None` when the
    /// input extent differs from the configured one (the flatten layer of
    /// the localization head is extent-specific).
    pub p_hat: Option<Tensor<T>>,
}

fn conv_layer<T: Scalar>(
    params: &ModelParams<T>,
    name: &str,
    x: &Tensor<T>,
    relu: bool,
) -> Result<Tensor<T>> {
    let y = ops::conv2d(x, params.get(&format!("{name}.weight")), 1, Padding::Same)?;
    let y = nn::add_bias(&y, params.get(&format!("{name}.bias")), 1)?;
    Ok(if relu { ops::relu(&y) } else { y })
}

fn pool<T: Scalar>(config: &ModelConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    if config.anti_alias {
        aa_maxpool(x)
    } else {
        max_pool2(x)
    }
}

fn unet_forward<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let config = &params.config;
    let depth = config.unet_depth;
    let mut skips = Vec::with_capacity(depth);
    let mut cur = x.clone();
    for l in 1..=depth {
        cur = conv_layer(params, &format!("enhance.enc{l}.conv_a"), &cur, true)?;
        cur = conv_layer(params, &format!("enhance.enc{l}.conv_b"), &cur, true)?;
        skips.push(cur.clone());
        cur = pool(config, &cur)?;
    }
    cur = conv_layer(params, "enhance.bottleneck.conv_a", &cur, true)?;
    cur = conv_layer(params, "enhance.bottleneck.conv_b", &cur, true)?;
    for l in (1..=depth).rev() {
        cur = upsample_nearest2(&cur)?;
        cur = conv_layer(params, &format!("enhance.dec{l}.conv_a"), &cur, true)?;
        cur = concat(&cur, &skips[l - 1], 1)?;
        cur = conv_layer(params, &format!("enhance.dec{l}.conv_b"), &cur, true)?;
        cur = conv_layer(params, &format!("enhance.dec{l}.conv_c"), &cur, true)?;
    }
    cur = conv_layer(params, "enhance.out.conv_a", &cur, true)?;
    // final 1x1 projection carries no activation before the rescale
    cur = conv_layer(params, "enhance.out.conv_b", &cur, false)?;
    minmax_normalize(&cur)
}

fn backbone_forward<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let config = &params.config;
    let mut cur = if config.coordconv {
        coordconv_augment(x)?
    } else {
        x.clone()
    };
    for i in 1..=config.backbone_widths.len() {
        cur = conv_layer(params, &format!("backbone.block{i}.conv_a"), &cur, true)?;
        cur = conv_layer(params, &format!("backbone.block{i}.conv_b"), &cur, true)?;
        cur = pool(config, &cur)?;
    }
    Ok(cur)
}

/// Full forward pass over a batch of `[N, 1, H, W]` images in `[0, 1]`.
///
/// `H` and `W` may differ from the configured extent (the backbone is fully
/// convolutional and classification still works); the localization head runs
/// only at the configured extent.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    images: &Tensor<T>,
) -> Result<ForwardOutputs<T>> {
    let config = &params.config;
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::ShapeMismatch {
            op: "model::forward",
            lhs: shape.to_vec(),
            rhs: vec![shape[0], 1, config.input_extent, config.input_extent],
        });
    }
    let (h, w) = (shape[2], shape[3]);
    if config.enhancement {
        let div = 1 << config.unet_depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::ShapeMismatch {
                op: "model::forward",
                lhs: shape.to_vec(),
                rhs: vec![shape[0], 1, config.input_extent, config.input_extent],
            });
        }
    }

    let x_enhanced = if config.enhancement {
        unet_forward(params, images)?
    } else {
        images.clone()
    };

    let features = backbone_forward(params, &x_enhanced)?;

    let pooled = global_avg_pool(&features)?;
    let logits = dense(
        &pooled,
        params.get("cls.dense.weight"),
        params.get("cls.dense.bias"),
    )?;
    let probs = softmax(&logits)?;

    let p_hat = if h == config.input_extent && w == config.input_extent {
        let mut loc = features;
        for i in 1..=3 {
            loc = conv_layer(params, &format!("loc.conv{i}"), &loc, true)?;
        }
        let flat = flatten(&loc)?;
        let row = dense(
            &flat,
            params.get("loc.dense_row.weight"),
            params.get("loc.dense_row.bias"),
        )?;
        let col = dense(
            &flat,
            params.get("loc.dense_col.weight"),
            params.get("loc.dense_col.bias"),
        )?;
        Some(concat(&row, &col, 1)?)
    } else {
        None
    };

    Ok(ForwardOutputs {
        x_enhanced,
        probs,
        p_hat,
    })
}

// ---------------------------------------------------------------------------
// symbolic layer plan
// ---------------------------------------------------------------------------

/// One layer of the assembled topology with its output shape `[C, H, W]`
/// (heads report `[units]`).
#[derive(Clone, Debug)]
pub struct LayerInfo {
    pub name: String,
    pub spec: LayerSpec,
    pub output: Vec<usize>,
}

/// Walk the topology symbolically, mirroring `forward` layer by layer.
pub fn plan(config: &ModelConfig) -> Result<Vec<LayerInfo>> {
    config.validate()?;
    let e = config.input_extent;
    let mut layers = Vec::new();
    let push = |layers: &mut Vec<LayerInfo>, name: String, spec: LayerSpec, out: Vec<usize>| {
        layers.push(LayerInfo {
            name,
            spec,
            output: out,
        });
    };
    let pool_spec = |config: &ModelConfig| {
        if config.anti_alias {
            LayerSpec::AaMaxPool { pool: 2 }
        } else {
            LayerSpec::MaxPool { pool: 2 }
        }
    };
    let conv = |filters: usize, relu: bool| LayerSpec::Conv {
        filters,
        kernel: 3,
        stride: 1,
        relu,
    };

    if config.enhancement {
        let widths = config.unet_widths();
        let mut ext = e;
        for (l, &w) in widths.iter().enumerate() {
            push(
                &mut layers,
                format!("enhance.enc{}.conv_a", l + 1),
                conv(w, true),
                vec![w, ext, ext],
            );
            push(
                &mut layers,
                format!("enhance.enc{}.conv_b", l + 1),
                conv(w, true),
                vec![w, ext, ext],
            );
            ext /= 2;
            push(
                &mut layers,
                format!("enhance.enc{}.pool", l + 1),
                pool_spec(config),
                vec![w, ext, ext],
            );
        }
        let bw = config.unet_bottleneck_width();
        push(
            &mut layers,
            "enhance.bottleneck.conv_a".into(),
            conv(bw, true),
            vec![bw, ext, ext],
        );
        push(
            &mut layers,
            "enhance.bottleneck.conv_b".into(),
            conv(bw, true),
            vec![bw, ext, ext],
        );
        for (l, &w) in widths.iter().enumerate().rev() {
            ext *= 2;
            push(
                &mut layers,
                format!("enhance.dec{}.up", l + 1),
                LayerSpec::Upsample { factor: 2 },
                vec![2 * w, ext, ext],
            );
            push(
                &mut layers,
                format!("enhance.dec{}.conv_a", l + 1),
                conv(w, true),
                vec![w, ext, ext],
            );
            push(
                &mut layers,
                format!("enhance.dec{}.merge", l + 1),
                LayerSpec::Concat,
                vec![2 * w, ext, ext],
            );
            push(
                &mut layers,
                format!("enhance.dec{}.conv_b", l + 1),
                conv(w, true),
                vec![w, ext, ext],
            );
            push(
                &mut layers,
                format!("enhance.dec{}.conv_c", l + 1),
                conv(w, true),
                vec![w, ext, ext],
            );
        }
        push(
            &mut layers,
            "enhance.out.conv_a".into(),
            conv(2, true),
            vec![2, e, e],
        );
        push(
            &mut layers,
            "enhance.out.conv_b".into(),
            LayerSpec::Conv {
                filters: 1,
                kernel: 1,
                stride: 1,
                relu: false,
            },
            vec![1, e, e],
        );
        push(
            &mut layers,
            "enhance.rescale".into(),
            LayerSpec::MinMaxNorm,
            vec![1, e, e],
        );
    }

    let mut ch = 1;
    if config.coordconv {
        ch += 2;
        push(
            &mut layers,
            "backbone.coordconv".into(),
            LayerSpec::CoordConv,
            vec![ch, e, e],
        );
    }
    let mut ext = e;
    for (i, &w) in config.backbone_widths.iter().enumerate() {
        push(
            &mut layers,
            format!("backbone.block{}.conv_a", i + 1),
            conv(w, true),
            vec![w, ext, ext],
        );
        push(
            &mut layers,
            format!("backbone.block{}.conv_b", i + 1),
            conv(w, true),
            vec![w, ext, ext],
        );
        ext = ext.div_ceil(2);
        push(
            &mut layers,
            format!("backbone.block{}.pool", i + 1),
            pool_spec(config),
            vec![w, ext, ext],
        );
        ch = w;
    }

    push(
        &mut layers,
        "cls.gap".into(),
        LayerSpec::GlobalAvgPool,
        vec![ch],
    );
    push(
        &mut layers,
        "cls.dense".into(),
        LayerSpec::Dense {
            units: config.num_classes,
        },
        vec![config.num_classes],
    );
    push(
        &mut layers,
        "cls.softmax".into(),
        LayerSpec::Softmax,
        vec![config.num_classes],
    );

    let [l1, l2, l3] = config.loc_widths();
    for (i, w) in [l1, l2, l3].into_iter().enumerate() {
        push(
            &mut layers,
            format!("loc.conv{}", i + 1),
            LayerSpec::Conv {
                filters: w,
                kernel: 1,
                stride: 1,
                relu: true,
            },
            vec![w, ext, ext],
        );
    }
    push(
        &mut layers,
        "loc.flatten".into(),
        LayerSpec::Flatten,
        vec![l3 * ext * ext],
    );
    push(
        &mut layers,
        "loc.dense_row".into(),
        LayerSpec::Dense { units: 1 },
        vec![1],
    );
    push(
        &mut layers,
        "loc.dense_col".into(),
        LayerSpec::Dense { units: 1 },
        vec![1],
    );

    Ok(layers)
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Corrupt(format!("unexpected end of checkpoint ({e})")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Write a little-endian versioned checkpoint: magic, version, seed, the
/// canonical config text, then per-parameter records of name, extents and
/// raw 32-bit values.
pub fn save<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    w.write_all(&params.seed.to_le_bytes())?;
    let cfg = params.config.canonical_text();
    write_u32(&mut w, cfg.len() as u32)?;
    w.write_all(cfg.as_bytes())?;
    write_u32(&mut w, params.params.len() as u32)?;
    for (name, tensor) in &params.params {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            write_u32(&mut w, d as u32)?;
        }
        for v in tensor.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint written by [`save`]. Parameters come back as gradient
/// leaves, ready for further training.
pub fn load<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut seed_b = [0u8; 8];
    read_exact(&mut r, &mut seed_b)?;
    let seed = u64::from_le_bytes(seed_b);
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_b = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg_b)?;
    let config = ModelConfig::from_canonical_text(
        std::str::from_utf8(&cfg_b).map_err(|_| Error::Corrupt("config not utf-8".into()))?,
    )?;

    let n_params = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_b = vec![0u8; name_len];
        read_exact(&mut r, &mut name_b)?;
        let name =
            String::from_utf8(name_b).map_err(|_| Error::Corrupt("name not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            read_exact(&mut r, &mut buf)?;
            data.push(T::cast_f32(f32::from_le_bytes(buf)));
        }
        params.push((name, Tensor::param(&shape, data)?));
    }
    Ok(ModelParams {
        config,
        seed,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_batch(n: usize, e: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * e * e).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(&[n, 1, e, e], data).unwrap()
    }

    #[test]
    fn desk_forward_shapes() {
        let cfg = ModelConfig::default();
        let params = build::<f32>(&cfg, 1).unwrap();
        let x = rand_batch(2, 64, 2);
        let out = forward(&params.detached(), &x).unwrap();
        assert_eq!(out.x_enhanced.shape(), &[2, 1, 64, 64]);
        assert_eq!(out.probs.shape(), &[2, 4]);
        assert_eq!(out.p_hat.unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn probabilities_are_simplex_and_enhanced_in_unit_range() {
        let params = build::<f32>(&ModelConfig::default(), 3).unwrap().detached();
        let x = rand_batch(3, 64, 4);
        let out = forward(&params, &x).unwrap();
        for r in 0..3 {
            let row = &out.probs.data()[r * 4..(r + 1) * 4];
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for &v in out.x_enhanced.data() {
            assert!((-1e-6..=1.0 + 1e-6).contains(&(v as f64)));
        }
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = ModelConfig::default();
        let a = build::<f32>(&cfg, 42).unwrap();
        let b = build::<f32>(&cfg, 42).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = build::<f32>(&cfg, 43).unwrap();
        assert!(a.get("cls.dense.weight").data() != c.get("cls.dense.weight").data());
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let cfg = ModelConfig {
            input_extent: 60,
            ..ModelConfig::default()
        };
        assert!(matches!(
            build::<f32>(&cfg, 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn classification_works_at_other_extents() {
        // fully convolutional up to the global average pool
        let params = build::<f32>(&ModelConfig::default(), 5).unwrap().detached();
        let x = rand_batch(1, 80, 6);
        let out = forward(&params, &x).unwrap();
        assert_eq!(out.probs.shape(), &[1, 4]);
        assert!(out.p_hat.is_none());
    }

    #[test]
    fn wrong_extent_for_enhancement_is_rejected() {
        let params = build::<f32>(&ModelConfig::default(), 5).unwrap().detached();
        let x = rand_batch(1, 30, 6);
        assert!(matches!(
            forward(&params, &x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn plan_matches_forward_shapes_at_desk_scale() {
        let cfg = ModelConfig::default();
        let layers = plan(&cfg).unwrap();
        let by_name = |n: &str| {
            layers
                .iter()
                .find(|l| l.name == n)
                .unwrap_or_else(|| panic!("missing layer {n}"))
                .output
                .clone()
        };
        assert_eq!(by_name("enhance.rescale"), vec![1, 64, 64]);
        assert_eq!(by_name("backbone.block3.pool"), vec![128, 8, 8]);
        assert_eq!(by_name("cls.dense"), vec![4]);
        assert_eq!(by_name("loc.conv1"), vec![32, 8, 8]);
        assert_eq!(by_name("loc.conv3"), vec![8, 8, 8]);
        assert_eq!(by_name("loc.flatten"), vec![512]);
    }

    #[test]
    fn every_downsampling_layer_is_anti_aliased_when_enabled() {
        let layers = plan(&ModelConfig::default()).unwrap();
        for l in &layers {
            if l.spec.is_strided() {
                assert!(l.spec.is_anti_aliased(), "layer {} lacks AA", l.name);
            }
        }
        let plain = plan(&ModelConfig {
            anti_alias: false,
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(plain
            .iter()
            .any(|l| l.spec.is_strided() && !l.spec.is_anti_aliased()));
    }

    #[test]
    fn ssp_term_reaches_only_the_enhancement_group() {
        // backpropagating the similarity term alone leaves the other three
        // groups untouched
        let params = build::<f64>(&ModelConfig::micro(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::new(&[1, 1, 16, 16], data).unwrap();
        let out = forward(&params, &x).unwrap();
        let cfg = crate::loss::MsSsimConfig {
            ssim: crate::loss::SsimConfig {
                window: 7,
                ..Default::default()
            },
            ..Default::default()
        };
        let ssp = crate::loss::loss_ssp(&x, &out.x_enhanced, &cfg).unwrap();
        ssp.backward().unwrap();
        let mut enhance_nonzero = false;
        for (name, t) in params.iter() {
            match group_of(name) {
                ParamGroup::Enhance => {
                    if let Some(g) = t.grad() {
                        enhance_nonzero |= g.iter().any(|&v| v != 0.0);
                    }
                }
                _ => assert!(t.grad().is_none(), "{name} received gradient"),
            }
        }
        assert!(enhance_nonzero);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let params = build::<f32>(&ModelConfig::micro(), 11).unwrap();
        save(&params, &p1).unwrap();
        let loaded = load::<f32>(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let x = rand_batch(2, 16, 12);
        let a = forward(&params.detached(), &x).unwrap();
        let b = forward(&loaded.detached(), &x).unwrap();
        assert_eq!(a.probs.data(), b.probs.data());
        assert_eq!(a.p_hat.unwrap().data(), b.p_hat.unwrap().data());
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let params = build::<f32>(&ModelConfig::micro(), 13).unwrap();
        save(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vers.ckpt");
        let params = build::<f32>(&ModelConfig::micro(), 13).unwrap();
        save(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // bump the version field
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load::<f32>(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }
}
