//! Residual-of-residual depth network.
//!
//! A strided stem, a trunk of residual blocks and a transposed-convolution
//! head produce `K` logits per output pixel at half the input resolution.
//! The expected value over the bins is a residual that is added to the
//! bilinearly downsampled reference depth (the global skip).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BnMode, Graph, ParamStore, Shape, Tensor, Var};
use crate::config::{ConfigSection, ConfigWriter, KeyValues};
use crate::error::{Error, Result};
use crate::raster::{DepthMap, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Shortcut is a strided 1x1 convolution.
    Scaled,
    /// Shortcut is the identity.
    Identical,
}

impl BlockKind {
    fn as_str(self) -> &'static str {
        match self {
            BlockKind::Scaled => "scaled",
            BlockKind::Identical => "identical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels: usize,
}

fn parse_blocks(s: &str) -> Result<Vec<BlockSpec>> {
    s.split(',')
        .map(|item| {
            let (kind, ch) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("block `{item}` is not kind:channels")))?;
            let kind = kind.parse()?;
            let channels = ch
                .parse()
                .map_err(|_| Error::Config(format!("bad channel count `{ch}`")))?;
            Ok(BlockSpec { kind, channels })
        })
        .collect()
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad channel count `{x}`")))
        })
        .collect()
}

struct Joined<'a, T>(&'a [T]);

impl<T: fmt::Display> fmt::Display for Joined<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.channels)
    }
}

/// How the network sees the reference depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// Feed the reference as an input channel (otherwise the channel is zero).
    pub reference_input: bool,
    /// Add the reference to the decoded output.
    pub global_skip: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            reference_input: true,
            global_skip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub in_width: usize,
    pub in_height: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub deconv_channels: Vec<usize>,
    pub bins: usize,
    /// Half-width of the residual bin range, meters.
    pub residual_range: f32,
    pub depth_min: f32,
    pub depth_max: f32,
    /// Multiplier applied to the reference depth in the input channel.
    pub reference_scale: f32,
    /// Batch normalization; when off each normalization layer keeps only
    /// its per-channel affine transform.
    pub batch_norm: bool,
    pub bn_decay: f32,
    pub init_seed: u64,
    pub ablation: Ablation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_width: 64,
            in_height: 48,
            stem_channels: 16,
            blocks: vec![
                BlockSpec {
                    kind: BlockKind::Scaled,
                    channels: 16,
                },
                BlockSpec {
                    kind: BlockKind::Identical,
                    channels: 16,
                },
                BlockSpec {
                    kind: BlockKind::Scaled,
                    channels: 32,
                },
                BlockSpec {
                    kind: BlockKind::Identical,
                    channels: 32,
                },
            ],
            deconv_channels: vec![32, 16],
            bins: 101,
            residual_range: 2.0,
            depth_min: 0.1,
            depth_max: 20.0,
            reference_scale: 0.2,
            batch_norm: true,
            bn_decay: 0.99,
            init_seed: 1,
            ablation: Ablation::default(),
        }
    }
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected on/off, got `{s}`"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl ConfigSection for NetworkConfig {
    fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("stem_channels", &mut self.stem_channels)?;
        kv.take_with("blocks", &mut self.blocks, parse_blocks)?;
        kv.take_with("deconv_channels", &mut self.deconv_channels, parse_list)?;
        kv.take("bins", &mut self.bins)?;
        kv.take("residual_range", &mut self.residual_range)?;
        kv.take("depth_min", &mut self.depth_min)?;
        kv.take("depth_max", &mut self.depth_max)?;
        kv.take("reference_scale", &mut self.reference_scale)?;
        kv.take_with("batch_norm", &mut self.batch_norm, parse_bool)?;
        kv.take("bn_decay", &mut self.bn_decay)?;
        kv.take("init_seed", &mut self.init_seed)?;
        kv.take_with("reference_input", &mut self.ablation.reference_input, parse_bool)?;
        kv.take_with("global_skip", &mut self.ablation.global_skip, parse_bool)?;
        Ok(())
    }

    fn write(&self, w: &mut ConfigWriter) {
        w.section("network");
        w.put("stem_channels", self.stem_channels);
        w.put("blocks", Joined(&self.blocks));
        w.put("deconv_channels", Joined(&self.deconv_channels));
        w.put("bins", self.bins);
        w.put("residual_range", self.residual_range);
        w.put("depth_min", self.depth_min);
        w.put("depth_max", self.depth_max);
        w.put("reference_scale", self.reference_scale);
        w.put("batch_norm", on_off(self.batch_norm));
        w.put("bn_decay", self.bn_decay);
        w.put("init_seed", self.init_seed);
        w.put("reference_input", on_off(self.ablation.reference_input));
        w.put("global_skip", on_off(self.ablation.global_skip));
    }

    fn validate(&self) -> Result<()> {
        NetworkConfig::validate(self)
    }
}

impl NetworkConfig {
    pub fn input_channels(&self) -> usize {
        2
    }

    pub fn out_width(&self) -> usize {
        self.in_width / 2
    }

    pub fn out_height(&self) -> usize {
        self.in_height / 2
    }

    /// Bins over residual depth when the global skip is on, over absolute
    /// depth otherwise.
    pub fn bin_spec(&self) -> BinSpec {
        if self.ablation.global_skip {
            BinSpec::residual(self.bins, self.residual_range)
        } else {
            BinSpec::absolute(self.bins, self.depth_min, self.depth_max)
        }
    }

    /// Trunk spatial size after the stem and every block, as (h, w).
    fn trunk_size(&self) -> Option<(usize, usize)> {
        let down = |n: usize| (n + 2 - 3) / 2 + 1;
        let (mut h, mut w) = (down(self.in_height), down(self.in_width));
        for b in &self.blocks {
            if b.kind == BlockKind::Scaled {
                if h < 2 || w < 2 {
                    return None;
                }
                h = (h - 1) / 2 + 1;
                w = (w - 1) / 2 + 1;
            }
        }
        Some((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.bins < 3 || self.bins.is_multiple_of(2) {
            return fail(format!("bins must be odd and at least 3, got {}", self.bins));
        }
        if !(self.residual_range > 0.0) {
            return fail("residual_range must be positive".into());
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return fail("depth range must satisfy 0 < depth_min < depth_max".into());
        }
        if self.stem_channels == 0 || self.blocks.iter().any(|b| b.channels == 0) || self.deconv_channels.contains(&0) {
            return fail("channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bn_decay) {
            return fail("bn_decay must lie in [0, 1)".into());
        }
        if !self.reference_scale.is_finite() {
            return fail("reference_scale must be finite".into());
        }
        let mut c = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kind == BlockKind::Identical && b.channels != c {
                return fail(format!(
                    "identical block {i} cannot change channels {c} -> {}",
                    b.channels
                ));
            }
            c = b.channels;
        }
        let scaled = self.blocks.iter().filter(|b| b.kind == BlockKind::Scaled).count();
        if scaled != self.deconv_channels.len() {
            return fail(format!(
                "{scaled} scaled blocks need as many deconvolution stages, got {}",
                self.deconv_channels.len()
            ));
        }
        let factor = 1usize << (scaled + 1);
        if !self.in_width.is_multiple_of(factor) || !self.in_height.is_multiple_of(factor) {
            return fail(format!(
                "input {}x{} must be divisible by {factor}",
                self.in_width, self.in_height
            ));
        }
        let Some((h, w)) = self.trunk_size() else {
            return fail("input too small for the block stack".into());
        };
        let up = 1usize << scaled;
        if h * up != self.out_height() || w * up != self.out_width() {
            return fail("trunk and deconvolution sizes do not compose to half resolution".into());
        }
        Ok(())
    }
}

/// `K` bin centers spaced linearly over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    pub centers: Vec<f32>,
    lo: f64,
    width: f64,
}

impl BinSpec {
    /// Symmetric residual bins on `[-r, r]`; the middle center is exactly 0
    /// and `centers[k] == -centers[K-1-k]`.
    pub fn residual(k: usize, r: f32) -> Self {
        let m = (k - 1) as f64 / 2.0;
        let r = r as f64;
        BinSpec {
            centers: (0..k).map(|i| (r * (i as f64 - m) / m) as f32).collect(),
            lo: -r,
            width: r / m,
        }
    }

    pub fn absolute(k: usize, lo: f32, hi: f32) -> Self {
        let (lo, hi) = (lo as f64, hi as f64);
        let width = (hi - lo) / (k - 1) as f64;
        BinSpec {
            centers: (0..k).map(|i| (lo + width * i as f64) as f32).collect(),
            lo,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn bin_width(&self) -> f64 {
        self.width
    }

    /// Index of the nearest center; values outside the range clamp to the
    /// edge bins.
    pub fn discretize(&self, value: f64) -> usize {
        let t = ((value - self.lo) / self.width).round();
        if t.is_nan() || t <= 0.0 {
            0
        } else {
            (t as usize).min(self.len() - 1)
        }
    }
}

/// Batched network input.
#[derive(Debug, Clone)]
pub struct NetInput {
    /// `N x 2 x H x W`: image and scaled reference.
    pub input: Tensor,
    /// `N x 1 x H/2 x W/2` reference for the global skip.
    pub reference_down: Tensor,
    /// Validity of `reference_down`.
    pub reference_valid: Vec<bool>,
}

impl NetInput {
    pub fn batch(&self) -> usize {
        self.input.shape.n
    }
}

/// Assembles a batch. Invalid reference pixels enter as zero.
pub fn prepare_input(cfg: &NetworkConfig, images: &[&GrayImage], references: &[&DepthMap]) -> Result<NetInput> {
    if images.is_empty() || images.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} images for {} references",
            images.len(),
            references.len()
        )));
    }
    let (w, h) = (cfg.in_width, cfg.in_height);
    let (ow, oh) = (cfg.out_width(), cfg.out_height());
    let n = images.len();
    let mut input = Tensor::zeros(Shape::new(n, 2, h, w));
    let mut reference_down = Tensor::zeros(Shape::new(n, 1, oh, ow));
    let mut reference_valid = vec![false; n * oh * ow];
    for (i, (img, r)) in images.iter().zip(references).enumerate() {
        if img.width != w || img.height != h || r.width != w || r.height != h {
            return Err(Error::Shape(format!(
                "sample {i}: image {}x{} and reference {}x{} for a {w}x{h} network",
                img.width, img.height, r.width, r.height
            )));
        }
        let plane = w * h;
        input.data[(2 * i) * plane..(2 * i + 1) * plane].copy_from_slice(&img.data);
        if cfg.ablation.reference_input {
            let dst = &mut input.data[(2 * i + 1) * plane..(2 * i + 2) * plane];
            for (j, d) in dst.iter_mut().enumerate() {
                if r.valid[j] {
                    *d = r.values[j] * cfg.reference_scale;
                }
            }
        }
        let down = r.resize_bilinear(ow, oh);
        let base = i * ow * oh;
        for j in 0..ow * oh {
            if down.valid[j] {
                reference_down.data[base + j] = down.values[j];
                reference_valid[base + j] = true;
            }
        }
    }
    Ok(NetInput {
        input,
        reference_down,
        reference_valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
    /// Expected value over the bins (residual or absolute depth).
    pub expected: Var,
    /// Final depth, `N x 1 x H/2 x W/2`.
    pub depth: Var,
    /// Pixels of `depth` backed by a valid reference (all pixels when the
    /// global skip is off).
    pub valid: Vec<bool>,
    /// Training-mode normalization nodes, by layer prefix.
    pub bn_nodes: Vec<(String, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub params: ParamStore,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: Shape, fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor {
        shape,
        data: (0..shape.len()).map(|_| normal.sample(rng) as f32).collect(),
    }
}

impl Network {
    /// Builds a network with He-initialized convolutions and a zero
    /// logits layer.
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut p = ParamStore::new();
        let conv = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize, k: usize| {
            p.add_param(name, he_normal(rng, Shape::new(o, i, k, k), i * k * k))
        };
        let norm = |p: &mut ParamStore, name: &str, c: usize| -> Result<()> {
            p.add_param(&format!("{name}.gamma"), Tensor::filled(Shape::new(1, c, 1, 1), 1.0))?;
            p.add_param(&format!("{name}.beta"), Tensor::zeros(Shape::new(1, c, 1, 1)))?;
            p.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(Shape::new(1, c, 1, 1)))?;
            p.add_buffer(
                &format!("{name}.running_var"),
                Tensor::filled(Shape::new(1, c, 1, 1), 1.0),
            )
        };
        conv(
            &mut p,
            &mut rng,
            "stem.conv.w",
            cfg.stem_channels,
            cfg.input_channels(),
            3,
        )?;
        norm(&mut p, "stem.bn", cfg.stem_channels)?;
        let mut c = cfg.stem_channels;
        for (i, b) in cfg.blocks.iter().enumerate() {
            let o = b.channels;
            conv(&mut p, &mut rng, &format!("block{i}.conv1.w"), o, c, 1)?;
            norm(&mut p, &format!("block{i}.bn1"), o)?;
            conv(&mut p, &mut rng, &format!("block{i}.conv2.w"), o, o, 3)?;
            norm(&mut p, &format!("block{i}.bn2"), o)?;
            conv(&mut p, &mut rng, &format!("block{i}.conv3.w"), o, o, 1)?;
            norm(&mut p, &format!("block{i}.bn3"), o)?;
            if b.kind == BlockKind::Scaled {
                conv(&mut p, &mut rng, &format!("block{i}.proj.w"), o, c, 1)?;
            }
            c = o;
        }
        for (j, &o) in cfg.deconv_channels.iter().enumerate() {
            // Transposed weights are in_c x out_c x k x k; each output pixel
            // receives k*k/4 taps per input channel at stride 2.
            let t = he_normal(&mut rng, Shape::new(o, c, 4, 4), c * 4);
            let t = Tensor {
                shape: Shape::new(c, o, 4, 4),
                data: t.data,
            };
            p.add_param(&format!("up{j}.w"), t)?;
            norm(&mut p, &format!("up{j}.bn"), o)?;
            c = o;
        }
        p.add_param("head.w", Tensor::zeros(Shape::new(cfg.bins, c, 1, 1)))?;
        p.add_param("head.b", Tensor::zeros(Shape::new(1, cfg.bins, 1, 1)))?;
        Ok(Network { cfg, params: p })
    }

    /// Replaces the weights from a store with identical names and shapes.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        self.params.load_from(store)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str, mode: Mode, bn: &mut Vec<(String, Var)>) -> Result<Var> {
        let gamma = g.param(&format!("{name}.gamma"), self.params.require(&format!("{name}.gamma"))?);
        let beta = g.param(&format!("{name}.beta"), self.params.require(&format!("{name}.beta"))?);
        if !self.cfg.batch_norm {
            return g.batch_norm(x, gamma, beta, BnMode::Affine);
        }
        match mode {
            Mode::Train => {
                let y = g.batch_norm(x, gamma, beta, BnMode::Train)?;
                bn.push((name.to_string(), y));
                Ok(y)
            }
            Mode::Eval => {
                let mean = &self.params.require(&format!("{name}.running_mean"))?.data;
                let var = &self.params.require(&format!("{name}.running_var"))?.data;
                g.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })
            }
        }
    }

    fn weight(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(name, self.params.require(name)?))
    }

    /// `relu(F(x) + h(x))` with `F` = three conv/norm stages.
    pub fn residual_block(
        &self,
        g: &mut Graph,
        x: Var,
        index: usize,
        mode: Mode,
        bn: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        let spec = self
            .cfg
            .blocks
            .get(index)
            .ok_or_else(|| Error::Config(format!("no block {index}")))?;
        let stride = match spec.kind {
            BlockKind::Scaled => 2,
            BlockKind::Identical => 1,
        };
        let p = format!("block{index}");
        let w1 = self.weight(g, &format!("{p}.conv1.w"))?;
        let f = g.conv2d(x, w1, None, stride, 0)?;
        let f = self.norm(g, f, &format!("{p}.bn1"), mode, bn)?;
        let f = g.relu(f);
        let w2 = self.weight(g, &format!("{p}.conv2.w"))?;
        let f = g.conv2d(f, w2, None, 1, 1)?;
        let f = self.norm(g, f, &format!("{p}.bn2"), mode, bn)?;
        let f = g.relu(f);
        let w3 = self.weight(g, &format!("{p}.conv3.w"))?;
        let f = g.conv2d(f, w3, None, 1, 0)?;
        let f = self.norm(g, f, &format!("{p}.bn3"), mode, bn)?;
        let h = match spec.kind {
            BlockKind::Scaled => {
                let wp = self.weight(g, &format!("{p}.proj.w"))?;
                g.conv2d(x, wp, None, 2, 0)?
            }
            BlockKind::Identical => x,
        };
        let s = g.add(f, h)?;
        Ok(g.relu(s))
    }

    /// Trunk and head up to the `K`-channel logits.
    pub fn logits(&self, g: &mut Graph, x: Var, mode: Mode, bn: &mut Vec<(String, Var)>) -> Result<Var> {
        let w = self.weight(g, "stem.conv.w")?;
        let mut h = g.conv2d(x, w, None, 2, 1)?;
        h = self.norm(g, h, "stem.bn", mode, bn)?;
        h = g.relu(h);
        for i in 0..self.cfg.blocks.len() {
            h = self.residual_block(g, h, i, mode, bn)?;
        }
        for j in 0..self.cfg.deconv_channels.len() {
            let w = self.weight(g, &format!("up{j}.w"))?;
            h = g.conv2d_transpose(h, w, None, 2, 1)?;
            h = self.norm(g, h, &format!("up{j}.bn"), mode, bn)?;
            h = g.relu(h);
        }
        let w = self.weight(g, "head.w")?;
        let b = self.weight(g, "head.b")?;
        g.conv2d(h, w, Some(b), 1, 0)
    }

    /// Full forward pass to probabilities and depth.
    pub fn forward(&self, g: &mut Graph, input: &NetInput, mode: Mode) -> Result<ForwardOutput> {
        let s = input.input.shape;
        if s.c != 2 || s.h != self.cfg.in_height || s.w != self.cfg.in_width {
            return Err(Error::Shape(format!(
                "input {s} for a {}x{} network",
                self.cfg.in_width, self.cfg.in_height
            )));
        }
        let x = g.input(input.input.clone());
        let mut bn_nodes = Vec::new();
        let logits = self.logits(g, x, mode, &mut bn_nodes)?;
        let out = g.shape(logits);
        let expect_out = Shape::new(s.n, self.cfg.bins, self.cfg.out_height(), self.cfg.out_width());
        if out != expect_out {
            return Err(Error::Shape(format!("logits {out}, expected {expect_out}")));
        }
        let probs = g.softmax_channels(logits);
        let bins = self.cfg.bin_spec();
        let expected = g.expectation(probs, &bins.centers)?;
        let (depth, valid) = if self.cfg.ablation.global_skip {
            if input.reference_down.shape != g.shape(expected) {
                return Err(Error::Shape(format!(
                    "reference {} does not match output {}",
                    input.reference_down.shape,
                    g.shape(expected)
                )));
            }
            let r = g.input(input.reference_down.clone());
            let sum = g.add(r, expected)?;
            (sum, input.reference_valid.clone())
        } else {
            (expected, vec![true; g.shape(expected).len()])
        };
        let depth = g.clamp(depth, self.cfg.depth_min, self.cfg.depth_max);
        Ok(ForwardOutput {
            logits,
            probs,
            expected,
            depth,
            valid,
            bn_nodes,
        })
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running averages.
    pub fn update_running_stats(&mut self, g: &Graph, out: &ForwardOutput) -> Result<()> {
        let decay = self.cfg.bn_decay;
        for (name, v) in &out.bn_nodes {
            let Some((mean, var)) = g.batch_stats(*v) else {
                continue;
            };
            let rm = self
                .params
                .get_mut(&format!("{name}.running_mean"))
                .ok_or_else(|| Error::Config(format!("missing running mean for {name}")))?;
            for (r, m) in rm.data.iter_mut().zip(mean) {
                *r = decay * *r + (1.0 - decay) * m;
            }
            let rv = self
                .params
                .get_mut(&format!("{name}.running_var"))
                .ok_or_else(|| Error::Config(format!("missing running var for {name}")))?;
            for (r, m) in rv.data.iter_mut().zip(var) {
                *r = decay * *r + (1.0 - decay) * m;
            }
        }
        Ok(())
    }

    /// Evaluation-mode depth prediction for one image, at output resolution.
    pub fn predict(&self, image: &GrayImage, reference: &DepthMap) -> Result<DepthMap> {
        let input = prepare_input(&self.cfg, &[image], &[reference])?;
        let mut preds = self.predict_batch(&input)?;
        Ok(preds.remove(0))
    }

    pub fn predict_batch(&self, input: &NetInput) -> Result<Vec<DepthMap>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, Mode::Eval)?;
        let d = g.value(out.depth);
        if !d.all_finite() {
            return Err(Error::NonFinite("predicted depth".into()));
        }
        let (w, h) = (self.cfg.out_width(), self.cfg.out_height());
        Ok((0..input.batch())
            .map(|i| {
                let mut m = DepthMap::invalid(w, h);
                for j in 0..w * h {
                    if out.valid[i * w * h + j] {
                        m.values[j] = d.data[i * w * h + j];
                        m.valid[j] = true;
                    }
                }
                m
            })
            .collect())
    }
}

/// Center of the most probable bin per pixel; ties go to the lowest index.
pub fn argmax_decode(probs: &Tensor, bins: &BinSpec) -> Result<Tensor> {
    let s = probs.shape;
    if s.c != bins.len() {
        return Err(Error::Shape(format!("{} channels for {} bins", s.c, bins.len())));
    }
    let plane = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if probs.data[(n * s.c + c) * plane + p] > probs.data[(n * s.c + best) * plane + p] {
                    best = c;
                }
            }
            out.data[n * plane + p] = bins.centers[best];
        }
    }
    Ok(out)
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled" => Ok(BlockKind::Scaled),
            "identical" => Ok(BlockKind::Identical),
            _ => Err(Error::Config(format!("unknown block kind `{s}`"))),
        }
    }
}
