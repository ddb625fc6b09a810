//! Targets, the joint classification/regression loss, the learning-rate
//! schedule, augmentation and the training loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{sgd_step, write_checkpoint, Graph, Var};
use crate::config::{ConfigSection, ConfigWriter, KeyValues};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, GravityFrame};
use crate::network::{prepare_input, BinSpec, ForwardOutput, Mode, Network, NetworkConfig};
use crate::raster::{DepthMap, GrayImage};
use crate::refmap::{build_reference, DEFAULT_MEDIAN_WINDOW};
use crate::scene_sim::{read_camera_meta, read_scan, SampleFiles};

pub const LOSS_LOG_HEADER: &str = "iter,loss,loss_cls,loss_reg,lr";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Classification only.
    Cls,
    /// Classification plus weighted L1 regression.
    ClsReg,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(LossKind::Cls),
            "cls+reg" => Ok(LossKind::ClsReg),
            _ => Err(Error::Config(format!("loss must be `cls` or `cls+reg`, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Cls => "cls",
            LossKind::ClsReg => "cls+reg",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub alpha: f32,
    pub loss: LossKind,
    pub lr0: f64,
    pub decay_base: f64,
    pub decay_step: usize,
    pub momentum: f32,
    pub iterations: usize,
    pub flip: bool,
    /// Image values are multiplied by a factor drawn from
    /// `[1 - scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f32,
    /// Write an intermediate checkpoint every this many iterations (0: off).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            alpha: 1.0,
            loss: LossKind::ClsReg,
            lr0: 1e-2,
            decay_base: 0.98,
            decay_step: 1000,
            momentum: 0.9,
            iterations: 300,
            flip: true,
            scale_jitter: 0.1,
            checkpoint_every: 0,
            seed: 1,
        }
    }
}

impl ConfigSection for TrainConfig {
    fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("batch_size", &mut self.batch_size)?;
        kv.take("alpha", &mut self.alpha)?;
        kv.take("loss", &mut self.loss)?;
        kv.take("lr0", &mut self.lr0)?;
        kv.take("decay_base", &mut self.decay_base)?;
        kv.take("decay_step", &mut self.decay_step)?;
        kv.take("momentum", &mut self.momentum)?;
        kv.take("iterations", &mut self.iterations)?;
        kv.take("flip", &mut self.flip)?;
        kv.take("scale_jitter", &mut self.scale_jitter)?;
        kv.take("checkpoint_every", &mut self.checkpoint_every)?;
        kv.take("train_seed", &mut self.seed)
    }

    fn write(&self, w: &mut ConfigWriter) {
        w.section("training");
        w.put("batch_size", self.batch_size);
        w.put("alpha", self.alpha);
        w.put("loss", self.loss);
        w.put("lr0", self.lr0);
        w.put("decay_base", self.decay_base);
        w.put("decay_step", self.decay_step);
        w.put("momentum", self.momentum);
        w.put("iterations", self.iterations);
        w.put("flip", self.flip);
        w.put("scale_jitter", self.scale_jitter);
        w.put("checkpoint_every", self.checkpoint_every);
        w.put("train_seed", self.seed);
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be finite and non-negative");
        }
        if !(self.lr0 > 0.0 && self.decay_base > 0.0 && self.decay_step > 0) {
            return fail("learning-rate schedule parameters must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return fail("scale_jitter must lie in [0, 1)");
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Regression weight actually applied.
    pub fn effective_alpha(&self) -> f32 {
        match self.loss {
            LossKind::Cls => 0.0,
            LossKind::ClsReg => self.alpha,
        }
    }

    /// `lr0 * decay_base ^ floor(n / decay_step)`.
    pub fn lr_at(&self, n: usize) -> f64 {
        self.lr0 * self.decay_base.powi((n / self.decay_step) as i32)
    }
}

/// One image with its ground truth and reference map at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub image: GrayImage,
    pub gt: DepthMap,
    pub reference: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub gravity: GravityFrame,
}

impl TrainingSample {
    /// Reads a generated sample and renders its reference map.
    pub fn load(files: &SampleFiles) -> Result<Self> {
        let image = GrayImage::read_pgm(&files.image)?;
        let gt = DepthMap::read_pfm(&files.depth)?;
        let scan = read_scan(&files.scan)?;
        let meta = read_camera_meta(&files.camera)?;
        let reference = build_reference(&scan, &meta.gravity, &meta.intrinsics, DEFAULT_MEDIAN_WINDOW)?;
        let k = meta.intrinsics;
        if image.width != k.width || image.height != k.height || !gt.same_shape(&reference.depth) {
            return Err(Error::format(
                "sample",
                format!("{}: rasters disagree with camera.txt", files.id),
            ));
        }
        Ok(TrainingSample {
            id: files.id.clone(),
            image,
            gt,
            reference: reference.depth,
            intrinsics: k,
            gravity: meta.gravity,
        })
    }

    /// Mirrors every raster left to right.
    pub fn flipped(&self) -> Self {
        TrainingSample {
            id: self.id.clone(),
            image: self.image.flip_horizontal(),
            gt: self.gt.flip_horizontal(),
            reference: self.reference.flip_horizontal(),
            intrinsics: self.intrinsics,
            gravity: self.gravity,
        }
    }

    /// Multiplies image values by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut s = self.clone();
        if factor != 1.0 {
            s.image.data.iter_mut().for_each(|v| *v *= factor);
        }
        s
    }
}

/// Loads samples in parallel, preserving order.
pub fn load_samples<'a, I>(files: I) -> Result<Vec<TrainingSample>>
where
    I: IntoIterator<Item = &'a SampleFiles>,
{
    let files: Vec<&SampleFiles> = files.into_iter().collect();
    files.par_iter().map(|f| TrainingSample::load(f)).collect()
}

/// Random flip and image scaling.
pub fn augment(sample: &TrainingSample, cfg: &TrainConfig, rng: &mut impl Rng) -> TrainingSample {
    // Draw both variates unconditionally so the stream does not depend on flags.
    let flip = rng.random::<bool>();
    let u = rng.random::<f32>();
    let factor = 1.0 + cfg.scale_jitter * (2.0 * u - 1.0);
    let s = if cfg.flip && flip {
        sample.flipped()
    } else {
        sample.clone()
    };
    s.scaled(factor)
}

/// Per-pixel loss targets at network output resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub bins: Vec<usize>,
    /// Ground-truth depth, meters.
    pub depth: Vec<f32>,
    /// Residual `gt - reference`, meters (zero where masked).
    pub residual: Vec<f32>,
    pub mask: Vec<bool>,
}

/// Downsamples ground truth and reference to the output grid and
/// discretizes the residual (or the absolute depth when the global skip
/// is off).
pub fn make_targets(cfg: &NetworkConfig, gt: &DepthMap, reference: &DepthMap) -> Targets {
    let (w, h) = (cfg.out_width(), cfg.out_height());
    let g = gt.resize_bilinear(w, h);
    let r = reference.resize_bilinear(w, h);
    let bins = cfg.bin_spec();
    let n = w * h;
    let mut t = Targets {
        bins: vec![0; n],
        depth: vec![0.0; n],
        residual: vec![0.0; n],
        mask: vec![false; n],
    };
    for i in 0..n {
        let ok = g.valid[i] && (r.valid[i] || !cfg.ablation.global_skip);
        if !ok {
            continue;
        }
        t.mask[i] = true;
        t.depth[i] = g.values[i];
        if cfg.ablation.global_skip {
            let res = g.values[i] as f64 - r.values[i] as f64;
            t.residual[i] = res as f32;
            t.bins[i] = bins.discretize(res);
        } else {
            t.bins[i] = bins.discretize(g.values[i] as f64);
        }
    }
    t
}

/// Concatenates per-sample targets in batch order.
pub fn stack_targets(parts: &[Targets]) -> Targets {
    let mut t = Targets {
        bins: Vec::new(),
        depth: Vec::new(),
        residual: Vec::new(),
        mask: Vec::new(),
    };
    for p in parts {
        t.bins.extend_from_slice(&p.bins);
        t.depth.extend_from_slice(&p.depth);
        t.residual.extend_from_slice(&p.residual);
        t.mask.extend_from_slice(&p.mask);
    }
    t
}

pub fn discretize(residual: f64, bins: &BinSpec) -> usize {
    bins.discretize(residual)
}

/// Graph nodes of the combined loss.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `NLL(logits, bins) + alpha * L1(depth, gt)`, both means over valid
/// pixels. Pixels without a valid prediction are dropped from both terms.
pub fn combined_loss(g: &mut Graph, out: &ForwardOutput, targets: &Targets, alpha: f32) -> Result<LossNodes> {
    let mask: Vec<bool> = targets.mask.iter().zip(&out.valid).map(|(a, b)| *a && *b).collect();
    let cls = g.nll_logits(out.logits, &targets.bins, &mask)?;
    let reg = g.l1_loss(out.depth, &targets.depth, &mask)?;
    let weighted = g.scale(reg, alpha);
    let total = g.add(cls, weighted)?;
    Ok(LossNodes { total, cls, reg })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f32,
    pub loss_cls: f32,
    pub loss_reg: f32,
    pub lr: f64,
}

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.loss, r.loss_cls, r.loss_reg, r.lr);
    }
    s
}

/// Where the training loop writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.ldck")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss_log.csv")
    }

    pub fn intermediate(&self, iter: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_{iter:06}.ldck"))
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
}

/// Deterministic minibatch order: reshuffled every epoch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == 0 {
                self.order.shuffle(rng);
            }
            out.push(self.order[self.pos]);
            self.pos = (self.pos + 1) % self.order.len();
        }
        out
    }
}

/// Result of one optimization step before it is applied.
struct Step {
    record: LossRecord,
    graph: Graph,
    out: ForwardOutput,
}

fn forward_backward(net: &Network, batch: &[TrainingSample], cfg: &TrainConfig, iter: usize) -> Result<Step> {
    let images: Vec<&GrayImage> = batch.iter().map(|s| &s.image).collect();
    let refs: Vec<&DepthMap> = batch.iter().map(|s| &s.reference).collect();
    let input = prepare_input(&net.cfg, &images, &refs)?;
    let parts: Vec<Targets> = batch
        .iter()
        .map(|s| make_targets(&net.cfg, &s.gt, &s.reference))
        .collect();
    let targets = stack_targets(&parts);
    let mut g = Graph::new();
    let out = net.forward(&mut g, &input, Mode::Train)?;
    let loss = combined_loss(&mut g, &out, &targets, cfg.effective_alpha())?;
    let record = LossRecord {
        iter,
        loss: g.value(loss.total).data[0],
        loss_cls: g.value(loss.cls).data[0],
        loss_reg: g.value(loss.reg).data[0],
        lr: cfg.lr_at(iter),
    };
    if !(record.loss.is_finite() && record.loss_cls.is_finite() && record.loss_reg.is_finite()) {
        return Err(Error::NonFinite(format!("loss at iteration {iter} is {}", record.loss)));
    }
    g.backward(loss.total)?;
    Ok(Step { record, graph: g, out })
}

/// Runs `cfg.iterations` SGD steps on `data`.
///
/// With `outputs`, writes the loss log and final checkpoint (plus
/// intermediate checkpoints when configured). A non-finite loss or
/// gradient stops training; the parameters from before the failing step
/// are written as the checkpoint and the error is returned.
pub fn train(
    net: &mut Network,
    data: &[TrainingSample],
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler {
        order: (0..data.len()).collect(),
        pos: 0,
    };
    let mut velocity = HashMap::new();
    let mut records = Vec::with_capacity(cfg.iterations);
    let save = |net: &Network, records: &[LossRecord]| -> Result<()> {
        if let Some(o) = outputs {
            write_checkpoint(&o.checkpoint(), &net.params)?;
            std::fs::write(o.loss_log(), loss_log_csv(records)).map_err(|e| Error::io(o.loss_log(), e))?;
        }
        Ok(())
    };
    for iter in 0..cfg.iterations {
        let idx = sampler.next(cfg.batch_size, &mut rng);
        let batch: Vec<TrainingSample> = idx.iter().map(|&i| augment(&data[i], cfg, &mut rng)).collect();
        let step = forward_backward(net, &batch, cfg, iter).and_then(|step| {
            let grads = step.graph.gradients();
            sgd_step(
                &mut net.params,
                &grads,
                &mut velocity,
                step.record.lr as f32,
                cfg.momentum,
            )?;
            Ok(step)
        });
        let step = match step {
            Ok(s) => s,
            Err(e) => {
                save(net, &records)?;
                return Err(e);
            }
        };
        net.update_running_stats(&step.graph, &step.out)?;
        records.push(step.record);
        if let Some(o) = outputs {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                write_checkpoint(&o.intermediate(iter + 1), &net.params)?;
            }
        }
    }
    save(net, &records)?;
    Ok(TrainReport { records })
}

/// Full-resolution prediction: the network output upsampled by nearest
/// neighbor to the input size.
pub fn predict_full(net: &Network, sample: &TrainingSample) -> Result<DepthMap> {
    let p = net.predict(&sample.image, &sample.reference)?;
    Ok(p.resize_nearest(net.cfg.in_width, net.cfg.in_height))
}

/// Predictions for many samples, batched for throughput.
pub fn predict_all(net: &Network, samples: &[TrainingSample], batch: usize) -> Result<Vec<DepthMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        let refs: Vec<&DepthMap> = chunk.iter().map(|s| &s.reference).collect();
        let input = prepare_input(&net.cfg, &images, &refs)?;
        for p in net.predict_batch(&input)? {
            out.push(p.resize_nearest(net.cfg.in_width, net.cfg.in_height));
        }
    }
    Ok(out)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
