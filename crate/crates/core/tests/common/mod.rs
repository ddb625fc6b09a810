//! Shared helpers for the integration tests: an independent f64 reference
//! implementation of the network ops and a central-difference gradient
//! checker built on it.
#![allow(dead_code)]

pub mod grad;
pub mod obstacle;
pub mod render;

use std::collections::HashMap;

use depthfuse::autodiff::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const BN_EPS: f64 = 1e-5;

/// Dense f64 NCHW array.
#[derive(Debug, Clone, PartialEq)]
pub struct A {
    pub s: [usize; 4],
    pub d: Vec<f64>,
}

impl A {
    pub fn zeros(s: [usize; 4]) -> Self {
        A {
            s,
            d: vec![0.0; s.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        A {
            s: t.shape.dims(),
            d: t.data.iter().map(|v| *v as f64).collect(),
        }
    }

    pub fn from_flat(s: [usize; 4], d: &[f64]) -> Self {
        assert_eq!(d.len(), s.iter().product::<usize>());
        A { s, d: d.to_vec() }
    }

    pub fn i(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.s[1] + c) * self.s[2] + y) * self.s[3] + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[self.i(n, c, y, x)]
    }
}

/// Records which side of every kink (relu, clamp, abs) each element sits
/// on, so finite differences that straddle one can be discarded.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Sig(pub Vec<u8>);

pub fn conv(x: &A, w: &A, b: Option<&A>, stride: usize, pad: usize) -> A {
    let [n, ci, h, wd] = x.s;
    let [co, ci2, kh, kw] = w.s;
    assert_eq!(ci, ci2);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = A::zeros([n, co, oh, ow]);
    for b_ in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.d[o]);
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(b_, i, iy as usize, ix as usize) * w.at(o, i, ky, kx);
                            }
                        }
                    }
                    let k = y.i(b_, o, oy, ox);
                    y.d[k] = acc;
                }
            }
        }
    }
    y
}

/// Transposed convolution; `w` is `in_c x out_c x k x k`.
pub fn conv_t(x: &A, w: &A, b: Option<&A>, stride: usize, pad: usize) -> A {
    let [n, ci, h, wd] = x.s;
    let [ci2, co, kh, kw] = w.s;
    assert_eq!(ci, ci2);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut y = A::zeros([n, co, oh, ow]);
    for b_ in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = y.i(b_, o, oy, ox);
                    y.d[k] = b.map_or(0.0, |b| b.d[o]);
                }
            }
        }
        for i in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.at(b_, i, iy, ix);
                    for o in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let k = y.i(b_, o, oy as usize, ox as usize);
                                y.d[k] += v * w.at(i, o, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Per-channel normalization; `stats = None` uses the biased batch
/// statistics.
pub fn batch_norm(x: &A, gamma: &A, beta: &A, stats: Option<(&[f64], &[f64])>) -> A {
    let [n, c, h, w] = x.s;
    let m = (n * h * w) as f64;
    let mut y = x.clone();
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |b| (0..h * w).map(move |p| (b, p)));
        let (mean, var) = match stats {
            Some((mu, var)) => (mu[ch], var[ch]),
            None => {
                let mean = vals().map(|(b, p)| x.d[(b * c + ch) * h * w + p]).sum::<f64>() / m;
                let var = vals()
                    .map(|(b, p)| (x.d[(b * c + ch) * h * w + p] - mean).powi(2))
                    .sum::<f64>()
                    / m;
                (mean, var)
            }
        };
        let inv = 1.0 / (var + BN_EPS).sqrt();
        for (b, p) in vals() {
            let k = (b * c + ch) * h * w + p;
            y.d[k] = gamma.d[ch] * (x.d[k] - mean) * inv + beta.d[ch];
        }
    }
    y
}

/// `gamma * x + beta` per channel.
pub fn affine(x: &A, gamma: &A, beta: &A) -> A {
    let [_, c, h, w] = x.s;
    let mut y = x.clone();
    for (k, v) in y.d.iter_mut().enumerate() {
        let ch = (k / (h * w)) % c;
        *v = gamma.d[ch] * *v + beta.d[ch];
    }
    y
}

pub fn relu(x: &A, sig: &mut Sig) -> A {
    let mut y = x.clone();
    for v in &mut y.d {
        sig.0.push((*v > 0.0) as u8);
        *v = v.max(0.0);
    }
    y
}

pub fn add(a: &A, b: &A) -> A {
    assert_eq!(a.s, b.s);
    A {
        s: a.s,
        d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(),
    }
}

pub fn scale(a: &A, s: f64) -> A {
    A {
        s: a.s,
        d: a.d.iter().map(|v| v * s).collect(),
    }
}

pub fn softmax(x: &A) -> A {
    let [n, c, h, w] = x.s;
    let mut y = x.clone();
    for b in 0..n {
        for p in 0..h * w {
            let at = |ch: usize| (b * c + ch) * h * w + p;
            let z: f64 = (0..c).map(|ch| x.d[at(ch)].exp()).sum();
            for ch in 0..c {
                y.d[at(ch)] = x.d[at(ch)].exp() / z;
            }
        }
    }
    y
}

pub fn expectation(p: &A, centers: &[f64]) -> A {
    let [n, c, h, w] = p.s;
    let mut y = A::zeros([n, 1, h, w]);
    for b in 0..n {
        for q in 0..h * w {
            y.d[b * h * w + q] = (0..c).map(|ch| p.d[(b * c + ch) * h * w + q] * centers[ch]).sum();
        }
    }
    y
}

pub fn clamp(x: &A, lo: f64, hi: f64, sig: &mut Sig) -> A {
    let mut y = x.clone();
    for v in &mut y.d {
        sig.0.push(if *v < lo {
            0
        } else if *v > hi {
            2
        } else {
            1
        });
        *v = v.clamp(lo, hi);
    }
    y
}

/// Mean `-log softmax(logits)[target]` over masked pixels.
pub fn nll_logits(logits: &A, targets: &[usize], mask: &[bool]) -> f64 {
    let [n, c, h, w] = logits.s;
    let (mut total, mut count) = (0.0, 0usize);
    for b in 0..n {
        for q in 0..h * w {
            let i = b * h * w + q;
            if !mask[i] {
                continue;
            }
            let at = |ch: usize| (b * c + ch) * h * w + q;
            let lse = (0..c).map(|ch| logits.d[at(ch)].exp()).sum::<f64>().ln();
            total += lse - logits.d[at(targets[i])];
            count += 1;
        }
    }
    total / count as f64
}

pub fn nll_probs(p: &A, targets: &[usize], mask: &[bool]) -> f64 {
    let [n, c, h, w] = p.s;
    let (mut total, mut count) = (0.0, 0usize);
    for b in 0..n {
        for q in 0..h * w {
            let i = b * h * w + q;
            if mask[i] {
                total -= p.d[(b * c + targets[i]) * h * w + q].ln();
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn l1(pred: &A, target: &[f64], mask: &[bool], sig: &mut Sig) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for (i, (&p, &t)) in pred.d.iter().zip(target).enumerate() {
        if mask[i] {
            sig.0.push((p > t) as u8);
            total += (p - t).abs();
            count += 1;
        }
    }
    total / count as f64
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: Shape, std: f64) -> Tensor {
    let data = (0..shape.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor { shape, data }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor { shape, data }
}

/// Central-difference comparison of analytic gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// Absolute floor in the relative-error denominator: analytic gradients
/// are accumulated in f32, so coordinates whose gradient is below this
/// scale are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Checks `analytic` against central differences of `f` over random
/// coordinates of `inputs`. Coordinates whose perturbation flips a kink
/// recorded in [`Sig`] are skipped.
pub fn check_gradients<F>(inputs: &[A], analytic: &[Vec<f32>], n_coords: usize, eps: f64, seed: u64, f: F) -> GradReport
where
    F: Fn(&[A], &mut Sig) -> f64,
{
    assert_eq!(inputs.len(), analytic.len());
    let mut r = rng(seed);
    let mut work = inputs.to_vec();
    let mut base_sig = Sig::default();
    f(&work, &mut base_sig);
    let mut report = GradReport::default();
    for _ in 0..n_coords {
        let t = r.random_range(0..inputs.len());
        let k = r.random_range(0..inputs[t].d.len());
        let x0 = work[t].d[k];
        work[t].d[k] = x0 + eps;
        let mut sp = Sig::default();
        let fp = f(&work, &mut sp);
        work[t].d[k] = x0 - eps;
        let mut sm = Sig::default();
        let fm = f(&work, &mut sm);
        work[t].d[k] = x0;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let e = rel_err(analytic[t][k] as f64, numeric);
        report.checked += 1;
        if e > report.worst {
            report.worst = e;
        }
    }
    report
}

/// Named f64 copies of a parameter store's tensors.
pub fn named_arrays(names: &[String], inputs: &[A]) -> HashMap<String, A> {
    names.iter().cloned().zip(inputs.iter().cloned()).collect()
}
