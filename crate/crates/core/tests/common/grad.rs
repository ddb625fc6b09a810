//! Gradient checks of every autodiff op and of the full network with the
//! combined loss against the f64 oracle.

use depthfuse::autodiff::{BnMode, Graph, Shape, Tensor, Var};
use depthfuse::network::{Ablation, BlockKind, BlockSpec, Mode, NetInput, Network, NetworkConfig};
use depthfuse::training::{combined_loss, Targets};
use rand::Rng;

use super::*;

pub const EPS: f64 = 1e-3;
pub const COORDS: usize = 150;
pub const TOL: f64 = 1e-4;

/// Reduces `y` to a scalar with a random full-extent linear probe so every
/// output element carries a distinct weight. Returns the loss node and the
/// probe weights.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> (Var, A) {
    let s = g.shape(y);
    let w = randn(&mut rng(seed), Shape::new(1, s.c, s.h, s.w), 1.0);
    let wv = g.input(w.clone());
    let z = g.conv2d(y, wv, None, 1, 0).unwrap();
    // Far-away target keeps |z - t| on one side, so the loss is linear in z.
    let loss = g.l1_loss(z, &vec![-1000.0; s.n], &vec![true; s.n]).unwrap();
    (loss, A::from_tensor(&w))
}

fn probe_value(y: &A, w: &A) -> f64 {
    let [n, c, h, wd] = y.s;
    let per = c * h * wd;
    (0..n)
        .map(|b| (0..per).map(|k| y.d[b * per + k] * w.d[k]).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

fn grads(g: &Graph, vars: &[Var]) -> Vec<Vec<f32>> {
    vars.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect()
}

fn assert_report(name: &str, r: GradReport) {
    assert!(
        r.checked >= 100,
        "{name}: only {} coordinates checked ({} skipped)",
        r.checked,
        r.skipped
    );
    assert!(r.worst < TOL, "{name}: worst relative error {:e}", r.worst);
}

/// Runs a unary-or-more op through the probe and checks every leaf.
fn check_op<G, O>(name: &str, leaves: &[Tensor], seed: u64, build: G, oracle: O)
where
    G: Fn(&mut Graph, &[Var]) -> Var,
    O: Fn(&[A], &mut Sig) -> A,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&mut g, &vars);
    let (loss, w) = probe(&mut g, y, seed ^ 0xabc);
    g.backward(loss).unwrap();
    let analytic = grads(&g, &vars);
    let inputs: Vec<A> = leaves.iter().map(A::from_tensor).collect();
    // The oracle must agree with the forward value as well.
    let fwd = oracle(&inputs, &mut Sig::default());
    let graph_y = A::from_tensor(g.value(y));
    for (a, b) in fwd.d.iter().zip(&graph_y.d) {
        assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "{name}: forward {a} vs {b}");
    }
    let r = check_gradients(&inputs, &analytic, COORDS, EPS, seed, |xs, sig| {
        probe_value(&oracle(xs, sig), &w)
    });
    assert_report(name, r);
}

pub fn conv2d_cases() {
    for (i, &(k, s, p)) in [(1usize, 1usize, 0usize), (1, 2, 0), (3, 1, 1), (3, 2, 1), (4, 2, 1)]
        .iter()
        .enumerate()
    {
        let mut r = rng(10 + i as u64);
        let x = randn(&mut r, Shape::new(2, 3, 7, 6), 1.0);
        let w = randn(&mut r, Shape::new(4, 3, k, k), 0.5);
        let b = randn(&mut r, Shape::new(1, 4, 1, 1), 0.5);
        check_op(
            &format!("conv2d k{k} s{s} p{p}"),
            &[x, w, b],
            100 + i as u64,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), s, p).unwrap(),
            |a, _| conv(&a[0], &a[1], Some(&a[2]), s, p),
        );
    }
}

pub fn conv2d_transpose_cases() {
    for (i, &(k, s, p)) in [(4usize, 2usize, 1usize), (3, 1, 1), (2, 2, 0)].iter().enumerate() {
        let mut r = rng(20 + i as u64);
        let x = randn(&mut r, Shape::new(2, 3, 4, 5), 1.0);
        let w = randn(&mut r, Shape::new(3, 2, k, k), 0.5);
        let b = randn(&mut r, Shape::new(1, 2, 1, 1), 0.5);
        check_op(
            &format!("conv2d_transpose k{k} s{s} p{p}"),
            &[x, w, b],
            200 + i as u64,
            |g, v| g.conv2d_transpose(v[0], v[1], Some(v[2]), s, p).unwrap(),
            |a, _| conv_t(&a[0], &a[1], Some(&a[2]), s, p),
        );
    }
}

pub fn batch_norm_cases() {
    let mut r = rng(30);
    let x = randn(&mut r, Shape::new(3, 4, 3, 3), 2.0);
    let gamma = uniform(&mut r, Shape::new(1, 4, 1, 1), 0.5, 1.5);
    let beta = randn(&mut r, Shape::new(1, 4, 1, 1), 0.5);
    let leaves = [x, gamma, beta];
    check_op(
        "batch_norm train",
        &leaves,
        300,
        |g, v| g.batch_norm(v[0], v[1], v[2], BnMode::Train).unwrap(),
        |a, _| batch_norm(&a[0], &a[1], &a[2], None),
    );
    let mean = [0.1f32, -0.3, 0.7, 0.0];
    let var = [0.5f32, 2.0, 1.0, 0.25];
    let (m64, v64): (Vec<f64>, Vec<f64>) = mean.iter().zip(&var).map(|(a, b)| (*a as f64, *b as f64)).unzip();
    check_op(
        "batch_norm eval",
        &leaves,
        301,
        |g, v| {
            g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })
                .unwrap()
        },
        |a, _| batch_norm(&a[0], &a[1], &a[2], Some((&m64, &v64))),
    );
    check_op(
        "batch_norm affine",
        &leaves,
        302,
        |g, v| g.batch_norm(v[0], v[1], v[2], BnMode::Affine).unwrap(),
        |a, _| affine(&a[0], &a[1], &a[2]),
    );
}

pub fn elementwise_cases() {
    let mut r = rng(40);
    let x = randn(&mut r, Shape::new(2, 3, 4, 4), 1.0);
    let y = randn(&mut r, Shape::new(2, 3, 4, 4), 1.0);
    check_op(
        "relu",
        std::slice::from_ref(&x),
        400,
        |g, v| g.relu(v[0]),
        |a, s| relu(&a[0], s),
    );
    check_op(
        "add",
        &[x.clone(), y],
        401,
        |g, v| g.add(v[0], v[1]).unwrap(),
        |a, _| add(&a[0], &a[1]),
    );
    check_op(
        "scale",
        std::slice::from_ref(&x),
        402,
        |g, v| g.scale(v[0], -1.7),
        |a, _| scale(&a[0], -1.7),
    );
    check_op(
        "clamp",
        &[x],
        403,
        |g, v| g.clamp(v[0], -0.5, 0.8),
        |a, s| clamp(&a[0], -0.5, 0.8, s),
    );
}

pub fn softmax_expectation_cases() {
    let mut r = rng(50);
    let x = randn(&mut r, Shape::new(2, 7, 3, 4), 1.5);
    check_op(
        "softmax_channels",
        std::slice::from_ref(&x),
        500,
        |g, v| g.softmax_channels(v[0]),
        |a, _| softmax(&a[0]),
    );
    let centers: Vec<f32> = (0..7).map(|i| -1.5 + 0.5 * i as f32).collect();
    let c64: Vec<f64> = centers.iter().map(|v| *v as f64).collect();
    let p = uniform(&mut r, Shape::new(2, 7, 3, 4), 0.0, 1.0);
    check_op(
        "expectation",
        &[p],
        501,
        |g, v| g.expectation(v[0], &centers).unwrap(),
        |a, _| expectation(&a[0], &c64),
    );
    check_op(
        "softmax then expectation",
        &[x],
        502,
        |g, v| {
            let p = g.softmax_channels(v[0]);
            g.expectation(p, &centers).unwrap()
        },
        |a, _| expectation(&softmax(&a[0]), &c64),
    );
}

fn random_targets(r: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize) -> (Vec<usize>, Vec<bool>) {
    let t = (0..n).map(|_| r.random_range(0..k)).collect();
    let mut m: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
    m[0] = true;
    (t, m)
}

fn check_loss<G, O>(name: &str, leaf: Tensor, seed: u64, build: G, oracle: O)
where
    G: Fn(&mut Graph, Var) -> Var,
    O: Fn(&A, &mut Sig) -> f64,
{
    let mut g = Graph::new();
    let v = g.leaf(leaf.clone());
    let loss = build(&mut g, v);
    g.backward(loss).unwrap();
    let analytic = vec![g.grad(v).unwrap().to_vec()];
    let input = [A::from_tensor(&leaf)];
    let f0 = oracle(&input[0], &mut Sig::default());
    let l = g.value(loss).data[0] as f64;
    assert!((f0 - l).abs() <= 1e-5 * (1.0 + f0.abs()), "{name}: forward {f0} vs {l}");
    let r = check_gradients(&input, &analytic, COORDS, EPS, seed, |xs, sig| oracle(&xs[0], sig));
    assert_report(name, r);
}

pub fn loss_cases() {
    let mut r = rng(60);
    let logits = randn(&mut r, Shape::new(2, 5, 4, 4), 1.5);
    let (t, m) = random_targets(&mut r, 32, 5);
    check_loss(
        "nll_logits",
        logits,
        600,
        |g, v| g.nll_logits(v, &t, &m).unwrap(),
        |a, _| nll_logits(a, &t, &m),
    );
    let probs = uniform(&mut r, Shape::new(2, 5, 4, 4), 0.2, 1.0);
    check_loss(
        "nll_probs",
        probs,
        601,
        |g, v| g.nll_probs(v, &t, &m).unwrap(),
        |a, _| nll_probs(a, &t, &m),
    );
    let pred = randn(&mut r, Shape::new(2, 1, 6, 5), 1.0);
    let target: Vec<f32> = randn(&mut r, Shape::new(2, 1, 6, 5), 1.0).data;
    let t64: Vec<f64> = target.iter().map(|v| *v as f64).collect();
    let (_, lm) = random_targets(&mut r, 60, 1);
    check_loss(
        "l1_loss",
        pred,
        602,
        |g, v| g.l1_loss(v, &target, &lm).unwrap(),
        |a, s| l1(a, &t64, &lm, s),
    );
}

pub fn small_config(global_skip: bool) -> NetworkConfig {
    NetworkConfig {
        in_width: 16,
        in_height: 12,
        stem_channels: 4,
        blocks: vec![
            BlockSpec {
                kind: BlockKind::Scaled,
                channels: 6,
            },
            BlockSpec {
                kind: BlockKind::Identical,
                channels: 6,
            },
        ],
        deconv_channels: vec![4],
        bins: 11,
        residual_range: 1.0,
        // Absolute bins span this range; keeping it near the targets keeps
        // second derivatives small enough for the fixed step.
        depth_min: 0.5,
        depth_max: 6.0,
        ablation: Ablation {
            reference_input: true,
            global_skip,
        },
        ..NetworkConfig::default()
    }
}

/// f64 forward of the whole network plus the combined loss.
#[allow(clippy::too_many_arguments)]
fn oracle_loss(
    cfg: &NetworkConfig,
    p: &std::collections::HashMap<String, A>,
    x: &A,
    reference: &A,
    targets: &Targets,
    mask: &[bool],
    alpha: f64,
    sig: &mut Sig,
) -> f64 {
    let norm = |h: &A, name: &str| batch_norm(h, &p[&format!("{name}.gamma")], &p[&format!("{name}.beta")], None);
    let mut h = conv(x, &p["stem.conv.w"], None, 2, 1);
    h = relu(&norm(&h, "stem.bn"), sig);
    for (i, b) in cfg.blocks.iter().enumerate() {
        let s = if b.kind == BlockKind::Scaled { 2 } else { 1 };
        let f = conv(&h, &p[&format!("block{i}.conv1.w")], None, s, 0);
        let f = relu(&norm(&f, &format!("block{i}.bn1")), sig);
        let f = conv(&f, &p[&format!("block{i}.conv2.w")], None, 1, 1);
        let f = relu(&norm(&f, &format!("block{i}.bn2")), sig);
        let f = conv(&f, &p[&format!("block{i}.conv3.w")], None, 1, 0);
        let f = norm(&f, &format!("block{i}.bn3"));
        let short = if b.kind == BlockKind::Scaled {
            conv(&h, &p[&format!("block{i}.proj.w")], None, 2, 0)
        } else {
            h.clone()
        };
        h = relu(&add(&f, &short), sig);
    }
    for j in 0..cfg.deconv_channels.len() {
        h = conv_t(&h, &p[&format!("up{j}.w")], None, 2, 1);
        h = relu(&norm(&h, &format!("up{j}.bn")), sig);
    }
    let logits = conv(&h, &p["head.w"], Some(&p["head.b"]), 1, 0);
    let centers: Vec<f64> = cfg.bin_spec().centers.iter().map(|v| *v as f64).collect();
    let e = expectation(&softmax(&logits), &centers);
    let d = if cfg.ablation.global_skip {
        add(reference, &e)
    } else {
        e
    };
    let d = clamp(&d, cfg.depth_min as f64, cfg.depth_max as f64, sig);
    let depth: Vec<f64> = targets.depth.iter().map(|v| *v as f64).collect();
    nll_logits(&logits, &targets.bins, mask) + alpha * l1(&d, &depth, mask, sig)
}

pub fn check_network(global_skip: bool, seed: u64) {
    let cfg = small_config(global_skip);
    let mut net = Network::new(cfg.clone()).unwrap();
    let mut r = rng(seed);
    // A zero head would block every gradient into the trunk.
    let names: Vec<String> = net
        .params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in &names {
        let t = net.params.get_mut(name).unwrap();
        let fresh = if name.ends_with(".gamma") {
            uniform(&mut r, t.shape, 0.5, 1.5)
        } else if name.ends_with(".beta") || name == "head.b" {
            randn(&mut r, t.shape, 0.3)
        } else if name == "head.w" {
            randn(&mut r, t.shape, 0.5)
        } else {
            t.clone()
        };
        *t = fresh;
    }
    let n = 2;
    let (w, h) = (cfg.in_width, cfg.in_height);
    let (ow, oh) = (cfg.out_width(), cfg.out_height());
    let mut input = uniform(&mut r, Shape::new(n, 2, h, w), 0.0, 1.0);
    for b in 0..n {
        for k in 0..w * h {
            input.data[(2 * b + 1) * w * h + k] *= 0.8;
        }
    }
    let reference_down = uniform(&mut r, Shape::new(n, 1, oh, ow), 1.5, 4.0);
    let reference_valid: Vec<bool> = (0..n * oh * ow).map(|_| r.random_bool(0.9)).collect();
    let ni = NetInput {
        input,
        reference_down,
        reference_valid,
    };
    let px = n * oh * ow;
    let targets = Targets {
        bins: (0..px).map(|_| r.random_range(0..cfg.bins)).collect(),
        depth: (0..px).map(|_| r.random_range(1.0f32..5.0)).collect(),
        residual: vec![0.0; px],
        mask: (0..px).map(|i| i == 0 || r.random_bool(0.85)).collect(),
    };
    let alpha = 1.0f32;

    let mut g = Graph::new();
    let out = net.forward(&mut g, &ni, Mode::Train).unwrap();
    let loss = combined_loss(&mut g, &out, &targets, alpha).unwrap();
    g.backward(loss.total).unwrap();
    let grads = g.gradients();
    let analytic: Vec<Vec<f32>> = names.iter().map(|k| grads.get(k).unwrap().to_vec()).collect();
    let inputs: Vec<A> = names
        .iter()
        .map(|k| A::from_tensor(net.params.get(k).unwrap()))
        .collect();
    let mask: Vec<bool> = targets.mask.iter().zip(&out.valid).map(|(a, b)| *a && *b).collect();
    let x = A::from_tensor(&ni.input);
    let rd = A::from_tensor(&ni.reference_down);

    let f = |xs: &[A], sig: &mut Sig| {
        let p = named_arrays(&names, xs);
        oracle_loss(&cfg, &p, &x, &rd, &targets, &mask, alpha as f64, sig)
    };
    let f0 = f(&inputs, &mut Sig::default());
    let l = g.value(loss.total).data[0] as f64;
    assert!((f0 - l).abs() < 1e-4 * (1.0 + f0.abs()), "network loss {f0} vs {l}");
    let report = check_gradients(&inputs, &analytic, 400, EPS, seed + 1, f);
    assert_report(&format!("network global_skip={global_skip}"), report);
}
