mod common;

use common::{expectation, l1, nll_logits, softmax, Sig, A};
use depthfuse::autodiff::{Graph, Shape, Tensor};
use depthfuse::network::{BinSpec, ForwardOutput};
use depthfuse::training::{combined_loss, Targets};
use proptest::prelude::*;

const K: usize = 11;

/// Builds `logits -> softmax -> expectation -> + reference` by hand and
/// returns the handles `combined_loss` expects.
fn one_pixel(g: &mut Graph, logits: &[f32], reference: f32, bins: &BinSpec) -> ForwardOutput {
    let l = g.leaf(Tensor::from_vec(Shape::new(1, K, 1, 1), logits.to_vec()).unwrap());
    let p = g.softmax_channels(l);
    let e = g.expectation(p, &bins.centers).unwrap();
    let r = g.input(Tensor::scalar(reference));
    let d = g.add(r, e).unwrap();
    ForwardOutput {
        logits: l,
        probs: p,
        expected: e,
        depth: d,
        valid: vec![true],
        bn_nodes: Vec::new(),
    }
}

fn targets(bin: usize, depth: f32) -> Targets {
    Targets {
        bins: vec![bin],
        depth: vec![depth],
        residual: vec![0.0],
        mask: vec![true],
    }
}

/// f64 losses of the same one-pixel instance.
fn oracle(logits: &[f64], reference: f64, bin: usize, depth: f64, centers: &[f64]) -> (f64, f64) {
    let a = A::from_flat([1, K, 1, 1], logits);
    let cls = nll_logits(&a, &[bin], &[true]);
    let e = expectation(&softmax(&a), centers);
    let d = A::from_flat([1, 1, 1, 1], &[reference + e.d[0]]);
    let reg = l1(&d, &[depth], &[true], &mut Sig::default());
    (cls, reg)
}

fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let eps = 1e-4;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += eps;
            let fp = f(&p);
            p[i] -= 2.0 * eps;
            (fp - f(&p)) / (2.0 * eps)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn regression_term_refines_within_the_correct_bin() {
    let bins = BinSpec::residual(K, 1.0);
    let centers: Vec<f64> = bins.centers.iter().map(|c| *c as f64).collect();
    let half = bins.bin_width() / 2.0;
    let reference = 3.0;
    // Target residual sits in bin 7 but a third of a bin width off its center.
    let bin = 7;
    let residual = centers[bin] + 0.66 * half;
    assert_eq!(bins.discretize(residual), bin);
    let depth = reference + residual;

    let mut last_cls = f64::INFINITY;
    for sharpness in [1.0, 2.0, 4.0, 8.0, 16.0] {
        // Peaked at the correct bin; the expectation lands near its center,
        // short of the target.
        let logits: Vec<f64> = (0..K).map(|k| -sharpness * (k as f64 - bin as f64).powi(2)).collect();
        let e = expectation(&softmax(&A::from_flat([1, K, 1, 1], &logits)), &centers).d[0];
        assert_eq!(
            bins.discretize(e),
            bin,
            "sharpness {sharpness}: expectation left the bin"
        );
        assert!((e - residual).abs() > 1e-3);

        let g_cls = fd_grad(|x| oracle(x, reference, bin, depth, &centers).0, &logits);
        let g_all = fd_grad(
            |x| {
                let (c, r) = oracle(x, reference, bin, depth, &centers);
                c + r
            },
            &logits,
        );
        let g_reg: Vec<f64> = g_all.iter().zip(&g_cls).map(|(a, b)| a - b).collect();
        assert!(norm(&g_all) > 0.0);
        assert!(
            norm(&g_cls) > 0.0,
            "classification gradient vanished at finite sharpness {sharpness}"
        );
        assert!(
            norm(&g_cls) < last_cls,
            "classification gradient should shrink toward the one-hot limit"
        );
        last_cls = norm(&g_cls);
        // The regression pathway pushes mass toward the side of the target.
        assert!(norm(&g_reg) > 0.0);
        assert!(g_reg[bin + 1] < 0.0, "sharpness {sharpness}: {g_reg:?}");

        let mut g = Graph::new();
        let l32: Vec<f32> = logits.iter().map(|v| *v as f32).collect();
        let out = one_pixel(&mut g, &l32, reference as f32, &bins);
        let loss = combined_loss(&mut g, &out, &targets(bin, depth as f32), 1.0).unwrap();
        g.backward(loss.total).unwrap();
        let analytic = g.grad(out.logits).unwrap();
        for (a, n) in analytic.iter().zip(&g_all) {
            assert!((*a as f64 - n).abs() < 1e-5, "analytic {a} vs numeric {n}");
        }
    }
    assert!(last_cls < 1e-5);
}

#[test]
fn regression_term_ignores_probability_changes_with_fixed_expectation() {
    let bins = BinSpec::residual(K, 1.0);
    let centers: Vec<f64> = bins.centers.iter().map(|c| *c as f64).collect();
    let (bin, depth, reference) = (5usize, 3.3, 3.0);
    // Moving equal mass to two bins symmetric about the center keeps the
    // expectation at zero.
    let a = [0.0f64; K];
    let mut b = [0.0f64; K];
    b[3] = 1.0;
    b[7] = 1.0;
    let (ca, ra) = oracle(&a, reference, bin, depth, &centers);
    let (cb, rb) = oracle(&b, reference, bin, depth, &centers);
    assert!((ra - rb).abs() < 1e-12);
    assert!((ca - cb).abs() > 1e-3);
}

#[test]
fn classification_term_ignores_depth_changes_with_fixed_probs() {
    let bins = BinSpec::residual(K, 1.0);
    let logits: Vec<f32> = (0..K).map(|k| (k as f32 * 0.7).sin()).collect();
    let t = targets(4, 2.5);
    let mut first = None;
    for reference in [1.0f32, 2.0, 4.5] {
        let mut g = Graph::new();
        let out = one_pixel(&mut g, &logits, reference, &bins);
        let loss = combined_loss(&mut g, &out, &t, 1.0).unwrap();
        let cls = g.value(loss.cls).data[0];
        let reg = g.value(loss.reg).data[0];
        match first {
            None => first = Some((cls, reg)),
            Some((c0, r0)) => {
                assert_eq!(cls, c0);
                assert_ne!(reg, r0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn combined_loss_is_linear_in_alpha(
        logits in proptest::collection::vec(-3.0f32..3.0, K * 4),
        refs in proptest::collection::vec(0.5f32..5.0, 4),
        depths in proptest::collection::vec(0.5f32..5.0, 4),
        bins_t in proptest::collection::vec(0usize..K, 4),
        alpha in 0.0f32..5.0,
    ) {
        let bins = BinSpec::residual(K, 1.0);
        let eval = |alpha: f32| {
            let mut g = Graph::new();
            let l = g.leaf(Tensor::from_vec(Shape::new(1, K, 2, 2), logits.clone()).unwrap());
            let p = g.softmax_channels(l);
            let e = g.expectation(p, &bins.centers).unwrap();
            let r = g.input(Tensor::from_vec(Shape::new(1, 1, 2, 2), refs.clone()).unwrap());
            let d = g.add(r, e).unwrap();
            let out = ForwardOutput { logits: l, probs: p, expected: e, depth: d, valid: vec![true; 4], bn_nodes: vec![] };
            let t = Targets { bins: bins_t.clone(), depth: depths.clone(), residual: vec![0.0; 4], mask: vec![true; 4] };
            let loss = combined_loss(&mut g, &out, &t, alpha).unwrap();
            (
                g.value(loss.total).data[0] as f64,
                g.value(loss.cls).data[0] as f64,
                g.value(loss.reg).data[0] as f64,
            )
        };
        let (total, cls, reg) = eval(alpha);
        let (zero, _, _) = eval(0.0);
        prop_assert!((zero - cls).abs() < 1e-6);
        prop_assert!((total - (zero + alpha as f64 * reg)).abs() < 1e-5 * (1.0 + total.abs()));
    }
}
