//! Analytic gradients against central finite differences and a dense
//! softmax oracle.

use adacos::geometry::{ClassWeightMatrix, EmbeddingBatch};
use adacos::losses::{
    forward, gradients, gradients_with_guard, logit_gradients, probabilities, LossError, LossKind,
    LossSpec, SinGuard,
};
use adacos::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    // Row norms roughly in [0.5, 2] so no row is near zero.
    let mut m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    for i in 0..rows {
        let target = rng.random_range(0.5..2.0);
        let n = adacos::matrix::norm(m.row(i));
        for v in m.row_mut(i) {
            *v *= target / n;
        }
    }
    m
}

fn random_spec(rng: &mut ChaCha8Rng, kind: LossKind) -> (LossSpec, Option<f64>) {
    let scale = rng.random_range(1.0..32.0);
    match kind {
        LossKind::PlainSoftmax => (LossSpec::PlainSoftmax, None),
        LossKind::ScaledCosine => (LossSpec::ScaledCosine { scale }, None),
        LossKind::CosFaceMargin => (
            LossSpec::CosFaceMargin {
                scale,
                margin: rng.random_range(0.0..0.5),
            },
            None,
        ),
        LossKind::ArcFaceMargin => (
            LossSpec::ArcFaceMargin {
                scale,
                margin: rng.random_range(0.0..0.8),
            },
            None,
        ),
        LossKind::AdaCosFixed => (LossSpec::AdaCosFixed, Some(scale)),
        LossKind::AdaCosDynamic => (LossSpec::AdaCosDynamic, Some(scale)),
    }
}

fn loss_at(spec: &LossSpec, x: &Matrix, w: &Matrix, labels: &[usize], s: Option<f64>) -> f64 {
    let batch = EmbeddingBatch::new(x.clone(), labels.to_vec()).unwrap();
    let weights = ClassWeightMatrix::new(w.clone()).unwrap();
    forward(spec, &batch, &weights, s).unwrap().loss
}

/// Relative error with a floor of 1e-3 on the denominator. At h = 1e-6 the
/// central difference carries absolute rounding noise of about ε·|L|/h, a few
/// 1e-9 for losses near 30, so smaller entries cannot be resolved to 1e-5.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between `analytic` and central differences of `f`
/// with respect to every entry of `param`.
fn fd_max_error(param: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = param.clone();
    for k in 0..p.as_slice().len() {
        let orig = p.as_slice()[k];
        p.as_mut_slice()[k] = orig + H;
        let up = f(&p);
        p.as_mut_slice()[k] = orig - H;
        let down = f(&p);
        p.as_mut_slice()[k] = orig;
        let numeric = (up - down) / (2.0 * H);
        let e = rel_err(analytic.as_slice()[k], numeric);
        worst = worst.max(e);
    }
    worst
}

#[test]
fn finite_difference_agreement_across_all_kinds() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ad);
    let mut draws = 0;
    let mut overall: f64 = 0.0;
    for round in 0..20 {
        for kind in LossKind::ALL {
            let n = rng.random_range(1..=16);
            let c = rng.random_range(3..=50);
            let d = rng.random_range(2..=32);
            let x = random_matrix(&mut rng, n, d);
            let w = random_matrix(&mut rng, c, d);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let (spec, s) = random_spec(&mut rng, kind);

            let batch = EmbeddingBatch::new(x.clone(), labels.clone()).unwrap();
            let weights = ClassWeightMatrix::new(w.clone()).unwrap();
            let g = gradients(&spec, &batch, &weights, s).unwrap();
            assert!((g.loss - loss_at(&spec, &x, &w, &labels, s)).abs() < 1e-12);

            let ex = fd_max_error(&x, &g.d_features, |xp| loss_at(&spec, xp, &w, &labels, s));
            let ew = fd_max_error(&w, &g.d_weights, |wp| loss_at(&spec, &x, wp, &labels, s));
            assert!(
                ex < 1e-5 && ew < 1e-5,
                "round {round} {spec:?} s={s:?} N={n} C={c} d={d}: features {ex:e}, weights {ew:e}"
            );
            overall = overall.max(ex).max(ew);
            draws += 1;
        }
    }
    assert!(draws >= 100);
    eprintln!("{draws} draws, max relative error {overall:e}");
}

#[test]
fn plain_softmax_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let (n, c, d) = (7, 9, 5);
        let mut x = random_matrix(&mut rng, n, d);
        let mut w = random_matrix(&mut rng, c, d);
        // Pre-normalized inputs: the implicit scale is 1.
        for m in [&mut x, &mut w] {
            for i in 0..m.rows() {
                let nr = adacos::matrix::norm(m.row(i));
                m.row_mut(i).iter_mut().for_each(|v| *v /= nr);
            }
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();

        // Textbook form: F = X Wᵀ, G = (P − Y)/N, dX = G W, dW = Gᵀ X.
        let f = Matrix::from_fn(n, c, |i, j| (0..d).map(|k| x[(i, k)] * w[(j, k)]).sum());
        let mut p = Matrix::zeros(n, c);
        for i in 0..n {
            let z: f64 = (0..c).map(|j| f[(i, j)].exp()).sum();
            for j in 0..c {
                p[(i, j)] = f[(i, j)].exp() / z;
            }
        }
        let g = Matrix::from_fn(n, c, |i, j| {
            (p[(i, j)] - if labels[i] == j { 1.0 } else { 0.0 }) / n as f64
        });
        let dx = Matrix::from_fn(n, d, |i, k| (0..c).map(|j| g[(i, j)] * w[(j, k)]).sum());
        let dw = Matrix::from_fn(c, d, |j, k| (0..n).map(|i| g[(i, j)] * x[(i, k)]).sum());

        let batch = EmbeddingBatch::new(x.clone(), labels.clone()).unwrap();
        let weights = ClassWeightMatrix::new(w.clone()).unwrap();
        let got = gradients(&LossSpec::PlainSoftmax, &batch, &weights, None).unwrap();
        for (a, b) in got.d_features.as_slice().iter().zip(dx.as_slice()) {
            assert!((a - b).abs() < 1e-13);
        }
        for (a, b) in got.d_weights.as_slice().iter().zip(dw.as_slice()) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}

#[test]
fn logit_gradient_rows_sum_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, c, d) = (12, 40, 8);
    let x = random_matrix(&mut rng, n, d);
    let w = random_matrix(&mut rng, c, d);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let batch = EmbeddingBatch::new(x, labels.clone()).unwrap();
    let weights = ClassWeightMatrix::new(w).unwrap();
    let fwd = forward(&LossSpec::ScaledCosine { scale: 30.0 }, &batch, &weights, None).unwrap();
    let g = logit_gradients(&probabilities(&fwd.logits), &labels).unwrap();
    for i in 0..n {
        assert!(g.row(i).iter().sum::<f64>().abs() < 1e-12);
    }
}

#[test]
fn cosine_kinds_are_invariant_to_feature_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, c, d) = (6, 11, 7);
    let x = random_matrix(&mut rng, n, d);
    let w = random_matrix(&mut rng, c, d);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let specs = [
        (LossSpec::ScaledCosine { scale: 16.0 }, None),
        (LossSpec::CosFaceMargin { scale: 30.0, margin: 0.35 }, None),
        (LossSpec::ArcFaceMargin { scale: 30.0, margin: 0.5 }, None),
        (LossSpec::AdaCosFixed, Some(5.0)),
        (LossSpec::AdaCosDynamic, Some(7.25)),
    ];
    let weights = ClassWeightMatrix::new(w).unwrap();
    let base = EmbeddingBatch::new(x.clone(), labels.clone()).unwrap();
    for (spec, s) in specs {
        let g0 = gradients(&spec, &base, &weights, s).unwrap();
        let f0 = forward(&spec, &base, &weights, s).unwrap();
        // Powers of two scale norms exactly, so cosines are bitwise unchanged.
        for k in [0.25, 2.0, 8.0] {
            let scaled = EmbeddingBatch::new(x.map(|v| v * k), labels.clone()).unwrap();
            let f1 = forward(&spec, &scaled, &weights, s).unwrap();
            assert_eq!(f0.logits, f1.logits);
            assert_eq!(f0.loss.to_bits(), f1.loss.to_bits());
            let g1 = gradients(&spec, &scaled, &weights, s).unwrap();
            for (a, b) in g0.d_features.as_slice().iter().zip(g1.d_features.as_slice()) {
                assert_eq!(*a / k, *b);
            }
        }
        // Other factors agree to rounding.
        for k in [0.1, 3.7, 9.5] {
            let scaled = EmbeddingBatch::new(x.map(|v| v * k), labels.clone()).unwrap();
            let f1 = forward(&spec, &scaled, &weights, s).unwrap();
            assert!((f0.loss - f1.loss).abs() < 1e-12);
            let g1 = gradients(&spec, &scaled, &weights, s).unwrap();
            for (a, b) in g0.d_features.as_slice().iter().zip(g1.d_features.as_slice()) {
                assert!((a / k - b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}

#[test]
fn arcface_aligned_feature_stays_finite() {
    let x = Matrix::from_rows(&[vec![2.0, 0.0, 0.0]]).unwrap();
    let w = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let batch = EmbeddingBatch::new(x, vec![0]).unwrap();
    let weights = ClassWeightMatrix::new(w).unwrap();
    let spec = LossSpec::ArcFaceMargin { scale: 30.0, margin: 0.5 };
    let g = gradients(&spec, &batch, &weights, None).unwrap();
    assert!(g.d_features.as_slice().iter().all(|v| v.is_finite()));
    assert!(g.d_weights.as_slice().iter().all(|v| v.is_finite()));
    assert!(matches!(
        gradients_with_guard(&spec, &batch, &weights, None, SinGuard::Strict),
        Err(LossError::DegenerateAngle { .. })
    ));
}
