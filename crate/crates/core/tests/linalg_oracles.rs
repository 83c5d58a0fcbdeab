use nalgebra::DMatrix;
use proptest::prelude::*;
use qcnn_core::linalg::{
    cholesky, congruence, matmul, matmul_transa, matmul_transb, singular_values, sym_eigenvalues, Matrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_product(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            c[(i, j)] = s;
        }
    }
    c
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn products_match_triple_loop() {
    let a = random(7, 5, 1);
    let b = random(5, 9, 2);
    let c = random(9, 5, 3);
    let d = random(7, 4, 4);
    assert!(max_diff(&matmul(&a, &b).unwrap(), &naive_product(&a, &b)) < 1e-14);
    assert!(max_diff(&matmul_transb(&a, &c).unwrap(), &naive_product(&a, &c.transpose())) < 1e-14);
    assert!(max_diff(&matmul_transa(&a, &d).unwrap(), &naive_product(&a.transpose(), &d)) < 1e-14);
    let g = naive_product(&b, &b.transpose());
    let expected = naive_product(&naive_product(&a, &g), &a.transpose());
    assert!(max_diff(&congruence(&a, &g).unwrap(), &expected) < 1e-13);
    assert!(matmul(&a, &a).is_err());
}

/// Number of eigenvalues below `x`: negative pivots of `A − xI` (Sylvester).
fn count_below(a: &Matrix, x: f64) -> usize {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)] - if i == j { x } else { 0.0 }).collect()).collect();
    let mut negatives = 0;
    for k in 0..n {
        let mut pivot = m[k][k];
        if pivot == 0.0 {
            pivot = -1e-300;
        }
        if pivot < 0.0 {
            negatives += 1;
        }
        for i in k + 1..n {
            let f = m[i][k] / pivot;
            for j in k + 1..n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    negatives
}

fn bisection_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let bound = (0..n)
        .map(|i| (0..n).map(|j| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    let mut out: Vec<f64> = (0..n)
        .map(|k| {
            let (mut lo, mut hi) = (-bound, bound);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if count_below(a, mid) > k {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect();
    out.reverse();
    out
}

#[test]
fn jacobi_eigenvalues_match_inertia_bisection() {
    for seed in 0..5 {
        let r = random(6, 6, 10 + seed);
        let mut s = r.clone();
        for i in 0..6 {
            for j in 0..6 {
                s[(i, j)] = 0.5 * (r[(i, j)] + r[(j, i)]);
            }
        }
        let jacobi = sym_eigenvalues(&s).unwrap();
        let oracle = bisection_eigenvalues(&s);
        for (a, b) in jacobi.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-11, "{jacobi:?} vs {oracle:?}");
        }
    }
}

#[test]
fn singular_values_match_nalgebra() {
    for (rows, cols, seed) in [(5, 5, 20), (9, 4, 21), (3, 8, 22)] {
        let m = random(rows, cols, seed);
        let mut ours = singular_values(&m);
        ours.sort_by(|a, b| b.total_cmp(a));
        let na = DMatrix::from_row_slice(rows, cols, m.as_slice());
        let mut theirs: Vec<f64> = na.singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        let k = rows.min(cols);
        for i in 0..k {
            assert!((ours[i] - theirs[i]).abs() < 1e-12, "{ours:?} vs {theirs:?}");
        }
        assert!(ours[k..].iter().all(|s| s.abs() < 1e-12));
    }
}

/// Low-rank input, the shape of an amplitude matrix across the top cut.
/// Noise-level columns used to keep the sweeps going until the cap.
#[test]
fn rank_deficient_singular_values_converge() {
    let m = matmul(&random(81, 4, 23), &random(4, 81, 24)).unwrap();
    let start = std::time::Instant::now();
    let ours = singular_values(&m);
    assert!(start.elapsed().as_millis() < 200, "{:?}", start.elapsed());
    let na = DMatrix::from_row_slice(81, 81, m.as_slice());
    let mut theirs: Vec<f64> = na.singular_values().iter().copied().collect();
    theirs.sort_by(|a, b| b.total_cmp(a));
    let scale = theirs[0];
    for (a, b) in ours.iter().zip(&theirs) {
        assert!((a - b).abs() < 1e-12 * scale, "{a} vs {b}");
    }
}

#[test]
fn cholesky_rejects_indefinite_input_naming_the_pivot() {
    let m = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
    match cholesky(&m, 0.0) {
        Err(qcnn_core::Error::Factorization { pivot, .. }) => assert_eq!(pivot, 1),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn cholesky_reconstructs_spd(seed in 0u64..1000, n in 1usize..8) {
        let b = random(n, n + 2, seed);
        let g = naive_product(&b, &b.transpose());
        let l = cholesky(&g, 0.0).unwrap();
        for i in 0..n {
            for j in i + 1..n {
                prop_assert_eq!(l[(i, j)], 0.0);
            }
        }
        prop_assert!(max_diff(&naive_product(&l, &l.transpose()), &g) < 1e-12);
    }

    #[test]
    fn eigenvalues_sum_to_trace(seed in 0u64..1000, n in 1usize..7) {
        let b = random(n, n, seed);
        let s = naive_product(&b, &b.transpose());
        let e = sym_eigenvalues(&s).unwrap();
        prop_assert!((e.iter().sum::<f64>() - s.trace()).abs() < 1e-11);
        prop_assert!(e.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(e.iter().all(|&v| v > -1e-12));
    }
}
