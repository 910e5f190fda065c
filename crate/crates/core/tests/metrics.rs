#![allow(clippy::needless_range_loop)]

use ecl_core::metrics::{self, Embeddings, GeometrySnapshot};
use ecl_core::verify;
use ecl_core::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random features and labels where every class occurs.
fn sample(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>, usize) {
    let c = rng.gen_range(2..=5);
    let d = rng.gen_range(2..=7);
    let n = rng.gen_range(c..=30);
    let mut labels: Vec<usize> = (0..c).collect();
    labels.extend((c..n).map(|_| rng.gen_range(0..c)));
    (verify::gaussian(rng, n, d), labels, c)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn mean_of(x: &Tensor, labels: &[usize], c: usize) -> Vec<f64> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
    let mut m = vec![0.0; x.cols()];
    for &i in &idx {
        for (k, v) in x.row(i).iter().enumerate() {
            m[k] += v;
        }
    }
    m.iter().map(|v| v / idx.len() as f64).collect()
}

fn fc_oracle(x: &Tensor, labels: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for cls in 0..c {
        let (mut s, mut count) = (0.0, 0usize);
        for i in 0..x.rows() {
            for j in 0..x.rows() {
                if labels[i] == cls && labels[j] == cls {
                    s += norm(&sub(x.row(i), x.row(j)));
                    count += 1;
                }
            }
        }
        total += s / count as f64;
    }
    total / c as f64
}

fn ms_oracle(x: &Tensor, labels: &[usize], c: usize) -> f64 {
    let means: Vec<Vec<f64>> = (0..c).map(|k| mean_of(x, labels, k)).collect();
    let mut s = 0.0;
    for a in 0..c {
        for b in 0..c {
            if a != b {
                s += norm(&sub(&means[a], &means[b]));
            }
        }
    }
    s / (c * (c - 1)) as f64
}

fn sd_oracle(w: &Tensor, x: &Tensor, labels: &[usize], c: usize) -> f64 {
    let means: Vec<Vec<f64>> = (0..c).map(|k| mean_of(x, labels, k)).collect();
    let d = x.cols();
    let g: Vec<f64> = (0..d)
        .map(|k| means.iter().map(|m| m[k]).sum::<f64>() / c as f64)
        .collect();
    let centered: Vec<Vec<f64>> = means.iter().map(|m| sub(m, &g)).collect();
    let mn = centered
        .iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let wn = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut s = 0.0;
    for cls in 0..c {
        for k in 0..d {
            let e = w.get(cls, k) / wn - centered[cls][k] / mn;
            s += e * e;
        }
    }
    s.sqrt()
}

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let g = verify::gaussian(rng, d, d);
    let q = DMatrix::from_row_slice(d, d, g.data()).qr().q();
    Tensor::new(d, d, q.transpose().as_slice().to_vec()).unwrap()
}

/// Regular simplex in the first `c` coordinates of `R^d`, centered, unit rows.
fn simplex(c: usize, d: usize) -> Tensor {
    let mut m = Tensor::zeros(c, d);
    for a in 0..c {
        for k in 0..c {
            m.set(a, k, if a == k { 1.0 } else { 0.0 } - 1.0 / c as f64);
        }
    }
    m.normalize_rows().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_match_double_loop_oracles(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, labels, c) = sample(&mut rng);
        let w = verify::gaussian(&mut rng, c, x.cols());
        prop_assert!((metrics::fc(&x, &labels, c).unwrap() - fc_oracle(&x, &labels, c)).abs() <= 1e-12);
        prop_assert!((metrics::ms(&x, &labels, c).unwrap() - ms_oracle(&x, &labels, c)).abs() <= 1e-12);
        let sd = metrics::sd(&w, &x, &labels, c).unwrap();
        prop_assert!((sd - sd_oracle(&w, &x, &labels, c)).abs() <= 1e-12);
        prop_assert!((0.0..=2.0).contains(&sd));
    }

    #[test]
    fn fc_ms_rotation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, labels, c) = sample(&mut rng);
        let r = random_rotation(&mut rng, x.cols());
        let xr = x.matmul(&r).unwrap();
        let (f0, f1) = (metrics::fc(&x, &labels, c).unwrap(), metrics::fc(&xr, &labels, c).unwrap());
        let (m0, m1) = (metrics::ms(&x, &labels, c).unwrap(), metrics::ms(&xr, &labels, c).unwrap());
        prop_assert!((f0 - f1).abs() <= 1e-10);
        prop_assert!((m0 - m1).abs() <= 1e-10);
    }

    #[test]
    fn sd_scale_invariant(seed in any::<u64>(), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, labels, c) = sample(&mut rng);
        let w = verify::gaussian(&mut rng, c, x.cols());
        let base = metrics::sd(&w, &x, &labels, c).unwrap();
        prop_assert!((metrics::sd(&w.scale(a), &x, &labels, c).unwrap() - base).abs() <= 1e-12);
        prop_assert!((metrics::sd(&w, &x.scale(b), &labels, c).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn pca_eigenvalues_match_full_decomposition(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(3..=6);
        let n = rng.gen_range(20..=60);
        let scales = [3.0, 1.6, 0.8, 0.4, 0.2, 0.1];
        let mut x = verify::gaussian(&mut rng, n, d);
        for r in 0..n {
            for k in 0..d {
                x.set(r, k, x.get(r, k) * scales[k] + 0.5);
            }
        }
        let p = metrics::pca2(&x).unwrap();

        let u = x.normalize_rows().unwrap();
        let mut m = DMatrix::from_row_slice(n, d, u.data());
        let mean = m.row_mean();
        for mut row in m.row_iter_mut() {
            row -= &mean;
        }
        let cov = m.transpose() * &m / n as f64;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let coords = DMatrix::from_row_slice(n, 2, p.coords.data());
        let pc = coords.transpose() * &coords / n as f64;
        prop_assert!((pc[(0, 0)] - eig[0]).abs() <= 1e-8, "{} vs {}", pc[(0, 0)], eig[0]);
        prop_assert!((pc[(1, 1)] - eig[1]).abs() <= 1e-8, "{} vs {}", pc[(1, 1)], eig[1]);
        prop_assert!(pc[(0, 1)].abs() <= 1e-8);
        prop_assert!(pc[(0, 0)] >= pc[(1, 1)]);
        let total: f64 = eig.iter().sum();
        prop_assert!((p.explained - (eig[0] + eig[1]) / total).abs() <= 1e-8);
        for row in 0..2 {
            let first = p.components.row(row).iter().find(|v| v.abs() > 1e-12).unwrap();
            prop_assert!(*first > 0.0);
        }
    }
}

#[test]
fn perfect_simplex_geometry() {
    for c in 2..=5 {
        let d = c + 2;
        let m = simplex(c, d);
        let labels: Vec<usize> = (0..3 * c).map(|i| i % c).collect();
        let x = m.select_rows(&labels);
        let g = GeometrySnapshot::compute(&x, &x, &m, &labels, c, false).unwrap();
        assert!(g.fc.abs() <= 1e-9);
        assert!(g.sd.abs() <= 1e-9);
        assert!(g.simplex_deviation() <= 1e-9, "{}", g.simplex_deviation());
    }
}

#[test]
fn reference_values() {
    let e = |v: &[&[f64]]| {
        Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    };
    let two = e(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert!((metrics::ms(&two, &[0, 1], 2).unwrap() - 2f64.sqrt()).abs() <= 1e-15);
    assert_eq!(
        metrics::ms(&e(&[&[1.0, 2.0], &[1.0, 2.0]]), &[0, 1], 2).unwrap(),
        0.0
    );
    assert_eq!(
        metrics::fc(&e(&[&[1.0, 2.0], &[1.0, 2.0], &[0.5, 0.0]]), &[0, 0, 1], 2).unwrap(),
        0.0
    );

    // centered means are ±(0.5, -0.5)
    let w = e(&[&[-1.0, 1.0], &[1.0, -1.0]]);
    assert!((metrics::sd(&w, &two, &[0, 1], 2).unwrap() - 2.0).abs() <= 1e-12);
    let w = e(&[&[1.0, 1.0], &[-1.0, -1.0]]);
    assert!((metrics::sd(&w, &two, &[0, 1], 2).unwrap() - 2f64.sqrt()).abs() <= 1e-12);

    let same = e(&[&[1.0, 0.0], &[1.0, 0.0]]);
    assert!(metrics::sd(&w, &same, &[0, 1], 2).is_err());
    assert!(metrics::fc(&two, &[0, 0], 2).is_err());
    assert!(metrics::ms(&two, &[0, 0], 1).is_err());
}

#[test]
fn planar_points_are_fully_explained() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = verify::gaussian(&mut rng, 40, 3);
    for r in 0..40 {
        x.set(r, 2, 0.0);
    }
    let p = metrics::pca2(&x).unwrap();
    assert!((p.explained - 1.0).abs() <= 1e-9);

    let line = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    assert!(matches!(
        metrics::pca2(&line),
        Err(ecl_core::Error::Degenerate(_))
    ));
}

#[test]
fn embeddings_csv_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = Embeddings {
        ids: (0..6).map(|i| format!("s{i}")).collect(),
        labels: vec![0, 1, 2, 0, 1, 2],
        features: verify::gaussian(&mut rng, 6, 3),
    };
    let back = Embeddings::from_csv(&e.to_csv()).unwrap();
    assert_eq!(back.ids, e.ids);
    assert_eq!(back.labels, e.labels);
    assert_eq!(back.features, e.features);
    assert_eq!(back.num_classes(), 3);

    let err = Embeddings::from_csv("id,label,dim1\na,0,1.0\nb,x,2.0\n")
        .unwrap_err()
        .to_string();
    assert!(err.contains("line 3"), "{err}");
}
