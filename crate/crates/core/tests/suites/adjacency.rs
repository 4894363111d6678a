//! Normalized grid adjacency against an eigenvalue oracle.

use hgcn_core::graph::{gaussian_adjacency, normalize_adjacency};
use hgcn_core::tensor::{Real, Tensor, REAL_EPSILON};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let n = t.shape()[0];
    DMatrix::from_fn(n, n, |i, j| t.data()[i * n + j] as f64)
}

fn check_normalized(hat: &Tensor, label: &str) {
    let n = hat.shape()[0];
    for i in 0..n {
        for j in 0..n {
            assert_eq!(hat.data()[i * n + j], hat.data()[j * n + i], "{label}: asymmetric at ({i},{j})");
        }
    }
    let eig = SymmetricEigen::new(to_matrix(hat));
    let radius = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(radius <= 1.0 + 1e-6, "{label}: spectral radius {radius}");
}

pub fn gaussian_grids_up_to_100_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let h = rng.random_range(1..=10);
        let w = rng.random_range(1..=100 / h);
        let sigma = rng.random_range(0.3..4.0);
        let a = gaussian_adjacency(h, w, sigma);
        assert_eq!(a.shape(), &[h * w, h * w]);
        check_normalized(&normalize_adjacency(&a).unwrap(), &format!("{h}x{w} sigma {sigma:.2}"));
    }
}

pub fn random_symmetric_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let n = rng.random_range(2..=100);
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..i {
                let v = rng.random::<f64>() as Real;
                a.data_mut()[i * n + j] = v;
                a.data_mut()[j * n + i] = v;
            }
        }
        check_normalized(&normalize_adjacency(&a).unwrap(), &format!("random n={n}"));
    }
}

pub fn two_node_case_by_hand() {
    // neighbours at unit distance: a = exp(−1/2); Ã = [[1,a],[a,1]], d̃ = 1 + a
    let a = (-0.5f64).exp();
    let raw = gaussian_adjacency(1, 2, 1.0);
    assert_eq!(raw.data()[0], 0.0);
    assert!((raw.data()[1] as f64 - a).abs() <= REAL_EPSILON);
    let hat = normalize_adjacency(&raw).unwrap();
    let diag = 1.0 / (1.0 + a);
    let off = a / (1.0 + a);
    let expected = [diag, off, off, diag];
    for (k, &e) in expected.iter().enumerate() {
        assert!(
            (hat.data()[k] as f64 - e).abs() <= 2.0 * REAL_EPSILON,
            "entry {k}: {} vs {e}",
            hat.data()[k]
        );
    }
}
