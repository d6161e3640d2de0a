#![allow(dead_code)]

use ndarray::{Array1, Array2};
use prunelab::{ParamSet, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<S> {
    Array2::from_shape_fn((rows, cols), |_| {
        S::from_f64_lossy(rng.random_range(-1.0..1.0))
    })
}

/// Random MLP with the given layer widths, input first.
pub fn random_net<S: Scalar>(rng: &mut ChaCha8Rng, dims: &[usize]) -> ParamSet<S> {
    let layers = dims
        .windows(2)
        .map(|w| {
            let weight = uniform_matrix(rng, w[1], w[0]);
            let bias =
                Array1::from_shape_fn(w[1], |_| S::from_f64_lossy(rng.random_range(-0.5..0.5)));
            (weight, bias)
        })
        .collect();
    ParamSet::from_layers(layers).unwrap()
}

/// Straight-line CKA: explicit centering matrix and trace formula,
/// `tr(F Fᵀ H G Gᵀ H) / sqrt(tr(F Fᵀ H F Fᵀ H) · tr(G Gᵀ H G Gᵀ H))`.
pub fn cka_oracle(f: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let s = f.nrows();
    let mut h = Array2::<f64>::eye(s);
    h.mapv_inplace(|v| v - 1.0 / s as f64);
    let k = f.dot(&f.t());
    let l = g.dot(&g.t());
    let cov = |x: &Array2<f64>, y: &Array2<f64>| {
        let m = x.dot(&h).dot(y).dot(&h);
        m.diag().sum() / ((s - 1) * (s - 1)) as f64
    };
    cov(&k, &l) / (cov(&k, &k) * cov(&l, &l)).sqrt()
}

/// Orthogonal `d×d` matrix from Gram-Schmidt on a random matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let a: Array2<f64> = uniform_matrix(rng, d, d);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = a.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k).to_owned();
            let proj = qk.dot(&v);
            v.scaled_add(-proj, &qk);
        }
        let n = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / n));
    }
    q
}
