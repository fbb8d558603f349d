//! Weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Uniform(-bound, bound) matrix.
pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("length matches by construction")
}

/// Uniform(-1/sqrt(fan), 1/sqrt(fan)) matrix, the standard scaled init.
pub fn scaled_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan: usize) -> Tensor {
    uniform(rng, rows, cols, 1.0 / (fan as f64).sqrt())
}

/// Random dxd orthogonal matrix via modified Gram-Schmidt on a random
/// uniform matrix. Used for recurrent weights, where orthogonality keeps
/// long products of Jacobians well conditioned.
pub fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    loop {
        let m = uniform(rng, d, d, 1.0);
        if let Some(q) = gram_schmidt(&m) {
            return q;
        }
        // Rank-deficient draw (vanishingly rare): try again.
    }
}

fn gram_schmidt(m: &Tensor) -> Option<Tensor> {
    let d = m.rows();
    let mut q = m.clone();
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| q.get(i, k) * q.get(j, k)).sum();
            for k in 0..d {
                let v = q.get(i, k) - dot * q.get(j, k);
                q.set(i, k, v);
            }
        }
        let norm: f64 = (0..d).map(|k| q.get(i, k).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return None;
        }
        for k in 0..d {
            q.set(i, k, q.get(i, k) / norm);
        }
    }
    Some(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(&mut rng, 6);
        let qt = q.transposed();
        let prod = q.matmul(&qt);
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn uniform_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = uniform(&mut rng, 10, 10, 0.25);
        assert!(t.data().iter().all(|v| v.abs() < 0.25));
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = uniform(&mut ChaCha8Rng::seed_from_u64(42), 4, 4, 1.0);
        let b = uniform(&mut ChaCha8Rng::seed_from_u64(42), 4, 4, 1.0);
        assert_eq!(a, b);
    }
}
