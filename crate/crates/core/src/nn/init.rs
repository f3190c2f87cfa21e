use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// Orthogonal `[rows, cols]` matrix scaled by `gain`.
///
/// Columns are orthonormal when `rows >= cols`, rows otherwise. Signs follow
/// the diagonal of R so the draw is unique for a given normal sample.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(q[(i, j)] * gain);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("orthogonal shape")
}

/// Deterministic per-slot generator derived from a run seed.
pub fn slot_rng(seed: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slot as u64 + 1);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(t: &Tensor) -> Tensor {
        t.transpose().matmul(t).unwrap()
    }

    #[test]
    fn columns_are_orthonormal_times_gain() {
        for &(r, c, gain) in &[(8, 8, 2f64.sqrt()), (10, 4, 1.0), (64, 5, 0.01)] {
            let w = orthogonal(r, c, gain, &mut slot_rng(3, 0));
            let g = gram(&w);
            for i in 0..c {
                for j in 0..c {
                    let want = if i == j { gain * gain } else { 0.0 };
                    assert!((g.row(i)[j] - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn wide_matrices_have_orthonormal_rows() {
        let w = orthogonal(3, 7, 1.0, &mut slot_rng(1, 2));
        let g = w.matmul(&w.transpose()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.row(i)[j] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let a = orthogonal(6, 4, 1.0, &mut slot_rng(9, 1));
        let b = orthogonal(6, 4, 1.0, &mut slot_rng(9, 1));
        assert_eq!(a, b);
        let c = orthogonal(6, 4, 1.0, &mut slot_rng(9, 2));
        assert_ne!(a, c);
    }
}
