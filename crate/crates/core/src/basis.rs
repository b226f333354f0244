//! Temporal basis functions held as an N x K table, DCT-initialized.
//!
//! The first column is the constant function and is frozen: it never
//! receives gradients and never moves, so its weight is the static signed
//! distance of a point. The remaining columns are free parameters trained
//! together with the grid and decoder.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BasisTable {
    frames: usize,
    basis_count: usize,
    /// Row-major N x K values, row t = (phi_1(t), ..., phi_K(t)).
    values: Vec<f64>,
    /// Gradient accumulator, same layout; column 0 stays identically zero.
    grad: Vec<f64>,
}

impl BasisTable {
    /// DCT-II initialization: entry (t, k) = cos(pi/(2N) * (2t+1) * (k-1))
    /// with t in 0..N and k in 1..=K. The k = 1 column is exactly 1.
    pub fn init_dct(frames: usize, basis_count: usize) -> Result<BasisTable> {
        if frames == 0 {
            return Err(Error::InvalidInput("basis needs at least one frame".into()));
        }
        if basis_count < 2 {
            return Err(Error::InvalidInput(format!(
                "basis_count must be at least 2, got {basis_count}"
            )));
        }
        if basis_count > frames {
            eprintln!(
                "warning: over-complete temporal basis ({basis_count} functions \
                 for {frames} frames)"
            );
        }
        let mut values = vec![0.0; frames * basis_count];
        let scale = std::f64::consts::PI / (2.0 * frames as f64);
        for t in 0..frames {
            for j in 0..basis_count {
                values[t * basis_count + j] = if j == 0 {
                    1.0
                } else {
                    (scale * (2 * t + 1) as f64 * j as f64).cos()
                };
            }
        }
        Ok(BasisTable {
            frames,
            basis_count,
            grad: vec![0.0; values.len()],
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    /// Row t of the table: the K basis values at frame t.
    pub fn eval_row(&self, t: usize) -> Result<&[f64]> {
        if t >= self.frames {
            return Err(Error::InvalidInput(format!(
                "frame {t} out of range 0..{}",
                self.frames
            )));
        }
        Ok(self.row(t))
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.basis_count..(t + 1) * self.basis_count]
    }

    /// grad[t, k] += upstream * weights[k] for the trainable columns
    /// (k >= 2); the frozen first column is untouched.
    pub fn accumulate_grad(&mut self, t: usize, weights: &[f64], upstream: f64) {
        let row = &mut self.grad[t * self.basis_count..(t + 1) * self.basis_count];
        accumulate_basis_grad_into(row, weights, upstream);
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw table (optimizers, gradient checks).
    /// The frozen-column invariant is preserved by construction elsewhere:
    /// column 0 never receives gradient, so optimizers never move it.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Simultaneous borrow of values (mutable) and gradient (shared),
    /// for in-place optimizer updates.
    pub fn values_and_grad_mut(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.values, &self.grad)
    }

    pub(crate) fn from_raw(frames: usize, basis_count: usize, values: Vec<f64>) -> BasisTable {
        assert_eq!(values.len(), frames * basis_count);
        BasisTable {
            frames,
            basis_count,
            grad: vec![0.0; values.len()],
            values,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Largest deviation of the frozen column from exactly 1.
    pub fn frozen_column_error(&self) -> f64 {
        (0..self.frames)
            .map(|t| (self.values[t * self.basis_count] - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Accumulates the chain-rule contribution of one query into a row-sized
/// gradient buffer. Used both by [`BasisTable::accumulate_grad`] and by
/// the per-worker buffers of the trainer.
#[inline]
pub fn accumulate_basis_grad_into(row_grad: &mut [f64], weights: &[f64], upstream: f64) {
    for (g, w) in row_grad.iter_mut().zip(weights).skip(1) {
        *g += upstream * w;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the DCT-II formula, kept separate from the
    /// table construction it checks.
    fn dct_entry(frames: usize, t: usize, k: usize) -> f64 {
        (std::f64::consts::PI / (2.0 * frames as f64) * (2 * t + 1) as f64 * (k - 1) as f64).cos()
    }

    #[test]
    fn first_column_is_one() {
        for n in [1, 2, 7, 32] {
            let table = BasisTable::init_dct(n, 4).unwrap();
            for t in 0..n {
                assert_eq!(table.row(t)[0], 1.0);
            }
        }
    }

    #[test]
    fn second_column_matches_formula_for_two_frames() {
        let table = BasisTable::init_dct(2, 2).unwrap();
        let expect0 = dct_entry(2, 0, 2);
        let expect1 = dct_entry(2, 1, 2);
        assert!((expect0 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((expect1 + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(table.row(0)[1], expect0);
        assert_eq!(table.row(1)[1], expect1);
    }

    #[test]
    fn single_frame_row() {
        let table = BasisTable::init_dct(1, 2).unwrap();
        assert_eq!(table.eval_row(0).unwrap(), &[1.0, dct_entry(1, 0, 2)]);
        assert!(table.row(0)[1].abs() < 1e-12); // cos(pi/2)
    }

    #[test]
    fn dct_columns_are_orthogonal() {
        let n = 8;
        let k = 8;
        let table = BasisTable::init_dct(n, k).unwrap();
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = (0..n).map(|t| table.row(t)[a] * table.row(t)[b]).sum();
                let expected = if a != b {
                    0.0
                } else if a == 0 {
                    n as f64
                } else {
                    n as f64 / 2.0
                };
                assert!(
                    (dot - expected).abs() < 1e-9,
                    "gram[{a}][{b}] = {dot}, expected {expected}"
                );
            }
        }
    }

    #[test]
    fn out_of_range_frame_errors() {
        let table = BasisTable::init_dct(3, 2).unwrap();
        assert!(table.eval_row(3).is_err());
    }

    #[test]
    fn grad_accumulation_skips_frozen_column() {
        let mut table = BasisTable::init_dct(4, 3).unwrap();
        table.accumulate_grad(2, &[0.5, 2.0, -1.0], 1.0);
        assert_eq!(table.grad()[2 * 3], 0.0);
        assert_eq!(table.grad()[2 * 3 + 1], 2.0);
        assert_eq!(table.grad()[2 * 3 + 2], -1.0);
        // zero upstream: no change
        table.accumulate_grad(2, &[9.0, 9.0, 9.0], 0.0);
        assert_eq!(table.grad()[2 * 3 + 1], 2.0);
        // linear in repeated calls
        table.accumulate_grad(2, &[0.0, 1.0, 0.0], 3.0);
        assert_eq!(table.grad()[2 * 3 + 1], 5.0);
    }

    #[test]
    fn basis_grad_matches_finite_difference() {
        // F(w, row) = dot(w, row); perturbing one trainable entry of the row
        // must match the accumulated gradient.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let k = 5;
            let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut table = BasisTable::init_dct(6, k).unwrap();
            let t = rng.gen_range(0..6);
            let col = rng.gen_range(1..k);
            let upstream = rng.gen_range(-2.0..2.0);
            table.accumulate_grad(t, &weights, upstream);
            let analytic = table.grad()[t * k + col];

            let h = 1e-6;
            let f = |delta: f64| {
                let mut row = table.row(t).to_vec();
                row[col] += delta;
                let val: f64 = weights.iter().zip(&row).map(|(w, p)| w * p).sum();
                upstream * val
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() <= 1e-6 * analytic.abs().max(1.0),
                "analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
