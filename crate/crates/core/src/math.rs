//! Dense row-major linear algebra and the softmax/cross-entropy primitives
//! used by every loss in the crate. All arithmetic is `f64` and every
//! reduction runs in a fixed sequential order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

/// Row-major dense matrix. `data.len() == rows * cols` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice yields a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so a zero-column matrix yields nothing.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::Dimension(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(self.iter_rows().map(|row| dot(row, x)).collect())
    }

    /// `selfᵀ * y`
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vector> {
        if y.len() != self.rows {
            return Err(Error::Dimension(format!(
                "transpose of {}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.iter_rows().zip(y) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * yi;
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_logits(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    Ok(logits.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Max-shifted softmax. Entries underflow to zero only when a logit trails
/// the maximum by more than ~745.
pub fn softmax(logits: &[f64]) -> Result<Vector> {
    let max = check_logits(logits)?;
    let mut out: Vector = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// `z - max - ln Σ exp(z - max)`, computed without going through `softmax`.
pub fn log_softmax(logits: &[f64]) -> Result<Vector> {
    let max = check_logits(logits)?;
    let log_total = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&z| z - max - log_total).collect())
}

/// `w * x + b`
pub fn affine_forward(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vector> {
    if b.len() != w.rows() {
        return Err(Error::Dimension(format!(
            "bias of length {} for {}x{} weights",
            b.len(),
            w.rows(),
            w.cols()
        )));
    }
    let mut out = w.matvec(x)?;
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

/// Gradient of `-Σ target·log softmax(z)` with respect to `z`, given
/// `p = softmax(z)`: simply `p - target`.
pub fn ce_softmax_gradient(p: &[f64], target: &[f64]) -> Result<Vector> {
    if p.len() != target.len() {
        return Err(Error::Dimension(format!(
            "probabilities of length {} vs target of length {}",
            p.len(),
            target.len()
        )));
    }
    Ok(p.iter().zip(target).map(|(a, b)| a - b).collect())
}

/// Central differences `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(loss_fn: F, x: &[f64], h: f64) -> Result<Vector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = loss_fn(&probe);
        probe[i] = x[i] - h;
        let down = loss_fn(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Seed for a reproducible pseudo-random stream.
///
/// Sub-streams are derived by label so unrelated consumers (data generation,
/// splitting, initialization, shuffling) never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn derive(self, label: &str) -> RngSeed {
        // FNV-1a over the label, then a splitmix64 finalizer.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        RngSeed(splitmix64(self.0 ^ h))
    }

    pub fn derive_index(self, index: u64) -> RngSeed {
        RngSeed(splitmix64(
            self.0
                .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        ))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);

        let k = 3.7;
        let shifted = softmax(&[5.0, 5.0 + k, 5.0, 5.0]).unwrap();
        let base = softmax(&[0.0, k, 0.0, 0.0]).unwrap();
        assert!(close(&shifted, &base, 1e-12));

        let p = softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!(close(&p, &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
    }

    #[test]
    fn softmax_rejects_empty_and_nan() {
        assert!(matches!(softmax(&[]), Err(Error::Dimension(_))));
        assert!(matches!(log_softmax(&[]), Err(Error::Dimension(_))));
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn log_softmax_examples() {
        let ln2 = 2f64.ln();
        assert!(close(
            &log_softmax(&[0.0, 0.0]).unwrap(),
            &[-ln2, -ln2],
            1e-15
        ));
        let ls = log_softmax(&[0.0, ln2]).unwrap();
        assert!(close(
            &ls,
            &[(1.0f64 / 3.0).ln(), (2.0f64 / 3.0).ln()],
            1e-15
        ));
        // No -inf even when softmax itself underflows.
        let extreme = log_softmax(&[0.0, 2000.0]).unwrap();
        assert!(extreme.iter().all(|v| v.is_finite()));
        assert_eq!(extreme[0], -2000.0);
    }

    #[test]
    fn affine_examples() {
        let x = vec![0.3, -1.2];
        assert_eq!(
            affine_forward(&Matrix::identity(2), &[0.0, 0.0], &x).unwrap(),
            x
        );
        assert_eq!(
            affine_forward(&Matrix::zeros(2, 2), &[4.0, -1.0], &x).unwrap(),
            vec![4.0, -1.0]
        );
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(
            affine_forward(&w, &[1.0, 1.0], &[1.0, 1.0]).unwrap(),
            vec![4.0, 8.0]
        );
        assert!(matches!(
            affine_forward(&w, &[1.0], &[1.0, 1.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            affine_forward(&w, &[1.0, 1.0], &[1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn transposed_matvec_matches_explicit_transpose() {
        let w = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let wt = Matrix::from_rows(&[[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]]).unwrap();
        let y = [0.5, -2.0];
        assert_eq!(w.matvec_transposed(&y).unwrap(), wt.matvec(&y).unwrap());
    }

    #[test]
    fn gradient_examples() {
        let p = [0.1, 0.2, 0.7];
        assert_eq!(ce_softmax_gradient(&p, &p).unwrap(), vec![0.0; 3]);
        assert_eq!(
            ce_softmax_gradient(&[0.25; 4], &[1.0, 0.0, 0.0, 0.0]).unwrap(),
            vec![-0.75, 0.25, 0.25, 0.25]
        );
        assert!(ce_softmax_gradient(&p, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5)
            .unwrap();
        assert!(close(&g, &[2.0, 4.0], 1e-6));
        let g = finite_difference_gradient(|_| 3.0, &[1.0, -7.0, 0.0], 1e-5).unwrap();
        assert!(close(&g, &[0.0; 3], 1e-9));
        assert!(finite_difference_gradient(|_| 0.0, &[1.0], 0.0).is_err());
        assert!(matches!(
            finite_difference_gradient(|x| 1.0 / x[0], &[0.0], 1e-5).map(|g| g[0].is_finite()),
            Ok(true)
        ));
        assert!(matches!(
            finite_difference_gradient(|x| x[0].ln(), &[0.0], 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = RngSeed(7).rng();
        for case in 0..100 {
            let c = [2, 8, 32][case % 3];
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let target: Vec<f64> = raw.iter().map(|v| v / total).collect();

            let loss = |z: &[f64]| -> f64 {
                let ls = log_softmax(z).unwrap();
                -dot(&target, &ls)
            };
            let numeric = finite_difference_gradient(loss, &logits, 1e-5).unwrap();
            let p = softmax(&logits).unwrap();
            let analytic = ce_softmax_gradient(&p, &target).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
                assert!(rel < 1e-6, "case {case}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }

    #[test]
    fn seeds_are_reproducible_and_labels_separate_streams() {
        let a: Vec<u32> = RngSeed(3)
            .rng()
            .sample_iter(rand::distributions::Standard)
            .take(5)
            .collect();
        let b: Vec<u32> = RngSeed(3)
            .rng()
            .sample_iter(rand::distributions::Standard)
            .take(5)
            .collect();
        assert_eq!(a, b);
        assert_eq!(RngSeed(3).derive("init"), RngSeed(3).derive("init"));
        assert_ne!(RngSeed(3).derive("init"), RngSeed(3).derive("split"));
        assert_ne!(RngSeed(3).derive_index(1), RngSeed(3).derive_index(2));
    }

    proptest! {
        #[test]
        fn softmax_is_a_positive_distribution(v in prop::collection::vec(-300.0f64..300.0, 1..40)) {
            let p = softmax(&v).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
        }

        #[test]
        fn exp_log_softmax_is_softmax(v in prop::collection::vec(-500.0f64..500.0, 1..40)) {
            let p = softmax(&v).unwrap();
            let ls = log_softmax(&v).unwrap();
            prop_assert!(ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max) <= 0.0);
            for (a, b) in p.iter().zip(&ls) {
                prop_assert!((a - b.exp()).abs() <= 1e-12);
                prop_assert!(b.is_finite());
            }
        }

        #[test]
        fn ce_gradient_sums_to_zero(v in prop::collection::vec(-20.0f64..20.0, 2..16), y in 0usize..16) {
            let p = softmax(&v).unwrap();
            let mut t = vec![0.0; v.len()];
            t[y % v.len()] = 1.0;
            let g = ce_softmax_gradient(&p, &t).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() <= 1e-12);
        }
    }
}
