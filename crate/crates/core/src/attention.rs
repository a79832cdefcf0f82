//! Dense scaled dot-product attention helpers.

use nalgebra::DMatrix;

/// Numerically stable softmax over each row.
pub fn softmax_rows(scores: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = scores.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Backward of `softmax_rows`: given `p = softmax(s)` and `∂L/∂p`, returns `∂L/∂s`.
pub fn softmax_rows_backward(p: &DMatrix<f64>, grad_p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p.nrows(), p.ncols());
    for r in 0..p.nrows() {
        let dot: f64 = (0..p.ncols()).map(|c| p[(r, c)] * grad_p[(r, c)]).sum();
        for c in 0..p.ncols() {
            out[(r, c)] = p[(r, c)] * (grad_p[(r, c)] - dot);
        }
    }
    out
}

/// `softmax(q kᵀ / √d)`, rows of `q` attending over rows of `k`.
pub fn attention_probs(q: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    softmax_rows(&((q * k.transpose()) * scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one_with_large_scores() {
        let s = DMatrix::from_row_slice(2, 3, &[1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0]);
        let p = softmax_rows(&s);
        for r in 0..2 {
            assert!((p.row(r).sum() - 1.0).abs() < 1e-15);
        }
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = DMatrix::from_row_slice(2, 3, &[0.3, -1.0, 0.7, 2.0, 0.1, -0.4]);
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let loss = |s: &DMatrix<f64>| softmax_rows(s).component_mul(&g).sum();
        let analytic = softmax_rows_backward(&softmax_rows(&s), &g);
        let h = 1e-6;
        for i in 0..6 {
            let mut a = s.clone();
            let mut b = s.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }
}
