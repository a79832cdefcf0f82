//! Small dense helpers for 3×3 symmetric matrices.

use nalgebra::{Matrix3, Vector3};

/// Eigen-decomposition of a symmetric 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEigen3 {
    /// Eigenvalues, ascending.
    pub values: Vector3<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Matrix3<f64>,
    pub sweeps: usize,
}

pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 50;

fn off_diagonal_sq(a: &Matrix3<f64>) -> f64 {
    a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2)
}

/// Cyclic Jacobi eigen-decomposition. Only the upper triangle of `m` is read;
/// callers are expected to have checked symmetry.
///
/// Iteration stops once the off-diagonal Frobenius mass falls below
/// `JACOBI_TOL` relative to the matrix norm, or after `JACOBI_MAX_SWEEPS`.
pub fn jacobi_eigen(m: &Matrix3<f64>) -> SymEigen3 {
    let mut a = Matrix3::new(
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(0, 1)],
        m[(1, 1)],
        m[(1, 2)],
        m[(0, 2)],
        m[(1, 2)],
        m[(2, 2)],
    );
    let mut v = Matrix3::identity();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        if off_diagonal_sq(&a).sqrt() <= JACOBI_TOL * scale {
            break;
        }
        sweeps += 1;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            // Smaller root of t² + 2θt − 1 = 0.
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Matrix3::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * a * rot;
            a[(p, q)] = 0.0;
            a[(q, p)] = 0.0;
            v *= rot;
        }
    }

    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = Vector3::new(a[(order[0], order[0])], a[(order[1], order[1])], a[(order[2], order[2])]);
    let vectors = Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);
    SymEigen3 { values, vectors, sweeps }
}

/// Largest absolute difference between `m` and its transpose.
pub fn asymmetry(m: &Matrix3<f64>) -> f64 {
    (m - m.transpose()).abs().max()
}

/// `v · diag(d) · vᵀ`
pub fn compose_from_eigen(vectors: &Matrix3<f64>, diag: &Vector3<f64>) -> Matrix3<f64> {
    vectors * Matrix3::from_diagonal(diag) * vectors.transpose()
}
