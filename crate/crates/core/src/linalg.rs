//! Small dense linear algebra on row-major `Vec<f64>` matrices.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVectorViewMut, SymmetricEigen};

/// Eigendecomposition of a symmetric `n×n` matrix.
///
/// Returns eigenvalues sorted descending and the matching unit eigenvectors
/// (one `Vec` per eigenvalue). Each vector's largest-magnitude coordinate is
/// made positive so the output is fully determined.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&col| {
            let mut vec: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
            let pivot = vec.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
            if pivot < 0.0 {
                vec.iter_mut().for_each(|x| *x = -*x);
            }
            vec
        })
        .collect();
    (values, vectors)
}

/// Row-major lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix, or `None` if the factorization fails.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let l = Cholesky::new(DMatrix::from_row_slice(n, n, a))?.unpack();
    Some((0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| l[(r, c)]).collect())
}

/// Solves `L y = b` in place for row-major lower-triangular `L`.
pub fn forward_substitute(l: &[f64], n: usize, b: &mut [f64]) {
    // Read column-major, the row-major `L` is `Lᵀ`, so this solves `(Lᵀ)ᵀ y = b`.
    let lt = DMatrixView::from_slice(l, n, n);
    lt.tr_solve_upper_triangular_mut(&mut DVectorViewMut::from_slice(b, n));
}

/// Strided view of a dense matrix: element `(r, c)` lives at
/// `data[r * rs + c * cs]`.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = beta·c + a·b` with `c` row-major `a.rows × b.cols`.
pub fn gemm(a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(c.len(), a.rows * b.cols, "output size");
    a.check();
    b.check();
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: bounds of all three views were checked above and `c` is a
    // unique borrow that does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_diagonal() {
        let (vals, vecs) = symmetric_eigen(&[1.0, 0.0, 0.0, 3.0], 2);
        assert_eq!(vals, vec![3.0, 1.0]);
        assert_eq!(vecs[0], vec![0.0, 1.0]);
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 2.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vals[k] * vecs[k][i] * vecs[k][j]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| vecs[i][k] * vecs[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_with_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = vec![0.0; 4];
        gemm(MatRef::row_major(&a, 2, 3), MatRef::row_major(&b, 3, 2), 0.0, &mut c);
        assert_eq!(c, vec![0.5, 7.0, 2.0, 16.0]);
        // a^T a, 3x3
        let mut d = vec![1.0; 9];
        gemm(MatRef::row_major(&a, 2, 3).t(), MatRef::row_major(&a, 2, 3), 1.0, &mut d);
        assert_eq!(d[0], 18.0);
        assert_eq!(d[5], 2.0 * 3.0 + 5.0 * 6.0 + 1.0);
    }

    #[test]
    fn cholesky_solves() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        assert_eq!(l, vec![2.0, 0.0, 1.0, 2.0_f64.sqrt()]);
        let mut b = [2.0, 1.0 + 2.0_f64.sqrt()];
        forward_substitute(&l, 2, &mut b);
        assert!((b[0] - 1.0).abs() < 1e-15 && (b[1] - 1.0).abs() < 1e-15);
        assert!(cholesky(&[1.0, 1.0, 1.0, 1.0], 2).is_none());
    }
}
