//! Dense double-precision linear algebra and numerical helpers.
//!
//! Prototype matrices are stored `d x n` with one identity per column, and
//! feature batches `d x N` with one sample per column. Storage is row-major.

use crate::parallel::Execution;
use crate::{Error, Result};

/// Cosines are clamped to this distance from +/-1 before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Matrix::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::Shape(format!(
                    "column {j} has length {}, expected {rows}",
                    c.len()
                )));
            }
            m.set_col(j, c);
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn column_norm(&self, j: usize) -> f64 {
        (0..self.rows)
            .map(|i| self[(i, j)] * self[(i, j)])
            .sum::<f64>()
            .sqrt()
    }

    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, indices.len());
        for (k, &j) in indices.iter().enumerate() {
            for i in 0..self.rows {
                out[(i, k)] = self[(i, j)];
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply ({}x{})^T by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn add_scaled(&mut self, other: &Matrix, alpha: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of two vectors, or `None` when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Mean of `|m[i][j]|` over `i != j`; 0 for matrices smaller than 2x2.
pub fn mean_off_diagonal_abs(m: &Matrix) -> f64 {
    let n = m.rows().min(m.cols());
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if i != j {
                sum += m[(i, j)].abs();
            }
        }
    }
    sum / (m.rows() * m.cols() - n) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedColumns {
    pub matrix: Matrix,
    /// Columns whose norm fell below epsilon; these are returned unchanged.
    pub flagged: Vec<usize>,
}

pub fn l2_normalize_columns(m: &Matrix, epsilon: f64) -> Result<NormalizedColumns> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("matrix to normalize".into()));
    }
    let mut out = m.clone();
    let mut flagged = Vec::new();
    for j in 0..m.cols() {
        let n = m.column_norm(j);
        if n < epsilon {
            flagged.push(j);
            continue;
        }
        for i in 0..m.rows() {
            out[(i, j)] /= n;
        }
    }
    Ok(NormalizedColumns {
        matrix: out,
        flagged,
    })
}

/// Unit-normalises every column, failing on the first zero column.
pub(crate) fn unit_columns(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let n = m.column_norm(j);
        if n == 0.0 || !n.is_finite() {
            return Err(if n.is_finite() {
                Error::ZeroColumn(j)
            } else {
                Error::NonFinite(format!("column {j}"))
            });
        }
        for i in 0..m.rows() {
            out[(i, j)] /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// `out[i][j]` is the cosine between column `i` of `a` and column `j` of `b`.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "cosine_matrix needs a shared dimension, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    let (an, _) = unit_columns(a)?;
    let (bn, _) = unit_columns(b).map_err(|e| match e {
        Error::ZeroColumn(j) => Error::InvalidArgument(format!("column {j} of b has zero norm")),
        other => other,
    })?;
    an.t_matmul(&bn)
}

pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or_else(|| Error::InvalidArgument("log_sum_exp of an empty vector".into()))?;
    if !max.is_finite() {
        return Err(Error::NonFinite("log_sum_exp input".into()));
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// as columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape(format!("eigen of non-square {:?}", a.shape())));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    Ok((values, v.select_columns(&order)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    /// `N x 2`, one projected point per row.
    pub coords: Matrix,
    /// Top two eigenvalues of the centred scatter matrix.
    pub eigenvalues: [f64; 2],
    /// Set when the scatter has fewer than two non-negligible eigenvalues.
    pub degenerate: bool,
}

/// Projects the rows of `points` onto their top two principal directions.
///
/// Each direction is signed so its largest-magnitude loading is positive.
pub fn pca_2d(points: &Matrix) -> Result<Projection2d> {
    let (n, dim) = points.shape();
    if n < 3 || dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "pca_2d needs >= 3 points of dimension >= 2, got {n} x {dim}"
        )));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("pca_2d input".into()));
    }
    let mut centred = points.clone();
    for j in 0..dim {
        let mean = (0..n).map(|i| points[(i, j)]).sum::<f64>() / n as f64;
        for i in 0..n {
            centred[(i, j)] -= mean;
        }
    }
    let scatter = centred.t_matmul(&centred)?;
    let (values, vectors) = symmetric_eigen(&scatter)?;
    let tol = 1e-12 * values[0].abs().max(1.0);
    let mut coords = Matrix::zeros(n, 2);
    let mut degenerate = false;
    for axis in 0..2 {
        if values[axis] <= tol {
            degenerate = true;
            continue;
        }
        let mut dir = vectors.col(axis);
        let lead = dir
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            dir.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..n {
            coords[(i, axis)] = dot(centred.row(i), &dir);
        }
    }
    if degenerate {
        log::warn!("pca_2d: scatter has fewer than two non-zero eigenvalues");
    }
    Ok(Projection2d {
        coords,
        eigenvalues: [values[0], values[1]],
        degenerate,
    })
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    finite_diff_grad_with(Execution::Sequential, f, x, h)
}

/// [`finite_diff_grad`] with the coordinates spread over `exec`.
pub fn finite_diff_grad_with<F>(exec: Execution, f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let partials = exec.map_range(x.len(), |i| {
        let mut probe = x.to_vec();
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        if plus.is_finite() && minus.is_finite() {
            Ok((plus - minus) / (2.0 * h))
        } else {
            Err(Error::NonFinite(format!(
                "function evaluation at coordinate {i}"
            )))
        }
    });
    partials.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let out = l2_normalize_columns(&m, 1e-12).unwrap();
        assert_eq!(out.matrix.data(), &[0.6, 0.8]);
        assert!(out.flagged.is_empty());
    }

    #[test]
    fn normalize_identity_and_random() {
        let id = Matrix::identity(4);
        assert_eq!(l2_normalize_columns(&id, 1e-12).unwrap().matrix, id);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 8, 5);
        let out = l2_normalize_columns(&m, 1e-12).unwrap().matrix;
        for j in 0..5 {
            assert!((out.column_norm(j) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_flags_tiny_and_rejects_nan() {
        let m = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1e-20, 0.0]).unwrap();
        let out = l2_normalize_columns(&m, 1e-9).unwrap();
        assert_eq!(out.flagged, vec![0]);
        assert_eq!(out.matrix.col(0), vec![0.0, 1e-20]);
        let bad = Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert!(l2_normalize_columns(&bad, 1e-9).is_err());
        assert!(l2_normalize_columns(&m, 0.0).is_err());
    }

    #[test]
    fn cosine_of_orthonormal_and_scaled_columns() {
        let id = Matrix::identity(3);
        assert_eq!(cosine_matrix(&id, &id).unwrap(), id);

        let a = Matrix::from_vec(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let mut b = a.clone();
        b.scale(7.0);
        assert!((cosine_matrix(&a, &b).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 16, 2);
        let b = random_matrix(&mut rng, 16, 2);
        let c = cosine_matrix(&a, &b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for k in 0..16 {
                    ab += a[(k, i)] * b[(k, j)];
                    aa += a[(k, i)] * a[(k, i)];
                    bb += b[(k, j)] * b[(k, j)];
                }
                assert!((c[(i, j)] - ab / (aa.sqrt() * bb.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_names_zero_column() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let err = cosine_matrix(&a, &Matrix::identity(2)).unwrap_err();
        assert!(err.to_string().contains("column 1"), "{err}");
        let err = cosine_matrix(&Matrix::identity(2), &a).unwrap_err();
        assert!(err.to_string().contains("column 1"), "{err}");
    }

    #[test]
    fn cosine_gram_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 6, 9);
        let c = cosine_matrix(&a, &a).unwrap();
        for i in 0..9 {
            assert!((c[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..9 {
                assert_eq!(c[(i, j)], c[(j, i)]);
                assert!(c[(i, j)].abs() <= 1.0 + 1e-12);
            }
        }
        let (values, _) = symmetric_eigen(&c).unwrap();
        assert!(values.iter().all(|&v| v >= -1e-9), "{values:?}");
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln());
        assert!(log_sum_exp(&[]).is_err());
        let big = log_sum_exp(&[1e4, -1e4, 0.0]).unwrap();
        assert!((big - 1e4).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn pca_preserves_planar_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = Matrix::zeros(12, 5);
        for i in 0..12 {
            pts[(i, 1)] = rng.random_range(-2.0..2.0);
            pts[(i, 3)] = rng.random_range(-1.0..1.0);
            pts[(i, 0)] = 0.7;
        }
        let proj = pca_2d(&pts).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let d_in = norm(
                    &pts.row(i)
                        .iter()
                        .zip(pts.row(j))
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>(),
                );
                let d_out = norm(&[
                    proj.coords[(i, 0)] - proj.coords[(j, 0)],
                    proj.coords[(i, 1)] - proj.coords[(j, 1)],
                ]);
                assert!((d_in - d_out).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_of_identical_points_is_origin() {
        let pts = Matrix::from_vec(4, 3, [1.0, 2.0, 3.0].repeat(4)).unwrap();
        let proj = pca_2d(&pts).unwrap();
        assert!(proj.degenerate);
        assert!(proj.coords.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pca_collinear_points_zero_second_axis() {
        let pts = Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let proj = pca_2d(&pts).unwrap();
        assert!(proj.degenerate);
        assert!((0..3).all(|i| proj.coords[(i, 1)] == 0.0));
        assert!(pca_2d(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v * v).sum(), &x, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 3.0 * xi * xi).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_diff_reports_bad_coordinate() {
        let err = finite_diff_grad(|x| if x[1] > 1.0 { f64::NAN } else { 0.0 }, &[0.0, 1.0], 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn finite_diff_converges_quadratically() {
        let x: [f64; 3] = [0.7, -1.3, 0.4];
        let f = |x: &[f64]| x.iter().map(|v| v.powi(4) + v.powi(3)).sum::<f64>();
        let exact: Vec<f64> = x.iter().map(|v| 4.0 * v.powi(3) + 3.0 * v * v).collect();
        let err = |h: f64| {
            let g = finite_diff_grad(f, &x, h).unwrap();
            g.iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(1e-4) / err(5e-5);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn parallel_and_sequential_fd_agree() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v.sin()).sum();
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let a = finite_diff_grad_with(Execution::Sequential, f, &x, 1e-5).unwrap();
        let b = finite_diff_grad_with(Execution::Parallel, f, &x, 1e-5).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            alpha in 0.01f64..100.0,
        ) {
            let a = Matrix::from_vec(4, 3, vals).unwrap();
            prop_assume!((0..3).all(|j| a.column_norm(j) > 1e-3));
            let mut scaled = a.clone();
            scaled.scale(alpha);
            let c1 = cosine_matrix(&a, &a).unwrap();
            let c2 = cosine_matrix(&scaled, &a).unwrap();
            for (x, y) in c1.data().iter().zip(c2.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn log_sum_exp_shift(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&v).unwrap() + c;
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
