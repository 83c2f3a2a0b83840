//! Tolerance-aware dense complex linear algebra shared by all modules.
//!
//! Matrices are `ndarray` arrays of `Complex64`. Whenever a matrix is fed to a
//! vector-space routine it is vectorized in row-major order; this convention
//! is fixed repo-wide. Every rank or membership decision is relative to the
//! largest singular value (or input norm) of the data involved.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, SVD};
use num_complex::Complex64 as C64;

use crate::error::{MpsxError, Result};

pub type CMat = Array2<C64>;
pub type CVec = Array1<C64>;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Row-major vectorization of a matrix.
pub fn vec_of(m: &CMat) -> CVec {
    CVec::from_iter(m.iter().cloned())
}

/// Inverse of [`vec_of`] for a `rows x cols` matrix.
pub fn unvec(v: &CVec, rows: usize, cols: usize) -> CMat {
    CMat::from_shape_vec((rows, cols), v.to_vec()).expect("length mismatch in unvec")
}

pub fn dagger(m: &CMat) -> CMat {
    m.t().mapv(|z| z.conj())
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = CMat::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

pub fn eye(n: usize) -> CMat {
    CMat::eye(n)
}

pub fn all_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn frob_norm(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn max_norm(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn vec_norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn inner(a: &CVec, b: &CVec) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Number of singular values above `tol` times the largest one (or above
/// `tol` itself when the matrix vanishes).
pub fn rank(m: &CMat, tol: f64) -> Result<usize> {
    if !all_finite(m) {
        return Err(MpsxError::InvalidInput(
            "matrix contains NaN or infinite entries".into(),
        ));
    }
    if m.is_empty() {
        return Ok(0);
    }
    let (_, s, _) = m.svd(false, false)?;
    let scale = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = tol * if scale > 0.0 { scale } else { 1.0 };
    Ok(s.iter().filter(|&&x| x > cutoff).count())
}

/// A subspace of `C^ambient` held as an orthonormal basis.
#[derive(Debug, Clone)]
pub struct VectorSpace {
    pub ambient: usize,
    pub basis: Vec<CVec>,
    pub tol: f64,
}

impl VectorSpace {
    pub fn empty(ambient: usize, tol: f64) -> Self {
        VectorSpace {
            ambient,
            basis: Vec::new(),
            tol,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Residual norm of `v` after projecting onto the space.
    pub fn residual(&self, v: &CVec) -> CVec {
        let mut r = v.clone();
        for b in &self.basis {
            let coef = inner(b, &r);
            r.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= coef * y);
        }
        r
    }

    /// Membership with residual relative to the norm of `v`.
    pub fn contains(&self, v: &CVec) -> Result<bool> {
        if v.len() != self.ambient {
            return Err(MpsxError::DimensionMismatch(format!(
                "vector of length {} against ambient dimension {}",
                v.len(),
                self.ambient
            )));
        }
        let n = vec_norm(v);
        if n == 0.0 {
            return Ok(true);
        }
        Ok(vec_norm(&self.residual(v)) <= self.tol * n)
    }

    /// Projection of `v` onto the space.
    pub fn project(&self, v: &CVec) -> CVec {
        let r = self.residual(v);
        v - &r
    }

    /// Extends the basis with `v` if its residual is significant relative to
    /// `scale`. Returns true when the dimension grew.
    pub fn extend(&mut self, v: &CVec, scale: f64) -> bool {
        let mut r = self.residual(v);
        // One re-orthogonalization pass keeps the basis orthonormal to
        // machine precision even for nearly dependent inputs.
        r = {
            let mut r2 = r.clone();
            for b in &self.basis {
                let coef = inner(b, &r);
                r2.iter_mut()
                    .zip(b.iter())
                    .for_each(|(x, y)| *x -= coef * y);
            }
            r2
        };
        let n = vec_norm(&r);
        if n > self.tol * scale.max(1e-300) {
            self.basis.push(r.mapv(|z| z / cr(n)));
            true
        } else {
            false
        }
    }

    /// Orthogonal complement within the ambient space.
    pub fn complement(&self) -> VectorSpace {
        let mut comp = VectorSpace::empty(self.ambient, self.tol);
        for k in 0..self.ambient {
            let mut e = CVec::zeros(self.ambient);
            e[k] = cr(1.0);
            let r = self.residual(&e);
            comp.extend(&r, 1.0);
            if comp.dim() + self.dim() == self.ambient {
                break;
            }
        }
        comp
    }

    /// Basis as the columns of a matrix.
    pub fn basis_matrix(&self) -> CMat {
        let mut m = CMat::zeros((self.ambient, self.dim()));
        for (j, b) in self.basis.iter().enumerate() {
            m.column_mut(j).assign(b);
        }
        m
    }
}

/// Orthonormal basis for the span of `vectors`, dropping anything whose
/// residual falls below `tol` times the largest input norm.
pub fn orthonormalize(vectors: &[CVec], tol: f64) -> Result<VectorSpace> {
    let ambient = match vectors.first() {
        Some(v) => v.len(),
        None => {
            return Err(MpsxError::InvalidInput(
                "cannot infer ambient dimension from an empty list".into(),
            ))
        }
    };
    if ambient == 0 {
        return Err(MpsxError::InvalidInput("ambient dimension is zero".into()));
    }
    if vectors.iter().any(|v| v.len() != ambient) {
        return Err(MpsxError::DimensionMismatch(
            "vectors of differing lengths".into(),
        ));
    }
    let scale = vectors.iter().map(vec_norm).fold(0.0, f64::max);
    let mut space = VectorSpace::empty(ambient, tol);
    for v in vectors {
        space.extend(v, scale);
    }
    Ok(space)
}

/// Basis of `a` intersected with `b`, via the nullspace of the stacked
/// orthogonal-complement projectors.
pub fn intersect(a: &VectorSpace, b: &VectorSpace) -> Result<VectorSpace> {
    if a.ambient != b.ambient {
        return Err(MpsxError::DimensionMismatch(format!(
            "ambient dimensions {} and {}",
            a.ambient, b.ambient
        )));
    }
    let n = a.ambient;
    let tol = a.tol.min(b.tol);
    // Rows of the stacked operator: (I - P_a) and (I - P_b) applied to each
    // basis vector of C^n, assembled columnwise.
    let mut stacked = CMat::zeros((2 * n, n));
    for k in 0..n {
        let mut e = CVec::zeros(n);
        e[k] = cr(1.0);
        let ra = a.residual(&e);
        let rb = b.residual(&e);
        for i in 0..n {
            stacked[(i, k)] = ra[i];
            stacked[(n + i, k)] = rb[i];
        }
    }
    let null = nullspace(&stacked, tol)?;
    Ok(VectorSpace {
        ambient: n,
        basis: null,
        tol,
    })
}

/// Orthonormal basis of the (right) nullspace of `m`.
pub fn nullspace(m: &CMat, tol: f64) -> Result<Vec<CVec>> {
    let (_, cols) = m.dim();
    if cols == 0 {
        return Ok(Vec::new());
    }
    let (_, s, vt) = m.svd(false, true)?;
    let vt = vt.expect("svd requested vt");
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = tol * if smax > 0.0 { smax } else { 1.0 };
    let mut basis = Vec::new();
    for (i, &sv) in s.iter().enumerate() {
        if sv <= cutoff {
            basis.push(vt.row(i).mapv(|z| z.conj()));
        }
    }
    for i in s.len()..cols {
        basis.push(vt.row(i).mapv(|z| z.conj()));
    }
    Ok(basis)
}

/// Minimum-norm least-squares solution of `a x = b` via SVD.
pub fn lstsq(a: &CMat, b: &CVec, tol: f64) -> Result<CVec> {
    let (rows, cols) = a.dim();
    if b.len() != rows {
        return Err(MpsxError::DimensionMismatch(
            "right-hand side length does not match".into(),
        ));
    }
    if cols == 0 {
        return Ok(CVec::zeros(0));
    }
    let (u, s, vt) = a.svd(true, true)?;
    let u = u.expect("svd requested u");
    let vt = vt.expect("svd requested vt");
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = tol * if smax > 0.0 { smax } else { 1.0 };
    let mut x = CVec::zeros(cols);
    for (i, &sv) in s.iter().enumerate() {
        if sv > cutoff {
            let ui = u.column(i);
            let coef: C64 = ui.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum();
            let coef = coef / cr(sv);
            for j in 0..cols {
                x[j] += vt[(i, j)].conj() * coef;
            }
        }
    }
    Ok(x)
}

/// Inverse through LU with a rank check first.
pub fn inverse(m: &CMat, tol: f64) -> Result<CMat> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(MpsxError::DimensionMismatch("inverse of a non-square matrix".into()));
    }
    if rank(m, tol)? < n {
        return Err(MpsxError::InvalidInput(
            "matrix is singular within tolerance".into(),
        ));
    }
    use ndarray_linalg::Inverse;
    Ok(m.inv()?)
}

/// Eigenvalues of a general complex matrix.
pub fn eigenvalues(m: &CMat) -> Result<CVec> {
    if m.is_empty() {
        return Ok(CVec::zeros(0));
    }
    let (vals, _) = m.eig()?;
    Ok(vals)
}

/// Largest eigenvalue in modulus together with a unit eigenvector.
pub fn top_eigenpair(m: &CMat) -> Result<(C64, CVec)> {
    let (vals, vecs) = m.eig()?;
    let mut best = 0usize;
    for i in 1..vals.len() {
        if vals[i].norm() > vals[best].norm() {
            best = i;
        }
    }
    let v = vecs.column(best).to_owned();
    let n = vec_norm(&v);
    Ok((vals[best], v.mapv(|z| z / cr(n))))
}

pub fn spectral_radius(m: &CMat) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v2(a: f64, b: f64) -> CVec {
        CVec::from_vec(vec![cr(a), cr(b)])
    }

    #[test]
    fn rank_identity_and_zero() {
        assert_eq!(rank(&eye(2), 1e-9).unwrap(), 2);
        assert_eq!(rank(&CMat::zeros((2, 2)), 1e-9).unwrap(), 0);
    }

    #[test]
    fn rank_of_rank_one_matrix() {
        // singular values {2, 0} by hand
        let m = CMat::from_shape_vec((2, 2), vec![cr(1.0); 4]).unwrap();
        assert_eq!(rank(&m, 1e-9).unwrap(), 1);
    }

    #[test]
    fn rank_rejects_non_finite() {
        let m = CMat::from_shape_vec((1, 1), vec![c(f64::NAN, 0.0)]).unwrap();
        assert!(rank(&m, 1e-9).is_err());
    }

    #[test]
    fn orthonormalize_standard_basis() {
        let s = orthonormalize(&[v2(1.0, 0.0), v2(0.0, 1.0)], 1e-9).unwrap();
        assert_eq!(s.dim(), 2);
    }

    #[test]
    fn orthonormalize_collinear() {
        let s = orthonormalize(&[v2(1.0, 0.0), v2(2.0, 0.0)], 1e-9).unwrap();
        assert_eq!(s.dim(), 1);
    }

    #[test]
    fn orthonormalize_dependent_triple() {
        let vs = [v2(1.0, 1.0), v2(1.0, -1.0), v2(1.0, 0.0)];
        let s = orthonormalize(&vs, 1e-9).unwrap();
        assert_eq!(s.dim(), 2);
    }

    #[test]
    fn contains_scaled_and_orthogonal() {
        let s = orthonormalize(&[v2(1.0, 0.0)], 1e-9).unwrap();
        assert!(s.contains(&v2(3.0, 0.0)).unwrap());
        assert!(!s.contains(&v2(0.0, 1.0)).unwrap());
    }

    #[test]
    fn contains_within_tolerance() {
        let s = orthonormalize(&[v2(1.0, 1.0)], 1e-9).unwrap();
        assert!(s.contains(&v2(1.0, 1.0 + 1e-12)).unwrap());
    }

    #[test]
    fn intersect_identical_and_orthogonal() {
        let a = orthonormalize(&[v2(1.0, 2.0)], 1e-9).unwrap();
        let same = intersect(&a, &a).unwrap();
        assert_eq!(same.dim(), 1);
        assert!(same.contains(&v2(1.0, 2.0)).unwrap());

        let x = orthonormalize(&[v2(1.0, 0.0)], 1e-9).unwrap();
        let y = orthonormalize(&[v2(0.0, 1.0)], 1e-9).unwrap();
        assert_eq!(intersect(&x, &y).unwrap().dim(), 0);
    }

    #[test]
    fn intersect_physical_subspace_case() {
        // span{e0, e1+e2} within span{e0, e1, e2} stays span{e0, e1+e2}
        let e = |k: usize| {
            let mut v = CVec::zeros(3);
            v[k] = cr(1.0);
            v
        };
        let mut e12 = CVec::zeros(3);
        e12[1] = cr(1.0);
        e12[2] = cr(1.0);
        let a = orthonormalize(&[e(0), e12.clone()], 1e-9).unwrap();
        let b = orthonormalize(&[e(0), e(1), e(2)], 1e-9).unwrap();
        let w = intersect(&a, &b).unwrap();
        assert_eq!(w.dim(), 2);
        assert!(w.contains(&e12).unwrap());
        assert!(w.contains(&e(0)).unwrap());
        assert!(!w.contains(&e(1)).unwrap());
    }

    #[test]
    fn lstsq_recovers_exact_solution() {
        let a = CMat::from_shape_vec((2, 2), vec![cr(2.0), cr(0.0), cr(0.0), cr(3.0)]).unwrap();
        let b = CVec::from_vec(vec![cr(4.0), cr(9.0)]);
        let x = lstsq(&a, &b, 1e-12).unwrap();
        assert!((x[0] - cr(2.0)).norm() < 1e-10);
        assert!((x[1] - cr(3.0)).norm() < 1e-10);
    }

    #[test]
    fn kron_and_vec_are_consistent() {
        // row-vec(X A) == row-vec(X) (I (x) A)
        let x = CMat::from_shape_vec((2, 2), vec![cr(1.0), cr(2.0), cr(3.0), cr(4.0)]).unwrap();
        let a = CMat::from_shape_vec((2, 2), vec![cr(0.0), cr(1.0), cr(1.0), cr(0.0)]).unwrap();
        let lhs = vec_of(&x.dot(&a));
        let t = kron(&eye(2), &a);
        let vx = vec_of(&x);
        let mut rhs = CVec::zeros(4);
        for j in 0..4 {
            for i in 0..4 {
                rhs[j] += vx[i] * t[(i, j)];
            }
        }
        assert!(vec_norm(&(&lhs - &rhs)) < 1e-12);
    }

    #[test]
    fn top_eigenpair_of_diagonal() {
        let m = CMat::from_shape_vec((2, 2), vec![cr(1.0), cr(0.0), cr(0.0), cr(-3.0)]).unwrap();
        let (val, vec) = top_eigenpair(&m).unwrap();
        assert!((val - cr(-3.0)).norm() < 1e-10);
        assert!(vec[1].norm() > 0.99);
    }
}
