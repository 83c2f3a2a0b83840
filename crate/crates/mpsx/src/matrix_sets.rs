//! The MPS tensor as a finite set of square matrices, with its fixed-length
//! spans and the algebra it generates.

use crate::config::Config;
use crate::error::{MpsxError, Result};
use crate::numerics::{
    all_finite, cr, eye, orthonormalize, unvec, vec_of, CMat, CVec, VectorSpace,
};

/// A set of `d` complex matrices of size `dim x dim`, indexed by a physical
/// alphabet `0..d`.
#[derive(Debug, Clone)]
pub struct MatrixSet {
    pub d: usize,
    pub dim: usize,
    pub mats: Vec<CMat>,
}

impl MatrixSet {
    pub fn new(mats: Vec<CMat>) -> Result<Self> {
        let d = mats.len();
        if d == 0 {
            return Err(MpsxError::InvalidInput("empty matrix set".into()));
        }
        let dim = mats[0].nrows();
        if dim == 0 {
            return Err(MpsxError::InvalidInput("zero bond dimension".into()));
        }
        for m in &mats {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(MpsxError::DimensionMismatch(
                    "matrices of differing sizes".into(),
                ));
            }
            if !all_finite(m) {
                return Err(MpsxError::InvalidInput(
                    "matrix contains NaN or infinite entries".into(),
                ));
            }
        }
        Ok(MatrixSet { d, dim, mats })
    }

    /// Conjugates every matrix: A^i -> P A^i P^{-1}.
    pub fn conjugated(&self, p: &CMat, p_inv: &CMat) -> MatrixSet {
        let mats = self.mats.iter().map(|a| p.dot(a).dot(p_inv)).collect();
        MatrixSet {
            d: self.d,
            dim: self.dim,
            mats,
        }
    }

    /// Product of matrices along a physical word.
    pub fn word(&self, w: &[usize]) -> CMat {
        let mut m = eye(self.dim);
        for &i in w {
            m = m.dot(&self.mats[i]);
        }
        m
    }
}

/// The span of all length-`len` products, as a subspace of vectorized
/// matrices.
#[derive(Debug, Clone)]
pub struct MatSpan {
    pub dim: usize,
    pub len: usize,
    pub space: VectorSpace,
}

impl MatSpan {
    pub fn basis_mats(&self) -> Vec<CMat> {
        self.space
            .basis
            .iter()
            .map(|v| unvec(v, self.dim, self.dim))
            .collect()
    }
}

/// The algebra generated by a set, with the length at which the cumulative
/// union of spans closes.
#[derive(Debug, Clone)]
pub struct AlgebraRep {
    pub dim: usize,
    pub space: VectorSpace,
    pub r_alg: usize,
}

impl AlgebraRep {
    pub fn basis_mats(&self) -> Vec<CMat> {
        self.space
            .basis
            .iter()
            .map(|v| unvec(v, self.dim, self.dim))
            .collect()
    }
}

fn span_of_mats(mats: &[CMat], dim: usize, tol: f64) -> Result<VectorSpace> {
    let vecs: Vec<CVec> = mats.iter().map(vec_of).collect();
    if vecs.is_empty() {
        return Ok(VectorSpace::empty(dim * dim, tol));
    }
    orthonormalize(&vecs, tol)
}

/// Span of pairwise products of two bases.
fn product_span(a: &[CMat], b: &[CMat], dim: usize, tol: f64) -> Result<VectorSpace> {
    let mut prods = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            prods.push(x.dot(y));
        }
    }
    span_of_mats(&prods, dim, tol)
}

/// The length-`len` span, computed by span doubling over the binary
/// decomposition of `len` rather than enumerating d^len words.
pub fn span_fixed_length(s: &MatrixSet, len: usize, tol: f64) -> Result<MatSpan> {
    if len == 0 {
        return Err(MpsxError::InvalidInput("span length must be >= 1".into()));
    }
    // Power-of-two table up to the highest bit of len.
    let mut table: Vec<Vec<CMat>> = Vec::new();
    let base = span_of_mats(&s.mats, s.dim, tol)?;
    table.push(
        base.basis
            .iter()
            .map(|v| unvec(v, s.dim, s.dim))
            .collect(),
    );
    let bits = usize::BITS - len.leading_zeros();
    for k in 1..bits {
        let prev = &table[(k - 1) as usize];
        let next = product_span(prev, prev, s.dim, tol)?;
        table.push(
            next.basis
                .iter()
                .map(|v| unvec(v, s.dim, s.dim))
                .collect(),
        );
    }
    let mut acc: Option<Vec<CMat>> = None;
    for (k, entry) in table.iter().enumerate() {
        if (len >> k) & 1 == 1 {
            acc = Some(match acc {
                None => entry.clone(),
                Some(prev) => {
                    let sp = product_span(&prev, entry, s.dim, tol)?;
                    sp.basis.iter().map(|v| unvec(v, s.dim, s.dim)).collect()
                }
            });
        }
    }
    let mats = acc.expect("len >= 1 guarantees at least one bit");
    Ok(MatSpan {
        dim: s.dim,
        len,
        space: span_of_mats(&mats, s.dim, tol)?,
    })
}

/// The algebra generated by the set: cumulative spans of lengths `1..=n`
/// until the dimension is stationary for one step.
pub fn generate_algebra(s: &MatrixSet, tol: f64) -> Result<AlgebraRep> {
    let mut cum = span_of_mats(&s.mats, s.dim, tol)?;
    let mut r_alg = 1usize;
    loop {
        let basis: Vec<CMat> = cum.basis.iter().map(|v| unvec(v, s.dim, s.dim)).collect();
        let mut grew = false;
        let mut vecs: Vec<CVec> = cum.basis.clone();
        for m in &basis {
            for g in &s.mats {
                vecs.push(vec_of(&m.dot(g)));
            }
        }
        let next = orthonormalize(&vecs, tol)?;
        if next.dim() > cum.dim() {
            grew = true;
        }
        cum = next;
        if !grew {
            break;
        }
        r_alg += 1;
        if r_alg > s.dim * s.dim + 1 {
            // dim grows strictly each round, so this cannot trigger for
            // well-conditioned inputs
            return Err(MpsxError::InvalidInput(
                "algebra generation failed to close".into(),
            ));
        }
    }
    Ok(AlgebraRep {
        dim: s.dim,
        space: cum,
        r_alg,
    })
}

/// All length-`len` products, explicitly materialized as a `d^len`-letter set.
pub fn block_physical(s: &MatrixSet, len: usize, cfg: &Config) -> Result<MatrixSet> {
    if len == 0 {
        return Err(MpsxError::InvalidInput("blocking length must be >= 1".into()));
    }
    let needed = s.d.checked_pow(len as u32).unwrap_or(usize::MAX);
    if needed > cfg.cap_phys {
        return Err(MpsxError::CapExceeded {
            what: "physical blocking",
            needed,
            cap: cfg.cap_phys,
        });
    }
    if len == 1 {
        return Ok(s.clone());
    }
    let mut mats: Vec<CMat> = vec![eye(s.dim)];
    for _ in 0..len {
        let mut next = Vec::with_capacity(mats.len() * s.d);
        for m in &mats {
            for g in &s.mats {
                next.push(m.dot(g));
            }
        }
        mats = next;
    }
    MatrixSet::new(mats)
}

/// The identity with zeros on the diagonal blocks classified as vanishing.
/// `sizes` are the diagonal block sizes, `vanishing[j]` marks block `j`.
pub fn identity0(sizes: &[usize], vanishing: &[bool]) -> CMat {
    let dim: usize = sizes.iter().sum();
    let mut m = CMat::zeros((dim, dim));
    let mut off = 0usize;
    for (j, &sz) in sizes.iter().enumerate() {
        if !vanishing[j] {
            for k in 0..sz {
                m[(off + k, off + k)] = cr(1.0);
            }
        }
        off += sz;
    }
    m
}

/// Membership of the padded identity in the length-`len` span.
pub fn contains_identity0(s: &MatrixSet, len: usize, id0: &CMat, tol: f64) -> Result<bool> {
    let span = span_fixed_length(s, len, tol)?;
    span.space.contains(&vec_of(id0))
}
