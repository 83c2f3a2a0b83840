//! The structured basis of a matrix algebra or fixed-length span: free
//! blocks, sectors, coefficients, the gauge removing removable off-diagonal
//! dependence, the structure-constants tensor, and the lower/upper tensor
//! decomposition with its block-injectivity certificate.

use std::collections::BTreeMap;

use ndarray::s;
use num_complex::Complex64 as C64;

use crate::block_structure::{BlockPartition, ClassLabel};
use crate::config::Config;
use crate::error::{MpsxError, Result};
use crate::matrix_sets::{generate_algebra, span_fixed_length, MatrixSet};
use crate::numerics::{
    cr, eye, frob_norm, inner, inverse, lstsq, max_norm, rank, unvec, vec_norm, vec_of, CMat, CVec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisMode {
    Algebra,
    Span(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    /// A diagonal equivalence class.
    Inf(usize),
    /// An off-diagonal free block, numbered in creation order.
    Free(usize),
}

/// One basis label together with its sector and content shape.
#[derive(Debug, Clone)]
pub struct Label {
    pub kind: LabelKind,
    /// Diagonal classes of the row and column blocks the label lives in.
    pub sector: (ClassLabel, ClassLabel),
    /// First block carrying the label in the processing order.
    pub first_block: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// Length at which the block first became isolatable, when probed.
    pub m_len: Option<usize>,
}

impl Label {
    pub fn is_free(&self) -> bool {
        matches!(self.kind, LabelKind::Free(_))
    }

    pub fn content_dim(&self) -> usize {
        self.rows * self.cols
    }
}

/// The canonical basis of an algebra or span: for every label `e` the
/// coefficients `k[e][(i,j)]` such that the matrices assembled from an
/// arbitrary content in the label's blocks form a basis of the space.
#[derive(Debug, Clone)]
pub struct StructuredBasis {
    pub mode: BasisMode,
    pub partition: BlockPartition,
    pub labels: Vec<Label>,
    /// Coefficient table per label: block -> coefficient.
    pub k: Vec<BTreeMap<(usize, usize), C64>>,
    /// Diagonal label index per block (None for vanishing blocks).
    pub class_of_block: Vec<Option<usize>>,
    /// Off-diagonal gauge applied on top of the classified set.
    pub gauge: CMat,
    pub gauge_inv: CMat,
    /// Largest residual left by the off-diagonal solves.
    pub residual: f64,
}

impl StructuredBasis {
    pub fn n_inf(&self) -> usize {
        self.labels.iter().filter(|l| !l.is_free()).count()
    }

    pub fn n_free(&self) -> usize {
        self.labels.iter().filter(|l| l.is_free()).count()
    }

    /// Display name for a label: diagonal classes first, then free blocks.
    pub fn label_name(&self, e: usize) -> String {
        match self.labels[e].kind {
            LabelKind::Inf(c) => format!("{c}"),
            LabelKind::Free(f) => format!("{}", self.n_inf() + f),
        }
    }

    /// Lower-tensor matrices: the coefficient tables as b x b matrices.
    pub fn a_low(&self) -> Vec<CMat> {
        let b = self.partition.n_blocks();
        self.k
            .iter()
            .map(|table| {
                let mut m = CMat::zeros((b, b));
                for (&(i, j), &w) in table {
                    m[(i, j)] = w;
                }
                m
            })
            .collect()
    }

    /// The matrix carrying `content` in the blocks of label `e`.
    pub fn assemble(&self, e: usize, content: &CMat) -> CMat {
        let dim = self.partition.total_dim();
        let off = self.partition.offsets();
        let mut m = CMat::zeros((dim, dim));
        for (&(i, j), &w) in &self.k[e] {
            let mut view = m.slice_mut(s![
                off[i]..off[i] + self.partition.sizes[i],
                off[j]..off[j] + self.partition.sizes[j]
            ]);
            view.zip_mut_with(content, |x, &y| *x += w * y);
        }
        m
    }

    /// Orthogonality-free basis of the whole space: one matrix per label and
    /// content entry, in label-major order.
    pub fn basis_elements(&self) -> Vec<CMat> {
        let mut out = Vec::new();
        for (e, l) in self.labels.iter().enumerate() {
            for a in 0..l.rows {
                for b in 0..l.cols {
                    let mut content = CMat::zeros((l.rows, l.cols));
                    content[(a, b)] = cr(1.0);
                    out.push(self.assemble(e, &content));
                }
            }
        }
        out
    }

    /// Total content dimension over all labels.
    pub fn total_content_dim(&self) -> usize {
        self.labels.iter().map(|l| l.content_dim()).sum()
    }

    /// Solves for the per-label contents of a matrix living in the space.
    /// Returns one `rows x cols` matrix per label.
    pub fn contents_of(&self, m: &CMat, tol: f64) -> Result<Vec<CMat>> {
        let elems = self.basis_elements();
        let cols = elems.len();
        let dim2 = self.partition.total_dim() * self.partition.total_dim();
        let mut design = CMat::zeros((dim2, cols));
        for (j, el) in elems.iter().enumerate() {
            design.column_mut(j).assign(&vec_of(el));
        }
        let rhs = vec_of(m);
        let x = lstsq(&design, &rhs, tol)?;
        // residual check
        let mut recon = CVec::zeros(dim2);
        for (j, el) in elems.iter().enumerate() {
            let v = vec_of(el);
            recon.iter_mut().zip(v.iter()).for_each(|(a, b)| *a += x[j] * b);
        }
        let resid = vec_norm(&(&rhs - &recon));
        let scale = vec_norm(&rhs).max(1.0);
        if resid > tol * scale * 1e2 {
            return Err(MpsxError::InconsistentBasis(resid / scale));
        }
        let mut out = Vec::new();
        let mut at = 0usize;
        for l in &self.labels {
            let mut content = CMat::zeros((l.rows, l.cols));
            for a in 0..l.rows {
                for b in 0..l.cols {
                    content[(a, b)] = x[at];
                    at += 1;
                }
            }
            out.push(content);
        }
        Ok(out)
    }
}

/// Labels whose sector matches blocks `(i, j)` and that may carry nonzero
/// coefficients there.
fn allowed_regressors(
    labels: &[Label],
    ri: ClassLabel,
    rj: ClassLabel,
    mode: BasisMode,
) -> Vec<usize> {
    let mut out = Vec::new();
    for (e, l) in labels.iter().enumerate() {
        if l.sector != (ri, rj) {
            continue;
        }
        if !l.is_free() {
            // Diagonal labels contribute off-diagonally only in span mode
            // (Jordan-type structures cannot close into an algebra).
            if mode == BasisMode::Algebra {
                continue;
            }
            if ri != rj {
                continue;
            }
        }
        out.push(e);
    }
    out
}

/// Builds the structured basis of the algebra generated by the set (mode
/// `Algebra`) or of its fixed-length span (mode `Span(l)`).
///
/// The set must be block-upper-triangular with classified diagonal blocks
/// (see [`crate::block_structure`]); equivalent diagonal blocks must already
/// be exactly proportional to their representative. Returns the basis
/// together with the set rewritten in the final gauge.
pub fn build_structured_basis(
    set: &MatrixSet,
    part: &BlockPartition,
    mode: BasisMode,
    cfg: &Config,
) -> Result<(StructuredBasis, MatrixSet)> {
    let tol = part.effective_tol(cfg.tol);
    let dim = part.total_dim();
    let off = part.offsets();
    let b = part.n_blocks();

    // Space to be structured.
    let mut basis_mats: Vec<CMat> = match mode {
        BasisMode::Algebra => generate_algebra(set, tol)?.basis_mats(),
        BasisMode::Span(l) => span_fixed_length(set, l, tol)?.basis_mats(),
    };
    let scale = basis_mats.iter().map(max_norm).fold(0.0, f64::max).max(1e-300);

    // Diagonal labels. In algebra mode, set-level classes split further by
    // the value of the proportionality constant: members with equal
    // constants carry equal algebra contents, while members whose constants
    // differ are independent in the algebra.
    let mut labels: Vec<Label> = Vec::new();
    let mut k: Vec<BTreeMap<(usize, usize), C64>> = Vec::new();
    let mut class_of_block: Vec<Option<usize>> = vec![None; b];
    let mut rep_of_label: Vec<usize> = Vec::new();

    for j in 0..b {
        if part.classes[j].is_eps() {
            continue;
        }
        let mut assigned = None;
        for (e, &rep) in rep_of_label.iter().enumerate() {
            if part.classes[rep] != part.classes[j] {
                continue;
            }
            match mode {
                BasisMode::Algebra => {
                    if (part.mu[j] - part.mu[rep]).norm() <= tol * 10.0 {
                        assigned = Some(e);
                        break;
                    }
                }
                BasisMode::Span(_) => {
                    assigned = Some(e);
                    break;
                }
            }
        }
        match assigned {
            Some(e) => {
                class_of_block[j] = Some(e);
            }
            None => {
                let e = labels.len();
                labels.push(Label {
                    kind: LabelKind::Inf(e),
                    sector: (ClassLabel::Inf(e), ClassLabel::Inf(e)),
                    first_block: (j, j),
                    rows: part.sizes[j],
                    cols: part.sizes[j],
                    m_len: None,
                });
                k.push(BTreeMap::new());
                rep_of_label.push(j);
                class_of_block[j] = Some(e);
            }
        }
    }
    // Note: sector labels above are in terms of the refined classes.
    let refined_class = |j: usize| -> ClassLabel {
        match class_of_block[j] {
            Some(e) => ClassLabel::Inf(e),
            None => ClassLabel::Eps,
        }
    };

    // Diagonal coefficients: the ratio of each member block to its refined
    // representative, read off the basis.
    for j in 0..b {
        let Some(e) = class_of_block[j] else { continue };
        let rep = rep_of_label[e];
        if rep == j {
            k[e].insert((j, j), cr(1.0));
            continue;
        }
        let mut num = cr(0.0);
        let mut den = 0.0;
        for m in &basis_mats {
            let rr = vec_of(&part.block_of(m, rep, rep));
            let jj = vec_of(&part.block_of(m, j, j));
            num += inner(&rr, &jj);
            den += vec_norm(&rr).powi(2);
        }
        if den <= tol * tol {
            return Err(MpsxError::StructureUncertain {
                block_row: j,
                block_col: j,
                residual: 1.0,
            });
        }
        let ratio = num / cr(den);
        for m in &basis_mats {
            let rr = part.block_of(m, rep, rep);
            let jj = part.block_of(m, j, j);
            let resid = max_norm(&(&jj - &rr.mapv(|x| x * ratio)));
            if resid > tol * scale * 1e2 {
                return Err(MpsxError::StructureUncertain {
                    block_row: j,
                    block_col: j,
                    residual: resid / scale,
                });
            }
        }
        k[e].insert((j, j), ratio);
    }

    // Content of each known label for each basis element, maintained along
    // the processing. Diagonal label content is the representative block.
    let content_of = |labels: &[Label],
                      k: &[BTreeMap<(usize, usize), C64>],
                      rep_of_label: &[usize],
                      basis_mats: &[CMat],
                      e: usize|
     -> Vec<CMat> {
        let l = &labels[e];
        match l.kind {
            LabelKind::Inf(_) => basis_mats
                .iter()
                .map(|m| part.block_of(m, rep_of_label[e], rep_of_label[e]))
                .collect(),
            LabelKind::Free(_) => {
                let (fi, fj) = l.first_block;
                // At its first block a free label has coefficient one and no
                // other label contributes.
                let _ = k;
                basis_mats.iter().map(|m| part.block_of(m, fi, fj)).collect()
            }
        }
    };

    let mut gauge = eye(dim);
    let mut worst_residual = 0.0f64;
    let mut n_free = 0usize;

    for (i, j) in part.offdiag_order() {
        let di = part.sizes[i];
        let dj = part.sizes[j];
        // Coefficient space of elements vanishing on all earlier blocks.
        let mut prec_rows = 0usize;
        let mut order_prec: Vec<(usize, usize)> = (0..b).map(|t| (t, t)).collect();
        for (pi, pj) in part.offdiag_order() {
            if (pj - pi, pi) < (j - i, i) {
                order_prec.push((pi, pj));
            }
        }
        for &(pi, pj) in &order_prec {
            prec_rows += part.sizes[pi] * part.sizes[pj];
        }
        let n_basis = basis_mats.len();
        let mut prec = CMat::zeros((prec_rows, n_basis));
        for (col, m) in basis_mats.iter().enumerate() {
            let mut at = 0usize;
            for &(pi, pj) in &order_prec {
                let blk = part.block_of(m, pi, pj);
                for v in vec_of(&blk).iter() {
                    prec[(at, col)] = *v;
                    at += 1;
                }
            }
        }
        let kernel = crate::numerics::nullspace(&prec, tol)?;
        // Isolatable content space at (i, j). The kernel coefficients are
        // unit vectors over a normalized basis, so content norms are judged
        // against scale one, not against their own (possibly tiny) size.
        let mut iso_vecs: Vec<CVec> = Vec::new();
        for coefs in &kernel {
            let mut m = CMat::zeros((di, dj));
            for (c, bm) in coefs.iter().zip(basis_mats.iter()) {
                let blk = part.block_of(bm, i, j);
                m.zip_mut_with(&blk, |x, &y| *x += c * y);
            }
            let v = vec_of(&m);
            if vec_norm(&v) > tol * 1e2 {
                iso_vecs.push(v);
            }
        }
        let iso_dim = if iso_vecs.is_empty() {
            0
        } else {
            crate::numerics::orthonormalize(&iso_vecs, tol)?.dim()
        };
        if iso_dim == di * dj {
            // Free block: new label; earlier labels carry no coefficient
            // here by normalization.
            labels.push(Label {
                kind: LabelKind::Free(n_free),
                sector: (refined_class(i), refined_class(j)),
                first_block: (i, j),
                rows: di,
                cols: dj,
                m_len: match mode {
                    BasisMode::Span(l) => Some(l),
                    BasisMode::Algebra => None,
                },
            });
            let mut table = BTreeMap::new();
            table.insert((i, j), cr(1.0));
            k.push(table);
            n_free += 1;
            continue;
        }
        if iso_dim > 0 {
            return Err(MpsxError::StructureUncertain {
                block_row: i,
                block_col: j,
                residual: iso_dim as f64 / (di * dj) as f64,
            });
        }

        // Dependent block: solve jointly for sector coefficients and the
        // removable gauge at (i, j):
        //   m_ij + P m_jj - m_ii P = sum_e k_e C_e(m)   for every basis m.
        let regressors = allowed_regressors(&labels, refined_class(i), refined_class(j), mode);
        let reg_contents: Vec<Vec<CMat>> = regressors
            .iter()
            .map(|&e| content_of(&labels, &k, &rep_of_label, &basis_mats, e))
            .collect();
        let n_unknowns = regressors.len() + di * dj;
        let rows = n_basis * di * dj;
        let mut a = CMat::zeros((rows, n_unknowns));
        let mut rhs = CVec::zeros(rows);
        for (mi, m) in basis_mats.iter().enumerate() {
            let mij = part.block_of(m, i, j);
            let mii = part.block_of(m, i, i);
            let mjj = part.block_of(m, j, j);
            let base = mi * di * dj;
            for (col, contents) in reg_contents.iter().enumerate() {
                let cvec = vec_of(&contents[mi]);
                for (r, v) in cvec.iter().enumerate() {
                    a[(base + r, col)] = *v;
                }
            }
            // gauge columns: coefficient of P_{ab} in (m_ii P - P m_jj)_{rs}
            // is m_ii[r,a] delta_{bs} - delta_{ra} m_jj[b,s]
            for pa in 0..di {
                for pb in 0..dj {
                    let col = regressors.len() + pa * dj + pb;
                    for r in 0..di {
                        for s_ in 0..dj {
                            let mut v = cr(0.0);
                            if s_ == pb {
                                v += mii[(r, pa)];
                            }
                            if r == pa {
                                v -= mjj[(pb, s_)];
                            }
                            a[(base + r * dj + s_, col)] = v;
                        }
                    }
                }
            }
            let mvec = vec_of(&mij);
            for (r, v) in mvec.iter().enumerate() {
                rhs[base + r] = *v;
            }
        }
        let x = lstsq(&a, &rhs, tol)?;
        // residual
        let mut recon = CVec::zeros(rows);
        for col in 0..n_unknowns {
            let column = a.column(col);
            recon
                .iter_mut()
                .zip(column.iter())
                .for_each(|(o, v)| *o += x[col] * v);
        }
        let resid = vec_norm(&(&rhs - &recon)) / scale;
        worst_residual = worst_residual.max(resid);
        if resid > tol * 1e2 {
            return Err(MpsxError::StructureUncertain {
                block_row: i,
                block_col: j,
                residual: resid,
            });
        }
        for (idx, &e) in regressors.iter().enumerate() {
            let kv = x[idx];
            if kv.norm() > tol * 1e2 {
                k[e].insert((i, j), kv);
            }
        }
        // Apply the gauge I + P at block (i, j) when significant.
        let mut p_tilde = CMat::zeros((di, dj));
        for pa in 0..di {
            for pb in 0..dj {
                p_tilde[(pa, pb)] = x[regressors.len() + pa * dj + pb];
            }
        }
        if max_norm(&p_tilde) > tol {
            let mut g = eye(dim);
            g.slice_mut(s![off[i]..off[i] + di, off[j]..off[j] + dj])
                .assign(&p_tilde);
            let g_inv = {
                let mut gi = eye(dim);
                gi.slice_mut(s![off[i]..off[i] + di, off[j]..off[j] + dj])
                    .assign(&p_tilde.mapv(|z| -z));
                gi
            };
            for m in basis_mats.iter_mut() {
                *m = g.dot(m).dot(&g_inv);
            }
            gauge = g.dot(&gauge);
        }
    }

    // Structural dimension accounting: the labeled contents must fill the
    // space exactly.
    let total: usize = labels.iter().map(|l| l.content_dim()).sum();
    if total != basis_mats.len() {
        return Err(MpsxError::StructureUncertain {
            block_row: 0,
            block_col: 0,
            residual: (total as f64 - basis_mats.len() as f64).abs(),
        });
    }

    let gauge_inv = inverse(&gauge, tol)?;
    let gauged_set = set.conjugated(&gauge, &gauge_inv);
    let sb = StructuredBasis {
        mode,
        partition: part.clone(),
        labels,
        k,
        class_of_block,
        gauge,
        gauge_inv,
        residual: worst_residual,
    };
    Ok((sb, gauged_set))
}

/// Checks the structural table for the basis coefficients; returns the worst
/// violation.
pub fn verify_table(sb: &StructuredBasis) -> f64 {
    let mut worst = 0.0f64;
    for (e, l) in sb.labels.iter().enumerate() {
        for (&(i, j), &w) in &sb.k[e] {
            match l.kind {
                LabelKind::Inf(_) => {
                    if i == j {
                        let expect_member = sb.class_of_block[i] == Some(e);
                        if !expect_member {
                            worst = worst.max(w.norm());
                        } else if sb.mode == BasisMode::Algebra {
                            // algebra: coefficients are exactly 0 or 1
                            worst = worst.max((w - cr(1.0)).norm().min(w.norm()));
                        }
                    } else {
                        // off-diagonal contributions allowed only in span
                        // mode within the label's own sector
                        if sb.mode == BasisMode::Algebra {
                            worst = worst.max(w.norm());
                        } else {
                            let ri = match sb.class_of_block[i] {
                                Some(c) => ClassLabel::Inf(c),
                                None => ClassLabel::Eps,
                            };
                            let rj = match sb.class_of_block[j] {
                                Some(c) => ClassLabel::Inf(c),
                                None => ClassLabel::Eps,
                            };
                            if i >= j || (ri, rj) != l.sector {
                                worst = worst.max(w.norm());
                            }
                        }
                    }
                }
                LabelKind::Free(_) => {
                    if i >= j {
                        worst = worst.max(w.norm());
                    } else {
                        let ri = match sb.class_of_block[i] {
                            Some(c) => ClassLabel::Inf(c),
                            None => ClassLabel::Eps,
                        };
                        let rj = match sb.class_of_block[j] {
                            Some(c) => ClassLabel::Inf(c),
                            None => ClassLabel::Eps,
                        };
                        if (ri, rj) != l.sector {
                            worst = worst.max(w.norm());
                        }
                    }
                }
            }
        }
    }
    worst
}

/// Structure constants of the lower-tensor algebra with respect to the basis
/// labels.
#[derive(Debug, Clone)]
pub struct GammaTensor {
    pub n: usize,
    /// entries[(i, j, k)] = Gamma^{ij}_k
    pub entries: BTreeMap<(usize, usize, usize), C64>,
}

impl GammaTensor {
    pub fn get(&self, i: usize, j: usize, k: usize) -> C64 {
        self.entries.get(&(i, j, k)).copied().unwrap_or(cr(0.0))
    }

    /// Max associativity violation over all index quadruples.
    pub fn associativity_residual(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                for kk in 0..n {
                    for l in 0..n {
                        let mut lhs = cr(0.0);
                        let mut rhs = cr(0.0);
                        for m in 0..n {
                            lhs += self.get(i, j, m) * self.get(m, kk, l);
                            rhs += self.get(j, kk, m) * self.get(i, m, l);
                        }
                        worst = worst.max((lhs - rhs).norm());
                    }
                }
            }
        }
        worst
    }

    /// Property P2: products of two free labels never produce a diagonal
    /// label.
    pub fn p2_residual(&self, sb: &StructuredBasis) -> f64 {
        let mut worst = 0.0f64;
        for (&(i, j, k), &w) in &self.entries {
            if sb.labels[i].is_free() && sb.labels[j].is_free() && !sb.labels[k].is_free() {
                worst = worst.max(w.norm());
            }
        }
        worst
    }

    /// Property P3: a nonzero entry requires chainable sectors.
    pub fn p3_residual(&self, sb: &StructuredBasis) -> f64 {
        let mut worst = 0.0f64;
        for (&(i, j, k), &w) in &self.entries {
            let (a1, a2) = sb.labels[i].sector;
            let (b1, b2) = sb.labels[j].sector;
            let (c1, c2) = sb.labels[k].sector;
            if a2 != b1 || c1 != a1 || c2 != b2 {
                worst = worst.max(w.norm());
            }
        }
        worst
    }

    /// Property P1: diagonal labels multiply as orthogonal idempotents.
    pub fn p1_residual(&self, sb: &StructuredBasis) -> f64 {
        let mut worst = 0.0f64;
        let n = self.n;
        for i in 0..n {
            if sb.labels[i].is_free() {
                continue;
            }
            for j in 0..n {
                if sb.labels[j].is_free() {
                    continue;
                }
                for k in 0..n {
                    let w = self.get(i, j, k);
                    let expect = if i == j && k == i { cr(1.0) } else { cr(0.0) };
                    worst = worst.max((w - expect).norm());
                }
            }
        }
        worst
    }
}

/// Solves for the structure constants of the lower-tensor algebra:
/// `A_low^i A_low^j = sum_k Gamma^{ij}_k A_low^k`.
pub fn gamma_tensor(sb: &StructuredBasis, cfg: &Config) -> Result<GammaTensor> {
    if !matches!(sb.mode, BasisMode::Algebra) {
        return Err(MpsxError::InvalidMode(
            "structure constants need an algebra-mode basis; use gamma_tensor_generalized for spans"
                .into(),
        ));
    }
    gamma_between(sb, sb, sb, cfg)
}

/// Generalized structure constants between the bases of two spans and the
/// span at the summed length; labels are matched by their first block.
pub fn gamma_tensor_generalized(
    sb1: &StructuredBasis,
    sb2: &StructuredBasis,
    sb12: &StructuredBasis,
    cfg: &Config,
) -> Result<GammaTensor> {
    match (sb1.mode, sb2.mode, sb12.mode) {
        (BasisMode::Span(l1), BasisMode::Span(l2), BasisMode::Span(l12)) if l1 + l2 == l12 => {}
        _ => {
            return Err(MpsxError::InvalidMode(
                "generalized structure constants need span bases at lengths l1, l2, l1+l2".into(),
            ))
        }
    }
    gamma_between(sb1, sb2, sb12, cfg)
}

fn gamma_between(
    sb1: &StructuredBasis,
    sb2: &StructuredBasis,
    sb12: &StructuredBasis,
    cfg: &Config,
) -> Result<GammaTensor> {
    // Labels are identified across bases by kind and first block; a label
    // absent from one basis simply has an all-zero coefficient table there.
    type Key = (bool, (usize, usize));
    let key = |l: &Label| -> Key { (l.is_free(), l.first_block) };
    let mut keys: Vec<Key> = sb12.labels.iter().map(key).collect();
    for l in sb1.labels.iter().chain(sb2.labels.iter()) {
        if !keys.contains(&key(l)) {
            keys.push(key(l));
        }
    }
    let n = keys.len();
    let b = sb12.partition.n_blocks();
    let lows = |sb: &StructuredBasis| -> Vec<CMat> {
        let own = sb.a_low();
        keys.iter()
            .map(|k| match sb.labels.iter().position(|l| key(l) == *k) {
                Some(e) => own[e].clone(),
                None => CMat::zeros((b, b)),
            })
            .collect()
    };
    let low1 = lows(sb1);
    let low2 = lows(sb2);
    let low12 = lows(sb12);
    let dim2 = b * b;
    let mut design = CMat::zeros((dim2, n));
    for (e, m) in low12.iter().enumerate() {
        design.column_mut(e).assign(&vec_of(m));
    }
    let mut entries = BTreeMap::new();
    let scale = low1.iter().map(frob_norm).fold(0.0, f64::max)
        * low2.iter().map(frob_norm).fold(0.0, f64::max);
    for i in 0..n {
        for j in 0..n {
            let prod = low1[i].dot(&low2[j]);
            let x = lstsq(&design, &vec_of(&prod), cfg.tol)?;
            let mut recon = CVec::zeros(dim2);
            for e in 0..n {
                let col = design.column(e);
                recon
                    .iter_mut()
                    .zip(col.iter())
                    .for_each(|(o, v)| *o += x[e] * v);
            }
            let resid = vec_norm(&(&vec_of(&prod) - &recon));
            if resid > cfg.tol * scale.max(1.0) * 1e2 {
                return Err(MpsxError::InvalidMode(format!(
                    "product of labels {i} and {j} leaves the span (residual {resid:.3e})"
                )));
            }
            for e in 0..n {
                if x[e].norm() > cfg.tol * 1e2 {
                    entries.insert((i, j, e), x[e]);
                }
            }
        }
    }
    Ok(GammaTensor { n, entries })
}

/// The lower/upper decomposition of a tensor over a structured basis.
#[derive(Debug, Clone)]
pub struct MatrixCf {
    pub basis: StructuredBasis,
    /// Upper-tensor contents indexed `[physical][label]`.
    pub a_up: Vec<Vec<CMat>>,
    /// Blocking length of the physical alphabet the decomposition was taken
    /// at (1 when the input set was used as given).
    pub block_len: usize,
    /// Worst reconstruction residual.
    pub residual: f64,
}

impl MatrixCf {
    pub fn a_low(&self) -> Vec<CMat> {
        self.basis.a_low()
    }

    /// Rebuilds the physical matrices from the decomposition.
    pub fn reconstruct(&self, x: usize) -> CMat {
        let mut m = CMat::zeros((
            self.basis.partition.total_dim(),
            self.basis.partition.total_dim(),
        ));
        for (e, content) in self.a_up[x].iter().enumerate() {
            m = m + self.basis.assemble(e, content);
        }
        m
    }

    /// Rebuilds the full tensor with one label's contents zeroed.
    pub fn reconstruct_without(&self, zeroed: usize) -> Vec<CMat> {
        (0..self.a_up.len())
            .map(|x| {
                let mut m = CMat::zeros((
                    self.basis.partition.total_dim(),
                    self.basis.partition.total_dim(),
                ));
                for (e, content) in self.a_up[x].iter().enumerate() {
                    if e != zeroed {
                        m = m + self.basis.assemble(e, content);
                    }
                }
                m
            })
            .collect()
    }
}

/// Decomposes the (already gauged) set over the structured basis.
pub fn matrix_cf(set: &MatrixSet, sb: &StructuredBasis, cfg: &Config) -> Result<MatrixCf> {
    let mut a_up = Vec::with_capacity(set.d);
    let mut worst = 0.0f64;
    for x in 0..set.d {
        let contents = sb.contents_of(&set.mats[x], cfg.tol)?;
        a_up.push(contents);
    }
    // reconstruction check
    let cf = MatrixCf {
        basis: sb.clone(),
        a_up,
        block_len: 1,
        residual: 0.0,
    };
    let scale = set.mats.iter().map(max_norm).fold(0.0, f64::max).max(1e-300);
    for x in 0..set.d {
        let resid = max_norm(&(&cf.reconstruct(x) - &set.mats[x])) / scale;
        worst = worst.max(resid);
    }
    if worst > cfg.tol * 1e3 {
        return Err(MpsxError::InconsistentBasis(worst));
    }
    Ok(MatrixCf {
        residual: worst,
        ..cf
    })
}

/// Contents of every label for each length-`len` physical word, stacked as a
/// `(d^len) x (total content dim)` matrix.
fn content_map(set: &MatrixSet, sb: &StructuredBasis, len: usize, cfg: &Config) -> Result<CMat> {
    let words = set.d.checked_pow(len as u32).unwrap_or(usize::MAX);
    if words > cfg.cap_phys {
        return Err(MpsxError::CapExceeded {
            what: "block-injectivity probe",
            needed: words,
            cap: cfg.cap_phys,
        });
    }
    let total = sb.total_content_dim();
    let mut m = CMat::zeros((words, total));
    let mut letters = vec![0usize; len];
    for w in 0..words {
        let mut idx = w;
        for k in (0..len).rev() {
            letters[k] = idx % set.d;
            idx /= set.d;
        }
        let prod = set.word(&letters);
        let contents = sb.contents_of(&prod, cfg.tol)?;
        let mut at = 0usize;
        for content in &contents {
            for v in vec_of(content).iter() {
                m[(w, at)] = *v;
                at += 1;
            }
        }
    }
    Ok(m)
}

/// Smallest blocking length at which the upper tensor separates every label
/// content on the physical leg, within the probed cap.
pub fn block_injectivity_length(
    set: &MatrixSet,
    sb: &StructuredBasis,
    len_max: usize,
    cfg: &Config,
) -> Result<Option<usize>> {
    let total = sb.total_content_dim();
    for len in 1..=len_max {
        let words = match set.d.checked_pow(len as u32) {
            Some(w) if w <= cfg.cap_phys => w,
            _ => return Ok(None),
        };
        if words < total {
            continue;
        }
        let m = content_map(set, sb, len, cfg)?;
        if rank(&m, cfg.tol)? == total {
            return Ok(Some(len));
        }
    }
    Ok(None)
}

/// Contracting the pseudo-inverse of the content map against itself must
/// produce exact deltas; returns the worst deviation, as a certificate for a
/// claimed injectivity length.
pub fn block_injectivity_certificate(
    set: &MatrixSet,
    sb: &StructuredBasis,
    len: usize,
    cfg: &Config,
) -> Result<f64> {
    let m = content_map(set, sb, len, cfg)?;
    let total = sb.total_content_dim();
    // Left inverse via least squares on each unit content.
    let mut worst = 0.0f64;
    for t in 0..total {
        let mut e = CVec::zeros(total);
        e[t] = cr(1.0);
        // solve m^H y = e  ->  y = (m^+)^H e ; then y^H m row = delta
        let x = lstsq(&m.t().mapv(|z| z.conj()).to_owned(), &e, cfg.tol)?;
        // contraction of the recovered functional against all contents
        for s_ in 0..total {
            let col = m.column(s_);
            let v: C64 = x.iter().zip(col.iter()).map(|(a, b)| a.conj() * b).sum();
            let expect = if s_ == t { cr(1.0) } else { cr(0.0) };
            worst = worst.max((v - expect).norm());
        }
    }
    Ok(worst)
}

/// First length at which each off-diagonal block becomes isolatable in the
/// fixed-length span, probed up to the configured cap.
pub fn isolatability_lengths(
    set: &MatrixSet,
    part: &BlockPartition,
    cfg: &Config,
) -> Result<BTreeMap<(usize, usize), Option<usize>>> {
    let mut out: BTreeMap<(usize, usize), Option<usize>> = BTreeMap::new();
    let pending: Vec<(usize, usize)> = part.offdiag_order();
    for &(i, j) in &pending {
        out.insert((i, j), None);
    }
    for len in 1..=cfg.len_probe_max {
        let span = span_fixed_length(set, len, cfg.tol)?;
        let mats = span.basis_mats();
        for &(i, j) in &pending {
            if out[&(i, j)].is_some() {
                continue;
            }
            let mut order_prec: Vec<(usize, usize)> =
                (0..part.n_blocks()).map(|t| (t, t)).collect();
            for (pi, pj) in part.offdiag_order() {
                if (pj - pi, pi) < (j - i, i) {
                    order_prec.push((pi, pj));
                }
            }
            let prec_rows: usize = order_prec
                .iter()
                .map(|&(pi, pj)| part.sizes[pi] * part.sizes[pj])
                .sum();
            let mut prec = CMat::zeros((prec_rows, mats.len()));
            for (col, m) in mats.iter().enumerate() {
                let mut at = 0usize;
                for &(pi, pj) in &order_prec {
                    for v in vec_of(&part.block_of(m, pi, pj)).iter() {
                        prec[(at, col)] = *v;
                        at += 1;
                    }
                }
            }
            let kernel = crate::numerics::nullspace(&prec, cfg.tol)?;
            let mut isolatable = false;
            for coefs in &kernel {
                let mut blk = CMat::zeros((part.sizes[i], part.sizes[j]));
                for (c, bm) in coefs.iter().zip(mats.iter()) {
                    blk.zip_mut_with(&part.block_of(bm, i, j), |x, &y| *x += c * y);
                }
                if max_norm(&blk) > cfg.tol * 1e2 {
                    isolatable = true;
                    break;
                }
            }
            if isolatable {
                out.insert((i, j), Some(len));
            }
        }
        if out.values().all(|v| v.is_some()) {
            break;
        }
    }
    Ok(out)
}

/// Assembles the basis element of label `e` with the entry-by-entry identity
/// content, handy for membership tests.
pub fn label_indicator(sb: &StructuredBasis, e: usize) -> CMat {
    let l = &sb.labels[e];
    sb.assemble(e, &unvec(&vec_of(&eye(l.rows.min(l.cols))), l.rows, l.cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_structure::{classify_diagonal, triangularize};
    use crate::test_util::mat;

    fn prepare(set: &MatrixSet, cfg: &Config) -> (BlockPartition, MatrixSet) {
        let (part, out) = triangularize(set, cfg).unwrap();
        classify_diagonal(&out, &part, cfg).unwrap()
    }

    fn wlike_algebra_basis() -> MatrixSet {
        // span { (A, B; 0, A) } generators for 1x1 blocks: identity and E12
        MatrixSet::new(vec![mat(2, &[1.0, 0.0, 0.0, 1.0]), mat(2, &[0.0, 1.0, 0.0, 0.0])]).unwrap()
    }

    #[test]
    fn wlike_structured_basis() {
        let cfg = Config::default();
        let set = wlike_algebra_basis();
        let (part, out) = prepare(&set, &cfg);
        let (sb, _) = build_structured_basis(&out, &part, BasisMode::Algebra, &cfg).unwrap();
        assert_eq!(sb.n_inf(), 1);
        assert_eq!(sb.n_free(), 1);
        let free = sb.labels.iter().position(|l| l.is_free()).unwrap();
        assert_eq!(sb.k[free].len(), 1);
        let (&(i, j), &w) = sb.k[free].iter().next().unwrap();
        assert!(i < j);
        assert!((w - cr(1.0)).norm() < 1e-9);
        assert!(verify_table(&sb) < 1e-9);
    }

    #[test]
    fn wlike_gamma_tensor() {
        let cfg = Config::default();
        let set = wlike_algebra_basis();
        let (part, out) = prepare(&set, &cfg);
        let (sb, _) = build_structured_basis(&out, &part, BasisMode::Algebra, &cfg).unwrap();
        let g = gamma_tensor(&sb, &cfg).unwrap();
        // diagonal label 0, free label 1
        assert!((g.get(0, 0, 0) - cr(1.0)).norm() < 1e-9);
        assert!((g.get(0, 1, 1) - cr(1.0)).norm() < 1e-9);
        assert!((g.get(1, 0, 1) - cr(1.0)).norm() < 1e-9);
        assert_eq!(g.entries.len(), 3);
        assert!(g.associativity_residual() < 1e-9);
    }

    #[test]
    fn trivial_full_algebra_gamma() {
        let cfg = Config::default();
        let set = MatrixSet::new(vec![
            mat(2, &[0.7, 0.2, 0.1, 0.5]),
            mat(2, &[0.1, 0.9, 0.4, 0.2]),
        ])
        .unwrap();
        let (part, out) = prepare(&set, &cfg);
        let (sb, _) = build_structured_basis(&out, &part, BasisMode::Algebra, &cfg).unwrap();
        assert_eq!(sb.labels.len(), 1);
        let g = gamma_tensor(&sb, &cfg).unwrap();
        assert!((g.get(0, 0, 0) - cr(1.0)).norm() < 1e-9);
        assert_eq!(g.entries.len(), 1);
    }

    #[test]
    fn cross_class_dependence_is_gauged_away() {
        // 4 scalar blocks with classes {1,2,3} and {4}; the (2,4) block
        // carries alpha (a - b), which a single off-diagonal gauge removes,
        // while (1,4) stays genuinely free.
        let cfg = Config::default();
        let alpha = 0.7;
        let g_a = {
            let mut m = mat(
                4,
                &[
                    1.0, 0.0, 0.0, 0.0, //
                    0.0, 1.0, 0.0, 0.0, //
                    0.0, 0.0, 1.0, 0.0, //
                    0.0, 0.0, 0.0, 0.0,
                ],
            );
            m[(1, 3)] = cr(alpha);
            m
        };
        let g_b = {
            let mut m = CMat::zeros((4, 4));
            m[(3, 3)] = cr(1.0);
            m[(1, 3)] = cr(-alpha);
            m
        };
        let g_c = {
            let mut m = CMat::zeros((4, 4));
            m[(0, 3)] = cr(1.0);
            m
        };
        let set = MatrixSet::new(vec![g_a, g_b, g_c]).unwrap();
        let (part, out) = prepare(&set, &cfg);
        let (sb, gauged) = build_structured_basis(&out, &part, BasisMode::Algebra, &cfg).unwrap();
        assert_eq!(sb.n_inf(), 2);
        assert_eq!(sb.n_free(), 1);
        assert!(verify_table(&sb) < 1e-9);
        // in the final gauge the dependent block vanished
        for m in &gauged.mats {
            let free_first = sb
                .labels
                .iter()
                .find(|l| l.is_free())
                .map(|l| l.first_block)
                .unwrap();
            for (i, j) in part.offdiag_order() {
                if (i, j) != free_first {
                    assert!(max_norm(&part.block_of(m, i, j)) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn commutator_dependence_is_gauged_away() {
        // algebra { (B, [B, P0]; 0, B) }: the off-diagonal block is pure
        // removable dependence; no free label appears.
        let cfg = Config::default();
        let p0 = mat(2, &[0.3, 0.8, -0.2, 0.5]);
        let mut gens = Vec::new();
        for a in 0..2 {
            for b in 0..2 {
                let mut unit = CMat::zeros((2, 2));
                unit[(a, b)] = cr(1.0);
                let comm = (unit.dot(&p0) - p0.dot(&unit)).to_owned();
                let mut g = CMat::zeros((4, 4));
                g.slice_mut(s![..2, ..2]).assign(&unit);
                g.slice_mut(s![..2, 2..]).assign(&comm);
                g.slice_mut(s![2.., 2..]).assign(&unit);
                gens.push(g);
            }
        }
        let set = MatrixSet::new(gens).unwrap();
        let (part, out) = prepare(&set, &cfg);
        let (sb, gauged) = build_structured_basis(&out, &part, BasisMode::Algebra, &cfg).unwrap();
        assert_eq!(sb.n_inf(), 1);
        assert_eq!(sb.n_free(), 0);
        for m in &gauged.mats {
            for (i, j) in part.offdiag_order() {
                assert!(max_norm(&part.block_of(m, i, j)) < 1e-8);
            }
        }
    }

    #[test]
    fn span_mode_jordan_coefficient() {
        let cfg = Config::default();
        let set = MatrixSet::new(vec![mat(2, &[1.0, 1.0, 0.0, 1.0])]).unwrap();
        let (part, out) = prepare(&set, &cfg);
        for l in 1..=4usize {
            let (sb, _) = build_structured_basis(&out, &part, BasisMode::Span(l), &cfg).unwrap();
            assert_eq!(sb.labels.len(), 1);
            let table = &sb.k[0];
            let w = table.get(&(0, 1)).copied().unwrap_or(cr(0.0));
            assert!(
                (w - cr(l as f64)).norm() < 1e-8,
                "jordan coefficient at length {l} was {w}"
            );
        }
    }

    #[test]
    fn span_mode_new_free_block_appears() {
        // B at (1,2) and (2,3), zero at (1,3): the (1,3) block becomes free
        // at length two.
        let cfg = Config::default();
        let id = mat(3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let n = mat(3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let set = MatrixSet::new(vec![id, n]).unwrap();
        let (part, out) = prepare(&set, &cfg);
        let (sb1, _) = build_structured_basis(&out, &part, BasisMode::Span(1), &cfg).unwrap();
        assert_eq!(sb1.n_free(), 1);
        let (sb2, _) = build_structured_basis(&out, &part, BasisMode::Span(2), &cfg).unwrap();
        assert_eq!(sb2.n_free(), 2);
        let new_label = sb2
            .labels
            .iter()
            .find(|l| l.is_free() && l.first_block == (0, 2))
            .expect("free block at (1,3)");
        assert_eq!(new_label.m_len, Some(2));
        let m = isolatability_lengths(&out, &part, &cfg).unwrap();
        assert_eq!(m[&(0, 2)], Some(2));
        assert_eq!(m[&(0, 1)], Some(1));
    }

    #[test]
    fn generalized_gamma_of_jordan_ladder() {
        // spans { (a, b, c; 0, a, l a + eta b; 0, 0, a) } at length l; the
        // generalized structure constants carry the lengths explicitly.
        let cfg = Config::default();
        let eta = 0.5f64;
        let g_a = {
            let mut m = eye(3);
            m[(1, 2)] = cr(1.0);
            m
        };
        let g_b = {
            let mut m = CMat::zeros((3, 3));
            m[(0, 1)] = cr(1.0);
            m[(1, 2)] = cr(eta);
            m
        };
        let g_c = {
            let mut m = CMat::zeros((3, 3));
            m[(0, 2)] = cr(1.0);
            m
        };
        let set = MatrixSet::new(vec![g_a, g_b, g_c]).unwrap();
        let (part, out) = prepare(&set, &cfg);
        let (sb1, _) = build_structured_basis(&out, &part, BasisMode::Span(1), &cfg).unwrap();
        let (sb2, _) = build_structured_basis(&out, &part, BasisMode::Span(2), &cfg).unwrap();
        let (sb3, _) = build_structured_basis(&out, &part, BasisMode::Span(3), &cfg).unwrap();
        // lengths show up in the diagonal-label coefficient at (2,3)
        assert!((sb1.k[0].get(&(1, 2)).copied().unwrap() - cr(1.0)).norm() < 1e-8);
        assert!((sb2.k[0].get(&(1, 2)).copied().unwrap() - cr(2.0)).norm() < 1e-8);
        let g = gamma_tensor_generalized(&sb1, &sb2, &sb3, &cfg).unwrap();
        // labels: 0 = diagonal class, 1 = free at (1,2), 2 = free at (1,3)
        assert!((g.get(0, 0, 0) - cr(1.0)).norm() < 1e-8);
        assert!((g.get(0, 1, 1) - cr(1.0)).norm() < 1e-8);
        assert!((g.get(1, 0, 1) - cr(1.0)).norm() < 1e-8);
        assert!((g.get(0, 2, 2) - cr(1.0)).norm() < 1e-8);
        assert!((g.get(2, 0, 2) - cr(1.0)).norm() < 1e-8);
        // Gamma^{{1},{0}}_{{2}} = l2 and Gamma^{{1},{1}}_{{2}} = eta
        assert!((g.get(1, 0, 2) - cr(2.0)).norm() < 1e-8);
        assert!((g.get(1, 1, 2) - cr(eta)).norm() < 1e-8);
    }

    #[test]
    fn matrix_cf_roundtrip_wlike() {
        let cfg = Config::default();
        // W-like with nontrivial contents: A^x = (B^x, C^x; 0, B^x), D_B = 2
        let b0 = mat(2, &[0.6, 0.1, 0.2, 0.4]);
        let b1 = mat(2, &[0.1, 0.7, 0.3, 0.2]);
        let c0 = mat(2, &[0.5, 0.2, 0.1, 0.9]);
        let c1 = mat(2, &[0.3, 0.3, 0.8, 0.1]);
        let assemble = |b: &CMat, c: &CMat| {
            let mut m = CMat::zeros((4, 4));
            m.slice_mut(s![..2, ..2]).assign(b);
            m.slice_mut(s![..2, 2..]).assign(c);
            m.slice_mut(s![2.., 2..]).assign(b);
            m
        };
        let set = MatrixSet::new(vec![assemble(&b0, &c0), assemble(&b1, &c1)]).unwrap();
        let (part, out) = prepare(&set, &cfg);
        let (sb, gauged) = build_structured_basis(&out, &part, BasisMode::Algebra, &cfg).unwrap();
        assert_eq!(sb.labels.len(), 2);
        let cf = matrix_cf(&gauged, &sb, &cfg).unwrap();
        assert!(cf.residual < 1e-9);
        for x in 0..2 {
            assert!(max_norm(&(&cf.reconstruct(x) - &gauged.mats[x])) < 1e-9);
        }
        // the upper tensor contents are the B and C blocks up to the class
        // alignment gauge
        let bi = block_injectivity_length(&gauged, &sb, 8, &cfg).unwrap();
        assert_eq!(bi, Some(3));
        let cert = block_injectivity_certificate(&gauged, &sb, 3, &cfg).unwrap();
        assert!(cert < 1e-7, "certificate deviation {cert:.3e}");
    }

    #[test]
    fn block_injectivity_of_matrix_units() {
        // d = 4 letters hitting all four 2x2 matrix units: injective at 1
        let cfg = Config::default();
        let set = MatrixSet::new(vec![
            mat(2, &[1.0, 0.0, 0.0, 0.0]),
            mat(2, &[0.0, 1.0, 0.0, 0.0]),
            mat(2, &[0.0, 0.0, 1.0, 0.0]),
            mat(2, &[0.0, 0.0, 0.0, 1.0]),
        ])
        .unwrap();
        let (part, out) = prepare(&set, &cfg);
        let (sb, gauged) = build_structured_basis(&out, &part, BasisMode::Algebra, &cfg).unwrap();
        assert_eq!(
            block_injectivity_length(&gauged, &sb, 4, &cfg).unwrap(),
            Some(1)
        );
    }

    #[test]
    fn dependent_contents_delay_injectivity() {
        // W-like with C = B: the content map is column-rank deficient at
        // every length (labels 0 and 1 carry identical physical data).
        let cfg = Config::default();
        let b0 = mat(2, &[0.6, 0.1, 0.2, 0.4]);
        let b1 = mat(2, &[0.1, 0.7, 0.3, 0.2]);
        let assemble = |b: &CMat| {
            let mut m = CMat::zeros((4, 4));
            m.slice_mut(s![..2, ..2]).assign(b);
            m.slice_mut(s![..2, 2..]).assign(b);
            m.slice_mut(s![2.., 2..]).assign(b);
            m
        };
        let set = MatrixSet::new(vec![assemble(&b0), assemble(&b1)]).unwrap();
        let (part, out) = prepare(&set, &cfg);
        let (sb, gauged) = build_structured_basis(&out, &part, BasisMode::Algebra, &cfg).unwrap();
        let bi = block_injectivity_length(&gauged, &sb, 5, &cfg).unwrap();
        assert_eq!(bi, None);
    }
}
