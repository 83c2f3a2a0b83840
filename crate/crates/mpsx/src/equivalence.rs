//! Exact equivalence of state families through a weighted-automaton
//! embedding, plus the reductions used to compare canonical representations:
//! negligible blocks, physical subspaces, projector reduction, and the
//! stacked-tensor gauge relation.

use std::collections::BTreeMap;

use ndarray::s;
use num_complex::Complex64 as C64;

use crate::block_structure::{classify_diagonal, triangularize, ClassLabel};
use crate::canonical_basis::{
    build_structured_basis, matrix_cf, BasisMode, MatrixCf, StructuredBasis,
};
use crate::config::Config;
use crate::error::{MpsxError, Result};
use crate::matrix_sets::MatrixSet;
use crate::mpsx_states::MpsX;
use crate::numerics::{
    cr, eye, inner, kron, lstsq, orthonormalize, vec_norm, vec_of, CMat, CVec, VectorSpace,
};

/// A linear representation of the amplitude function: weight(w) equals the
/// amplitude of the word w in the family.
#[derive(Debug, Clone)]
pub struct Wfa {
    pub d: usize,
    pub n: usize,
    pub initial: CVec,
    pub transition: Vec<CMat>,
    pub final_vec: CVec,
}

impl Wfa {
    pub fn weight(&self, word: &[usize]) -> C64 {
        let mut v = self.initial.clone();
        for &i in word {
            let mut next = CVec::zeros(self.n);
            for col in 0..self.n {
                let mut acc = cr(0.0);
                for row in 0..self.n {
                    acc += v[row] * self.transition[i][(row, col)];
                }
                next[col] = acc;
            }
            v = next;
        }
        v.iter()
            .zip(self.final_vec.iter())
            .map(|(x, y)| x * y)
            .sum()
    }
}

/// Embeds the family: the automaton state is the vectorized running product
/// of the boundary with the site matrices, so the weight of a word is the
/// trace form of the family amplitude.
pub fn to_wfa(m: &MpsX) -> Wfa {
    let dd = m.dim();
    let n = dd * dd;
    let initial = vec_of(&m.boundary);
    let transition = m
        .tensor
        .mats
        .iter()
        .map(|a| kron(&eye(dd), a))
        .collect::<Vec<_>>();
    let mut final_vec = CVec::zeros(n);
    for k in 0..dd {
        final_vec[k * dd + k] = cr(1.0);
    }
    Wfa {
        d: m.d(),
        n,
        initial,
        transition,
        final_vec,
    }
}

/// Exact equality of the weight functions on all words of length >= 1,
/// decided by spanning the reachable space of the stacked difference
/// automaton and testing the final functional on it. The reachable space
/// closes after at most n_a + n_b extensions; no length cap is involved.
pub fn wfa_equal(a: &Wfa, b: &Wfa, cfg: &Config) -> Result<bool> {
    if a.d != b.d {
        return Err(MpsxError::DimensionMismatch(
            "alphabets of different size".into(),
        ));
    }
    let n = a.n + b.n;
    let apply = |v: &CVec, letter: usize| -> CVec {
        let mut out = CVec::zeros(n);
        for col in 0..a.n {
            let mut acc = cr(0.0);
            for row in 0..a.n {
                acc += v[row] * a.transition[letter][(row, col)];
            }
            out[col] = acc;
        }
        for col in 0..b.n {
            let mut acc = cr(0.0);
            for row in 0..b.n {
                acc += v[a.n + row] * b.transition[letter][(row, col)];
            }
            out[a.n + col] = acc;
        }
        out
    };
    let mut final_vec = CVec::zeros(n);
    for (k, x) in a.final_vec.iter().enumerate() {
        final_vec[k] = *x;
    }
    for (k, x) in b.final_vec.iter().enumerate() {
        final_vec[a.n + k] = *x;
    }
    let mut start = CVec::zeros(n);
    for (k, x) in a.initial.iter().enumerate() {
        start[k] = *x;
    }
    for (k, x) in b.initial.iter().enumerate() {
        start[a.n + k] = -*x;
    }
    let scale = vec_norm(&start).max(1e-300);
    let fscale = vec_norm(&final_vec).max(1.0);
    // families are indexed from one site: the reachable space starts at the
    // length-one images
    let mut space = VectorSpace::empty(n, cfg.tol);
    let mut frontier: Vec<CVec> = Vec::new();
    for letter in 0..a.d {
        let v = apply(&start, letter);
        if space.extend(&v, scale) {
            frontier.push(space.basis.last().unwrap().clone());
        }
    }
    while let Some(v) = frontier.pop() {
        for letter in 0..a.d {
            let next = apply(&v, letter);
            if space.extend(&next, scale) {
                frontier.push(space.basis.last().unwrap().clone());
            }
        }
    }
    for v in &space.basis {
        let overlap: C64 = v.iter().zip(final_vec.iter()).map(|(x, y)| x * y).sum();
        if overlap.norm() > cfg.tol * fscale * 1e2 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Equality of two families as states, for every size at once.
pub fn equivalent(a: &MpsX, b: &MpsX, cfg: &Config) -> Result<bool> {
    wfa_equal(&to_wfa(a), &to_wfa(b), cfg)
}

/// First word (ordered by length, then lexicographically) whose amplitudes
/// differ, probing up to `n_max` sites.
pub fn first_distinguishing_word(
    a: &MpsX,
    b: &MpsX,
    n_max: usize,
    cfg: &Config,
) -> Result<Option<Vec<usize>>> {
    if a.d() != b.d() {
        return Err(MpsxError::DimensionMismatch(
            "alphabets of different size".into(),
        ));
    }
    for n in 1..=n_max {
        if a.d().checked_pow(n as u32).unwrap_or(usize::MAX) > cfg.amp_cap {
            break;
        }
        let av = crate::mpsx_states::generate_state(a, n, cfg)?;
        let bv = crate::mpsx_states::generate_state(b, n, cfg)?;
        let scale = av
            .iter()
            .chain(bv.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max)
            .max(1e-300);
        for (w, (x, y)) in av.iter().zip(bv.iter()).enumerate() {
            if (x - y).norm() > cfg.tol * scale * 1e2 {
                let mut word = Vec::with_capacity(n);
                let mut idx = w;
                for _ in 0..n {
                    word.push(idx % a.d());
                    idx /= a.d();
                }
                word.reverse();
                return Ok(Some(word));
            }
        }
    }
    Ok(None)
}

/// Labels of the decomposition whose removal leaves the family unchanged.
pub fn negligible_blocks(m: &MpsX, cf: &MatrixCf, cfg: &Config) -> Result<Vec<usize>> {
    let reference = to_wfa(m);
    let mut out = Vec::new();
    for e in 0..cf.basis.labels.len() {
        let mats = cf.reconstruct_without(e);
        let candidate = MpsX::new(MatrixSet::new(mats)?, m.boundary.clone())?;
        if wfa_equal(&reference, &to_wfa(&candidate), cfg)? {
            out.push(e);
        }
    }
    Ok(out)
}

/// Span of the physical vectors reachable by closing the virtual legs with
/// an arbitrary matrix: the i-th component for a matrix Y is the trace of Y
/// against the i-th site matrix.
pub fn physical_subspace(s: &MatrixSet, tol: f64) -> Result<VectorSpace> {
    let mut vecs = Vec::with_capacity(s.dim * s.dim);
    for alpha in 0..s.dim {
        for beta in 0..s.dim {
            let v: CVec = (0..s.d).map(|i| s.mats[i][(beta, alpha)]).collect();
            vecs.push(v);
        }
    }
    orthonormalize(&vecs, tol)
}

/// Projects both tensors onto the intersection of their physical subspaces;
/// the outputs generate the same families and span one common subspace.
pub fn reduce_pair(a: &MpsX, b: &MpsX, cfg: &Config) -> Result<(MpsX, MpsX)> {
    if !equivalent(a, b, cfg)? {
        return Err(MpsxError::NotEquivalent);
    }
    let va = physical_subspace(&a.tensor, cfg.tol)?;
    let vb = physical_subspace(&b.tensor, cfg.tol)?;
    let w = crate::numerics::intersect(&va, &vb)?;
    let project = |m: &MpsX| -> Result<MpsX> {
        let d = m.d();
        let mut mats = Vec::with_capacity(d);
        for i in 0..d {
            let mut e = CVec::zeros(d);
            e[i] = cr(1.0);
            let p_row = w.project(&e);
            let mut acc = CMat::zeros((m.dim(), m.dim()));
            for (j, coef) in p_row.iter().enumerate() {
                // the projector is Hermitian: row entries conjugate the
                // column expansion
                acc = acc + m.tensor.mats[j].mapv(|v| v * coef.conj());
            }
            mats.push(acc);
        }
        MpsX::new(MatrixSet::new(mats)?, m.boundary.clone())
    };
    let ra = project(a)?;
    let rb = project(b)?;
    Ok((ra, rb))
}

/// The gauge relation between the decompositions of two equivalent families,
/// recovered from the stacked tensor.
#[derive(Debug, Clone)]
pub struct GaugeRelation {
    /// Label count of the stacked decomposition; the first family's labels
    /// lead it.
    pub stacked_labels: usize,
    /// Stacked run label matched to each run label of the second family.
    pub pi: Vec<usize>,
    /// Proportionality constant per matched run label.
    pub alpha: Vec<C64>,
    /// Gauge matrix per run label of the second family.
    pub z: Vec<CMat>,
    /// Columns express each label of the second family over the stacked
    /// labels after the class gauges are applied.
    pub p_b: CMat,
    pub residual: f64,
}

struct CfData {
    sb: StructuredBasis,
    cf: MatrixCf,
}

fn canonical_cf(set: &MatrixSet, mode: BasisMode, cfg: &Config) -> Result<CfData> {
    let (part0, tri) = triangularize(set, cfg)?;
    let (part, aligned) = classify_diagonal(&tri, &part0, cfg)?;
    let (sb, gauged) = build_structured_basis(&aligned, &part, mode, cfg)?;
    let cf = matrix_cf(&gauged, &sb, cfg)?;
    Ok(CfData { sb, cf })
}

/// Builds the stacked tensor of the two families, decomposes it, and solves
/// for the relation expressing the second family's upper contents over the
/// stacked ones, sector by sector.
pub fn stack_and_relate(a: &MpsX, b: &MpsX, cfg: &Config) -> Result<GaugeRelation> {
    // The relation lives in the span structure; blocking may be needed for
    // the spans to stabilize, so retry at growing lengths.
    let mut last = None;
    for blocking in [1usize, 2, 3, 4] {
        if a.d().checked_pow(blocking as u32).unwrap_or(usize::MAX) > cfg.cap_phys {
            break;
        }
        match stack_and_relate_at(a, b, blocking, cfg) {
            Ok(rel) => return Ok(rel),
            Err(e @ (MpsxError::StructureUncertain { .. } | MpsxError::RelationNotFound(..))) => {
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(MpsxError::RelationNotFound(
        "no blocking length could be probed".into(),
        1.0,
    )))
}

fn stack_and_relate_at(
    a: &MpsX,
    b: &MpsX,
    blocking: usize,
    cfg: &Config,
) -> Result<GaugeRelation> {
    if a.d() != b.d() {
        return Err(MpsxError::DimensionMismatch(
            "alphabets of different size".into(),
        ));
    }
    let set_a = crate::matrix_sets::block_physical(&a.tensor, blocking, cfg)?;
    let set_b = crate::matrix_sets::block_physical(&b.tensor, blocking, cfg)?;
    let d = set_a.d;
    let cf_b = canonical_cf(&set_b, BasisMode::Span(1), cfg)?;
    let n_stack = set_a.dim + set_b.dim;
    let mut mats = Vec::with_capacity(d);
    for i in 0..d {
        let mut m = CMat::zeros((n_stack, n_stack));
        m.slice_mut(s![..set_a.dim, ..set_a.dim])
            .assign(&set_a.mats[i]);
        m.slice_mut(s![set_a.dim.., set_a.dim..])
            .assign(&set_b.mats[i]);
        mats.push(m);
    }
    let stacked = MatrixSet::new(mats)?;
    let cf_c = canonical_cf(&stacked, BasisMode::Span(1), cfg)?;

    let sb_b = &cf_b.sb;
    let sb_c = &cf_c.sb;
    let tol = sb_c.partition.effective_tol(cfg.tol);

    // Run labels come first in both bases, indexed by their class number.
    let n_b_runs = sb_b.n_inf();
    let c_runs: Vec<usize> = (0..sb_c.labels.len())
        .filter(|&e| !sb_c.labels[e].is_free())
        .collect();
    let mut pi = Vec::with_capacity(n_b_runs);
    let mut alphas = Vec::with_capacity(n_b_runs);
    let mut zs: Vec<CMat> = Vec::with_capacity(n_b_runs);
    for eb in 0..n_b_runs {
        let b_contents: Vec<CMat> = (0..d).map(|x| cf_b.cf.a_up[x][eb].clone()).collect();
        let mut found = None;
        for &ec in &c_runs {
            if sb_c.labels[ec].rows != sb_b.labels[eb].rows {
                continue;
            }
            let c_contents: Vec<CMat> = (0..d).map(|x| cf_c.cf.a_up[x][ec].clone()).collect();
            if let Some((mu, z)) =
                crate::block_structure::match_blocks(&c_contents, &b_contents, tol)?
            {
                found = Some((ec, mu, z));
                break;
            }
        }
        let Some((ec, mu, z)) = found else {
            return Err(MpsxError::RelationNotFound(
                format!(
                    "no stacked run label matches label {}",
                    sb_b.label_name(eb)
                ),
                1.0,
            ));
        };
        pi.push(ec);
        alphas.push(mu);
        zs.push(z);
    }

    // Express every label of the second family over the gauge-conjugated
    // stacked contents in the mapped sector.
    let n_b = sb_b.labels.len();
    let n_c = sb_c.labels.len();
    let map_class = |cl: &ClassLabel| -> ClassLabel {
        match cl {
            ClassLabel::Inf(c) => match sb_c.labels[pi[*c]].kind {
                crate::canonical_basis::LabelKind::Inf(cc) => ClassLabel::Inf(cc),
                crate::canonical_basis::LabelKind::Free(_) => ClassLabel::Eps,
            },
            ClassLabel::Eps => ClassLabel::Eps,
        }
    };
    let gauge_of = |cl: &ClassLabel, size: usize| -> CMat {
        match cl {
            ClassLabel::Inf(c) => zs[*c].clone(),
            ClassLabel::Eps => eye(size),
        }
    };
    let mut p_b = CMat::zeros((n_c, n_b));
    let mut worst = 0.0f64;
    for (t, lb) in sb_b.labels.iter().enumerate() {
        let zl = gauge_of(&lb.sector.0, lb.rows);
        let zr = gauge_of(&lb.sector.1, lb.cols);
        let zr_inv = crate::numerics::inverse(&zr, tol)?;
        let target_sector = (map_class(&lb.sector.0), map_class(&lb.sector.1));
        let candidates: Vec<usize> = (0..n_c)
            .filter(|&u| {
                let lu = &sb_c.labels[u];
                lu.sector == target_sector && lu.rows == lb.rows && lu.cols == lb.cols
            })
            .collect();
        if candidates.is_empty() {
            return Err(MpsxError::RelationNotFound(
                format!("no stacked labels in the sector of {}", sb_b.label_name(t)),
                1.0,
            ));
        }
        let rows = d * lb.rows * lb.cols;
        let mut design = CMat::zeros((rows, candidates.len()));
        let mut rhs = CVec::zeros(rows);
        for x in 0..d {
            let target = &cf_b.cf.a_up[x][t];
            let base = x * lb.rows * lb.cols;
            for (v, val) in vec_of(target).iter().enumerate() {
                rhs[base + v] = *val;
            }
            for (col, &u) in candidates.iter().enumerate() {
                let conj = zl.dot(&cf_c.cf.a_up[x][u]).dot(&zr_inv);
                for (v, val) in vec_of(&conj).iter().enumerate() {
                    design[(base + v, col)] = *val;
                }
            }
        }
        let sol = lstsq(&design, &rhs, tol)?;
        let mut recon = CVec::zeros(rows);
        for (col, c) in sol.iter().enumerate() {
            let column = design.column(col);
            recon
                .iter_mut()
                .zip(column.iter())
                .for_each(|(o, v)| *o += c * v);
        }
        let scale = vec_norm(&rhs).max(1e-300);
        let resid = vec_norm(&(&rhs - &recon)) / scale;
        worst = worst.max(resid);
        if resid > tol * 1e3 {
            return Err(MpsxError::RelationNotFound(
                format!(
                    "label {} is not a combination of stacked labels in its sector",
                    sb_b.label_name(t)
                ),
                resid,
            ));
        }
        for (col, &u) in candidates.iter().enumerate() {
            if sol[col].norm() > tol * 1e2 {
                p_b[(u, t)] = sol[col];
            }
        }
    }
    Ok(GaugeRelation {
        stacked_labels: n_c,
        pi,
        alpha: alphas,
        z: zs,
        p_b,
        residual: worst,
    })
}

/// Verifies a defining-state relation between two extracted backbones: the
/// first family's amplitudes must equal the second's with every letter
/// expanded through the map. Returns the worst relative deviation.
pub fn verify_defining_relation(
    backbone_a: &crate::rls::AlgebraicRls,
    backbone_b: &crate::rls::AlgebraicRls,
    p_map: &BTreeMap<(String, String), C64>,
    n_max: usize,
) -> f64 {
    fn expand(
        word: &[String],
        k: usize,
        acc: C64,
        cur: &mut Vec<String>,
        p_map: &BTreeMap<(String, String), C64>,
        out: &mut BTreeMap<Vec<String>, C64>,
    ) {
        if k == word.len() {
            *out.entry(cur.clone()).or_insert(C64::new(0.0, 0.0)) += acc;
            return;
        }
        for ((to, from), coef) in p_map {
            if *from == word[k] {
                cur.push(to.clone());
                expand(word, k + 1, acc * coef, cur, p_map, out);
                cur.pop();
            }
        }
    }
    let mut worst = 0.0f64;
    for n in 1..=n_max {
        let amps_a = backbone_a.amplitudes(n);
        let amps_b = backbone_b.amplitudes(n);
        let mut mapped: BTreeMap<Vec<String>, C64> = BTreeMap::new();
        for (word, w) in &amps_b {
            expand(word, 0, *w, &mut Vec::new(), p_map, &mut mapped);
        }
        let scale = amps_a
            .values()
            .map(|w| w.norm())
            .fold(0.0, f64::max)
            .max(1e-300);
        let keys: std::collections::BTreeSet<_> =
            amps_a.keys().chain(mapped.keys()).cloned().collect();
        for k in keys {
            let x = amps_a.get(&k).copied().unwrap_or(cr(0.0));
            let y = mapped.get(&k).copied().unwrap_or(cr(0.0));
            worst = worst.max((x - y).norm() / scale);
        }
    }
    worst
}
