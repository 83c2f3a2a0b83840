//! Stability of a matrix set under blocking: the span eventually coincides
//! with the generated algebra if and only if the proportionality constants
//! are roots of unity and the padded identity shows up in a bounded-length
//! span.

use crate::block_structure::{classify_diagonal, detect_period, triangularize, BlockPartition};
use crate::config::Config;
use crate::error::{MpsxError, Result};
use crate::matrix_sets::{
    block_physical, contains_identity0, generate_algebra, identity0, span_fixed_length, MatrixSet,
};
use crate::numerics::vec_of;
use num_complex::Complex64 as C64;

/// Why a set was found non-stable, or what prevented a decision.
#[derive(Debug, Clone, PartialEq)]
pub enum StabilityVerdict {
    Stable,
    /// A proportionality constant admits no finite root-of-unity order.
    NotStableQInfinite { mu: C64 },
    /// The padded identity never appeared in the probed spans, and a span
    /// escape witness confirms non-stability.
    NotStableIdentityAbsent { probed_len: usize },
    /// Caps were reached without either a certificate or a witness.
    Undecided { reason: String },
}

/// Theoretical bounds reported alongside the observed data. Values that
/// overflow are kept as formula strings.
#[derive(Debug, Clone)]
pub struct TheoreticalBounds {
    /// p * q * L_span * b * 2^b, the blocking after which stability is
    /// guaranteed to manifest.
    pub blocking: std::result::Result<u128, String>,
    /// Bound on the span-structure length.
    pub l_span: std::result::Result<u128, String>,
    /// Block-injectivity length bound D^2.
    pub l_bi: usize,
    /// Algebra length bound D^2.
    pub r_alg: usize,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub verdict: StabilityVerdict,
    pub partition: BlockPartition,
    pub p: usize,
    pub q: Option<usize>,
    pub r_alg: usize,
    pub algebra_dim: usize,
    /// Smallest length with the padded identity in the span of the blocked
    /// set, when found.
    pub id0_len: Option<usize>,
    /// Smallest probed multiple s with span(s * id0_len) equal to the
    /// algebra.
    pub l_stab_observed: Option<usize>,
    pub bounds: TheoreticalBounds,
}

impl StabilityReport {
    pub fn is_stable(&self) -> bool {
        matches!(self.verdict, StabilityVerdict::Stable)
    }
}

fn pow2_u128(e: usize) -> std::result::Result<u128, String> {
    if e >= 127 {
        Err(format!("2^{e}"))
    } else {
        Ok(1u128 << e)
    }
}

/// L_span bound from the span-structure theorem, assembled from the
/// per-block Wielandt bounds.
fn l_span_bound(sizes: &[usize]) -> std::result::Result<u128, String> {
    let b = sizes.len() as u128;
    let l0: u128 = sizes
        .iter()
        .map(|&d| {
            let d = d as f64;
            (2.0 * d * d * (6.0 + d.log2().max(0.0))).ceil() as u128
        })
        .max()
        .unwrap_or(1);
    let lbi = 3 * b.saturating_sub(1) * (l0 + 1);
    let exp = (b * (b - 1)) as usize;
    let two = pow2_u128(exp)?;
    let three_l = 3 * lbi + 2 * l0;
    three_l
        .checked_mul(two)
        .map(|v| v / 3)
        .ok_or_else(|| format!("(L_BI_diag + 2/3 L_0_diag) 2^{exp}"))
}

fn blocking_bound(
    p: usize,
    q: Option<usize>,
    sizes: &[usize],
) -> std::result::Result<u128, String> {
    let q = q.ok_or_else(|| "q = inf".to_string())?;
    let b = sizes.len();
    let l_span = l_span_bound(sizes)?;
    let two_b = pow2_u128(b)?;
    (p as u128)
        .checked_mul(q as u128)
        .and_then(|v| v.checked_mul(l_span))
        .and_then(|v| v.checked_mul(b as u128))
        .and_then(|v| v.checked_mul(two_b))
        .ok_or_else(|| format!("p q L_span b 2^{b} (overflow)"))
}

/// Runs the full stability pipeline: triangularize, remove periods, classify
/// constants, search for the padded identity, and verify span saturation.
pub fn check_stability(set: &MatrixSet, cfg: &Config) -> Result<StabilityReport> {
    let (part0, tri) = triangularize(set, cfg)?;
    let p = detect_period(&tri, &part0, cfg)?;

    // Work on the p-blocked set; blocking can split blocks further, so
    // re-triangularize before classifying.
    let (part_p, tri_p) = if p > 1 {
        let bp = block_physical(&tri, p, cfg)?;
        triangularize(&bp, cfg)?
    } else {
        (part0, tri)
    };
    let (mut part, aligned) = classify_diagonal(&tri_p, &part_p, cfg)?;
    part.p = p;
    let q = part.q;
    let tol = part.effective_tol(cfg.tol);

    let bounds = TheoreticalBounds {
        blocking: blocking_bound(p, q, &part.sizes),
        l_span: l_span_bound(&part.sizes),
        l_bi: set.dim * set.dim,
        r_alg: set.dim * set.dim,
    };

    let alg = generate_algebra(&aligned, tol)?;
    let r_alg = alg.r_alg;

    let Some(q_val) = q else {
        let offending = part
            .mu
            .iter()
            .max_by(|a, b| {
                let d = |m: &&C64| (*m - C64::new(1.0, 0.0)).norm();
                d(a).partial_cmp(&d(b)).unwrap()
            })
            .copied()
            .unwrap_or(C64::new(1.0, 0.0));
        return Ok(StabilityReport {
            verdict: StabilityVerdict::NotStableQInfinite { mu: offending },
            partition: part,
            p,
            q,
            r_alg,
            algebra_dim: alg.space.dim(),
            id0_len: None,
            l_stab_observed: None,
            bounds,
        });
    };

    // Search the padded identity on the pq-blocked set.
    let work = if q_val > 1 {
        match block_physical(&aligned, q_val, cfg) {
            Ok(s) => s,
            Err(MpsxError::CapExceeded { .. }) => {
                return Ok(StabilityReport {
                    verdict: StabilityVerdict::Undecided {
                        reason: format!(
                            "blocking by q = {q_val} exceeds the physical materialization cap"
                        ),
                    },
                    partition: part,
                    p,
                    q,
                    r_alg,
                    algebra_dim: alg.space.dim(),
                    id0_len: None,
                    l_stab_observed: None,
                    bounds,
                });
            }
            Err(e) => return Err(e),
        }
    } else {
        aligned.clone()
    };
    let id0 = identity0(&part.sizes, &part.vanishing_flags());
    let b = part.n_blocks();
    let id0_cap = (8usize << b.min(16)).min(cfg.cap_len);
    let mut id0_len = None;
    for l in 1..=id0_cap {
        if contains_identity0(&work, l, &id0, tol)? {
            id0_len = Some(l);
            break;
        }
    }

    let Some(l0) = id0_len else {
        // Witness check: a non-stable set's spans escape each other, so a
        // span basis element of length n must leave the span at n + m.
        let mut escape = false;
        'outer: for n in 1..=3usize {
            let sp_n = span_fixed_length(&work, n, tol)?;
            for m in 1..=3usize {
                let sp_nm = span_fixed_length(&work, n + m, tol)?;
                for bm in sp_n.basis_mats() {
                    if !sp_nm.space.contains(&vec_of(&bm))? {
                        escape = true;
                        break 'outer;
                    }
                }
            }
        }
        let verdict = if escape {
            StabilityVerdict::NotStableIdentityAbsent { probed_len: id0_cap }
        } else {
            StabilityVerdict::Undecided {
                reason: format!(
                    "padded identity not found up to length {id0_cap}, but spans stay nested"
                ),
            }
        };
        return Ok(StabilityReport {
            verdict,
            partition: part,
            p,
            q,
            r_alg,
            algebra_dim: alg.space.dim(),
            id0_len: None,
            l_stab_observed: None,
            bounds,
        });
    };

    // Verification: spans at multiples of the found length must saturate
    // the algebra generated by the span basis at that length.
    let base_span = span_fixed_length(&work, l0, tol)?;
    let base_set = MatrixSet::new(base_span.basis_mats())?;
    let g = generate_algebra(&base_set, tol)?;
    let target = g.space.dim();
    let mut l_stab = None;
    let s_max = g.r_alg + 2;
    for s in 1..=s_max {
        let sp = span_fixed_length(&work, s * l0, tol)?;
        if sp.space.dim() == target {
            let mut inside = true;
            for bm in sp.basis_mats() {
                if !g.space.contains(&vec_of(&bm))? {
                    inside = false;
                    break;
                }
            }
            if inside {
                l_stab = Some(s);
                break;
            }
        }
    }
    let verdict = match l_stab {
        Some(s) => {
            // persistence at two further multiples
            let mut ok = true;
            for extra in 1..=2usize {
                let sp = span_fixed_length(&work, (s + extra) * l0, tol)?;
                if sp.space.dim() != target {
                    ok = false;
                    break;
                }
            }
            if ok {
                StabilityVerdict::Stable
            } else {
                StabilityVerdict::Undecided {
                    reason: "span saturation did not persist at larger multiples".into(),
                }
            }
        }
        None => StabilityVerdict::Undecided {
            reason: format!(
                "padded identity found at {l0} but spans never matched the algebra up to s = {s_max}"
            ),
        },
    };
    Ok(StabilityReport {
        verdict,
        partition: part,
        p,
        q,
        r_alg,
        algebra_dim: alg.space.dim(),
        id0_len: Some(l0),
        l_stab_observed: l_stab,
        bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{irrational_phase_set, jordan_set, mat, w_tensor};

    #[test]
    fn w_tensor_is_stable() {
        let cfg = Config::default();
        let rep = check_stability(&w_tensor(), &cfg).unwrap();
        assert!(rep.is_stable());
        assert_eq!(rep.p, 1);
        assert_eq!(rep.q, Some(1));
        assert_eq!(rep.id0_len, Some(1));
        assert_eq!(rep.l_stab_observed, Some(1));
        assert_eq!(rep.algebra_dim, 2);
    }

    #[test]
    fn jordan_is_not_stable_by_identity_absence() {
        let cfg = Config::default();
        let rep = check_stability(&jordan_set(), &cfg).unwrap();
        match rep.verdict {
            StabilityVerdict::NotStableIdentityAbsent { probed_len } => {
                assert!(probed_len >= 8);
            }
            other => panic!("expected identity-absence witness, got {other:?}"),
        }
        assert_eq!(rep.q, Some(1));
    }

    #[test]
    fn irrational_phase_is_not_stable_by_q() {
        let cfg = Config::default();
        let rep = check_stability(&irrational_phase_set(), &cfg).unwrap();
        match rep.verdict {
            StabilityVerdict::NotStableQInfinite { mu } => {
                assert!((mu.norm() - 1.0).abs() < 1e-7);
            }
            other => panic!("expected q witness, got {other:?}"),
        }
    }

    #[test]
    fn quarter_phase_becomes_stable_after_blocking() {
        // diag(1, i): q = 4; the 4-blocked set is proportional to the
        // identity on both blocks
        let cfg = Config::default();
        let m = crate::numerics::CMat::from_shape_vec(
            (2, 2),
            vec![
                crate::numerics::cr(1.0),
                crate::numerics::cr(0.0),
                crate::numerics::cr(0.0),
                crate::numerics::c(0.0, 1.0),
            ],
        )
        .unwrap();
        let set = MatrixSet::new(vec![m]).unwrap();
        let rep = check_stability(&set, &cfg).unwrap();
        assert_eq!(rep.q, Some(4));
        assert!(rep.is_stable());
    }

    #[test]
    fn observed_lengths_respect_theoretical_bounds() {
        let cfg = Config::default();
        for set in [
            w_tensor(),
            crate::test_util::random_set(&mut crate::test_util::rng(42), 2, 3),
        ] {
            let rep = check_stability(&set, &cfg).unwrap();
            if rep.is_stable() {
                assert!(rep.r_alg <= rep.bounds.r_alg);
                if let (Some(l), Ok(bound)) = (rep.l_stab_observed, rep.bounds.blocking.clone()) {
                    assert!((l as u128) <= bound);
                }
            }
        }
    }

    #[test]
    fn ghz_tensor_is_stable() {
        let cfg = Config::default();
        let set = MatrixSet::new(vec![
            mat(2, &[1.0, 0.0, 0.0, 0.0]),
            mat(2, &[0.0, 0.0, 0.0, 1.0]),
        ])
        .unwrap();
        let rep = check_stability(&set, &cfg).unwrap();
        assert!(rep.is_stable());
        assert_eq!(rep.algebra_dim, 2);
    }

    #[test]
    fn antidiagonal_pair_stabilizes_after_period_blocking() {
        let cfg = Config::default();
        let set = MatrixSet::new(vec![
            mat(2, &[0.0, 1.0, 0.0, 0.0]),
            mat(2, &[0.0, 0.0, 1.0, 0.0]),
        ])
        .unwrap();
        let rep = check_stability(&set, &cfg).unwrap();
        assert_eq!(rep.p, 2);
        assert!(rep.is_stable());
    }
}
