//! Regular-language state families: a textual expression grammar, the
//! explicit state-family-to-MPS constructions, backbone extraction from a
//! small boundary and lower tensor, and coarse-graining invariance checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64 as C64;

use crate::canonical_basis::{GammaTensor, StructuredBasis};
use crate::config::Config;
use crate::error::{MpsxError, Result};
use crate::matrix_sets::MatrixSet;
use crate::mpsx_states::{generate_state, MpsX};
use crate::numerics::{cr, CMat};

pub type Sym = String;
/// Symbol of a run: a repeated-letter class, or the empty run.
pub type OSym = Option<Sym>;

fn osym_name(o: &OSym) -> String {
    match o {
        Some(s) => s.clone(),
        None => "_".into(),
    }
}

/// A state family given by runs of repeated symbols separated by bounded
/// letters, with size-independent weights per letter string.
#[derive(Debug, Clone, Default)]
pub struct AlgebraicRls {
    pub sigma_inf: Vec<Sym>,
    pub sigma_f: Vec<Sym>,
    /// Sector of each bounded letter: the runs it sits between.
    pub sectors: BTreeMap<Sym, (OSym, OSym)>,
    /// Weighted letter strings per run pattern; the key has one more entry
    /// than the string length.
    pub defining: BTreeMap<Vec<OSym>, BTreeMap<Vec<Sym>, C64>>,
}

impl AlgebraicRls {
    /// Full alphabet in canonical order: run symbols first, then letters.
    pub fn alphabet(&self) -> Vec<Sym> {
        let mut a = self.sigma_inf.clone();
        a.extend(self.sigma_f.iter().cloned());
        a
    }

    pub fn alphabet_size(&self) -> usize {
        self.sigma_inf.len() + self.sigma_f.len()
    }

    /// Largest letter count over the defining states.
    pub fn max_m(&self) -> usize {
        self.defining.keys().map(|o| o.len() - 1).max().unwrap_or(0)
    }

    pub fn add_weight(&mut self, o: Vec<OSym>, string: Vec<Sym>, w: C64) {
        let entry = self
            .defining
            .entry(o)
            .or_default()
            .entry(string)
            .or_insert(cr(0.0));
        *entry += w;
    }

    /// Drops negligible weights and empty defining states.
    pub fn prune(&mut self, tol: f64) {
        let scale = self
            .defining
            .values()
            .flat_map(|m| m.values())
            .map(|w| w.norm())
            .fold(0.0, f64::max)
            .max(1e-300);
        for m in self.defining.values_mut() {
            m.retain(|_, w| w.norm() > tol * scale);
        }
        self.defining.retain(|_, m| !m.is_empty());
    }

    /// Every weighted string must be consistent with the sector partition.
    pub fn validate(&self) -> Result<()> {
        for (o, strings) in &self.defining {
            if o.is_empty() {
                return Err(MpsxError::InvalidInput("empty run pattern".into()));
            }
            for run in o.iter().flatten() {
                if !self.sigma_inf.contains(run) {
                    return Err(MpsxError::InvalidInput(format!(
                        "run symbol {run} missing from the unbounded alphabet"
                    )));
                }
            }
            for s in strings.keys() {
                if s.len() + 1 != o.len() {
                    return Err(MpsxError::InvalidInput(
                        "string length does not match the run pattern".into(),
                    ));
                }
                for (k, letter) in s.iter().enumerate() {
                    let expect = (o[k].clone(), o[k + 1].clone());
                    match self.sectors.get(letter) {
                        Some(sec) if *sec == expect => {}
                        Some(sec) => {
                            return Err(MpsxError::SectorConflict {
                                symbol: letter.clone(),
                                first: format!("({},{})", osym_name(&sec.0), osym_name(&sec.1)),
                                second: format!(
                                    "({},{})",
                                    osym_name(&expect.0),
                                    osym_name(&expect.1)
                                ),
                            })
                        }
                        None => {
                            return Err(MpsxError::InvalidInput(format!(
                                "letter {letter} has no sector"
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Explicit amplitudes of the size-`n` member, keyed by symbol string.
    pub fn amplitudes(&self, n: usize) -> BTreeMap<Vec<Sym>, C64> {
        let mut out: BTreeMap<Vec<Sym>, C64> = BTreeMap::new();
        for (o, strings) in &self.defining {
            let m = o.len() - 1;
            if m > n {
                continue;
            }
            for (s, &w) in strings {
                // distribute n - m sites over the runs; empty runs stay empty
                let slots: Vec<usize> = (0..o.len()).filter(|&k| o[k].is_some()).collect();
                let free = n - m;
                if slots.is_empty() {
                    if free == 0 {
                        let word: Vec<Sym> = s.clone();
                        *out.entry(word).or_insert(cr(0.0)) += w;
                    }
                    continue;
                }
                // compositions of `free` into slots.len() nonnegative parts
                let mut comp = vec![0usize; slots.len()];
                comp[0] = free;
                loop {
                    let mut lens = vec![0usize; o.len()];
                    for (ci, &slot) in slots.iter().enumerate() {
                        lens[slot] = comp[ci];
                    }
                    let mut word: Vec<Sym> = Vec::with_capacity(n);
                    for k in 0..o.len() {
                        if let Some(run) = &o[k] {
                            for _ in 0..lens[k] {
                                word.push(run.clone());
                            }
                        }
                        if k < m {
                            word.push(s[k].clone());
                        }
                    }
                    *out.entry(word).or_insert(cr(0.0)) += w;
                    // next composition
                    let mut i = slots.len() - 1;
                    loop {
                        if i == 0 {
                            break;
                        }
                        if comp[i - 1] > 0 {
                            comp[i - 1] -= 1;
                            let moved: usize = comp[i..].iter().sum();
                            comp[i] = moved + 1;
                            for c in comp[i + 1..].iter_mut() {
                                *c = 0;
                            }
                            break;
                        }
                        i -= 1;
                    }
                    if i == 0 {
                        break;
                    }
                }
            }
        }
        out.retain(|_, w| w.norm() > 0.0);
        out
    }

    /// Renders the family in the expression grammar.
    pub fn pretty(&self) -> String {
        let mut terms = Vec::new();
        for (o, strings) in &self.defining {
            let m = o.len() - 1;
            if m == 0 {
                if let Some(w) = strings.get(&Vec::new()) {
                    let run = o[0].clone().expect("size-zero pattern needs a run");
                    terms.push(format!("{}|{run}*>", weight_prefix(*w)));
                }
                continue;
            }
            let mut pat = String::new();
            for (k, run) in o.iter().enumerate() {
                if k > 0 {
                    pat.push_str(" f ");
                }
                match run {
                    Some(r) => {
                        let _ = write!(pat, "{r}*");
                    }
                    None => pat.push_str("_*"),
                }
            }
            // interleave: pattern is run f run f ... run
            let mut kets = Vec::new();
            for (s, w) in strings {
                let body: String = s.join(" ");
                kets.push(format!("{}|{body}>", weight_prefix(*w)));
            }
            terms.push(format!("S{m}|{pat}>({})", kets.join(" + ")));
        }
        if terms.is_empty() {
            "0".into()
        } else {
            terms.join(" + ")
        }
    }
}

fn weight_prefix(w: C64) -> String {
    if (w - cr(1.0)).norm() < 1e-12 {
        return String::new();
    }
    format!("{}*", format_complex(w))
}

pub fn format_complex(w: C64) -> String {
    let fmt_f = |x: f64| {
        if (x - x.round()).abs() < 1e-12 && x.abs() < 1e15 {
            format!("{}", x.round() as i64)
        } else {
            format!("{x}")
        }
    };
    if w.im.abs() < 1e-12 {
        fmt_f(w.re)
    } else if w.re.abs() < 1e-12 {
        format!("{}i", fmt_f(w.im))
    } else if w.im < 0.0 {
        format!("{}-{}i", fmt_f(w.re), fmt_f(-w.im))
    } else {
        format!("{}+{}i", fmt_f(w.re), fmt_f(w.im))
    }
}

/// A state family whose weights follow exponential laws in the run lengths.
#[derive(Debug, Clone, Default)]
pub struct SpanRls {
    pub sigma_inf: Vec<Sym>,
    pub sigma_f: Vec<Sym>,
    /// Size-zero terms: per run symbol, the sum of alpha * lambda^N laws.
    pub m0: BTreeMap<Sym, Vec<(C64, C64)>>,
    /// Per (pattern, string): terms alpha_j with one lambda per run slot.
    /// Strings may also contain run symbols (as bounded occurrences).
    pub strings: BTreeMap<(Vec<OSym>, Vec<Sym>), Vec<(C64, Vec<C64>)>>,
}

impl SpanRls {
    /// An algebraic family is the constant-law special case.
    pub fn constant(r: &AlgebraicRls) -> SpanRls {
        let mut out = SpanRls {
            sigma_inf: r.sigma_inf.clone(),
            sigma_f: r.sigma_f.clone(),
            ..Default::default()
        };
        for (o, strings) in &r.defining {
            let m = o.len() - 1;
            for (s, &w) in strings {
                if m == 0 {
                    let run = o[0].clone().expect("size-zero pattern needs a run");
                    out.m0.entry(run).or_default().push((w, cr(1.0)));
                } else {
                    out.strings
                        .entry((o.clone(), s.clone()))
                        .or_default()
                        .push((w, vec![cr(1.0); o.len()]));
                }
            }
        }
        out
    }

    pub fn alphabet(&self) -> Vec<Sym> {
        let mut a = self.sigma_inf.clone();
        a.extend(self.sigma_f.iter().cloned());
        a
    }
}

// ---------------------------------------------------------------------------
// Expression parser

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn err<T>(&self, msg: &str) -> Result<T> {
        Err(MpsxError::ParseError {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(&format!("expected `{}`", c as char))
        }
    }

    fn number(&mut self) -> Option<f64> {
        let start = self.pos;
        let mut p = self.pos;
        if p < self.src.len() && (self.src[p] == b'-' || self.src[p] == b'+') {
            p += 1;
        }
        let digits_start = p;
        while p < self.src.len() && (self.src[p].is_ascii_digit() || self.src[p] == b'.') {
            p += 1;
        }
        if p == digits_start {
            return None;
        }
        if p < self.src.len() && (self.src[p] == b'e' || self.src[p] == b'E') {
            let mut q = p + 1;
            if q < self.src.len() && (self.src[q] == b'-' || self.src[q] == b'+') {
                q += 1;
            }
            let exp_start = q;
            while q < self.src.len() && self.src[q].is_ascii_digit() {
                q += 1;
            }
            if q > exp_start {
                p = q;
            }
        }
        let text = std::str::from_utf8(&self.src[start..p]).ok()?;
        let val = text.parse().ok()?;
        self.pos = p;
        Some(val)
    }

    /// `a`, `ai`, `a+bi`, `a-bi`, followed by `*`.
    fn try_weight(&mut self) -> Option<C64> {
        let save = self.pos;
        let re = self.number()?;
        let mut w = cr(re);
        if self.eat(b'i') {
            w = C64::new(0.0, re);
        } else if self.peek() == Some(b'+') || self.peek() == Some(b'-') {
            let save_mid = self.pos;
            if let Some(im) = self.number() {
                if self.eat(b'i') {
                    w = C64::new(re, im);
                } else {
                    self.pos = save_mid;
                }
            }
        }
        if self.eat(b'*') {
            Some(w)
        } else {
            self.pos = save;
            None
        }
    }

    fn symbol(&mut self) -> Result<Sym> {
        match self.peek() {
            Some(c) if c.is_ascii_alphanumeric() => {
                // multi-character identifiers start with a letter; digits are
                // single-character symbols
                if c.is_ascii_digit() {
                    self.pos += 1;
                    Ok((c as char).to_string())
                } else {
                    let start = self.pos;
                    while self
                        .peek()
                        .map(|c| c.is_ascii_alphanumeric() || c == b'_')
                        .unwrap_or(false)
                    {
                        self.pos += 1;
                    }
                    Ok(std::str::from_utf8(&self.src[start..self.pos])
                        .unwrap()
                        .to_string())
                }
            }
            _ => self.err("expected a symbol"),
        }
    }
}

#[derive(Debug, Clone)]
enum PatternToken {
    Run(OSym),
    Fixed(Sym),
    Free,
}

/// Parses the expression grammar into a family description.
pub fn parse_rls(text: &str) -> Result<AlgebraicRls> {
    let mut lx = Lexer::new(text);
    let mut rls = AlgebraicRls::default();
    let mut sector_claims: BTreeMap<Sym, (OSym, OSym)> = BTreeMap::new();
    let mut inf_syms: Vec<Sym> = Vec::new();
    let mut f_syms: Vec<Sym> = Vec::new();
    loop {
        lx.skip_ws();
        let weight = lx.try_weight().unwrap_or(cr(1.0));
        lx.skip_ws();
        let mut declared_m: Option<usize> = None;
        if lx.peek() == Some(b'S') {
            lx.pos += 1;
            let mut digits = String::new();
            while lx.peek().map(|c| c.is_ascii_digit()).unwrap_or(false) {
                digits.push(lx.src[lx.pos] as char);
                lx.pos += 1;
            }
            if !digits.is_empty() {
                declared_m = Some(digits.parse().unwrap());
            }
            lx.skip_ws();
        }
        lx.expect(b'|')?;
        let mut tokens: Vec<PatternToken> = Vec::new();
        loop {
            lx.skip_ws();
            match lx.peek() {
                Some(b'>') => {
                    lx.pos += 1;
                    break;
                }
                Some(b'_') => {
                    lx.pos += 1;
                    lx.expect(b'*')?;
                    tokens.push(PatternToken::Run(None));
                }
                Some(b'f')
                    if lx
                        .src
                        .get(lx.pos + 1)
                        .map(|c| !c.is_ascii_alphanumeric())
                        .unwrap_or(true) =>
                {
                    lx.pos += 1;
                    tokens.push(PatternToken::Free);
                }
                Some(c) if c.is_ascii_alphanumeric() => {
                    let sym = lx.symbol()?;
                    if lx.eat(b'*') {
                        tokens.push(PatternToken::Run(Some(sym)));
                    } else {
                        tokens.push(PatternToken::Fixed(sym));
                    }
                }
                _ => return lx.err("expected a pattern token or `>`"),
            }
        }
        // normalize: runs and letters must alternate; missing runs are empty
        let mut o: Vec<OSym> = Vec::new();
        let mut letters: Vec<Option<Sym>> = Vec::new(); // None = from ket sum
        let mut expecting_run = true;
        for t in tokens {
            match t {
                PatternToken::Run(r) => {
                    if !expecting_run {
                        o.push(r);
                    } else {
                        o.push(r);
                    }
                    expecting_run = false;
                }
                PatternToken::Free | PatternToken::Fixed(_) => {
                    if expecting_run {
                        o.push(None);
                    }
                    letters.push(match t {
                        PatternToken::Fixed(s) => Some(s),
                        _ => None,
                    });
                    expecting_run = true;
                }
            }
        }
        if expecting_run {
            o.push(None);
        }
        if o.len() != letters.len() + 1 {
            return lx.err("malformed run pattern");
        }
        let m = letters.len();
        let n_free = letters.iter().filter(|l| l.is_none()).count();
        if let Some(dm) = declared_m {
            if dm != n_free {
                return Err(MpsxError::ParseError {
                    pos: lx.pos,
                    msg: format!(
                        "substitution count {dm} does not match the {n_free} open letters"
                    ),
                });
            }
        }
        // optional ket sum
        let mut ketsum: Vec<(C64, Vec<Sym>)> = Vec::new();
        lx.skip_ws();
        if lx.eat(b'(') {
            loop {
                lx.skip_ws();
                let w = lx.try_weight().unwrap_or(cr(1.0));
                lx.skip_ws();
                lx.expect(b'|')?;
                let mut string = Vec::new();
                loop {
                    lx.skip_ws();
                    match lx.peek() {
                        Some(b'>') => {
                            lx.pos += 1;
                            break;
                        }
                        Some(c) if c.is_ascii_alphanumeric() => {
                            string.push(lx.symbol()?);
                        }
                        _ => return lx.err("expected a letter or `>`"),
                    }
                }
                if string.len() != n_free {
                    return Err(MpsxError::ParseError {
                        pos: lx.pos,
                        msg: format!(
                            "ket length {} does not match the {n_free} open letters",
                            string.len()
                        ),
                    });
                }
                ketsum.push((w, string));
                lx.skip_ws();
                if lx.eat(b')') {
                    break;
                }
                lx.expect(b'+')?;
            }
        } else if n_free > 0 {
            return Err(MpsxError::ParseError {
                pos: lx.pos,
                msg: "open letters need a ket sum".into(),
            });
        } else {
            ketsum.push((cr(1.0), Vec::new()));
        }
        // register runs
        for run in o.iter().flatten() {
            if !inf_syms.contains(run) {
                inf_syms.push(run.clone());
            }
        }
        // splice fixed letters with ket-sum letters, claim sectors
        for (kw, kstring) in ketsum {
            let mut string: Vec<Sym> = Vec::with_capacity(m);
            let mut kit = kstring.into_iter();
            for l in &letters {
                match l {
                    Some(s) => string.push(s.clone()),
                    None => string.push(kit.next().expect("length checked")),
                }
            }
            for (k, letter) in string.iter().enumerate() {
                let claim = (o[k].clone(), o[k + 1].clone());
                match sector_claims.get(letter) {
                    None => {
                        sector_claims.insert(letter.clone(), claim);
                        if !f_syms.contains(letter) {
                            f_syms.push(letter.clone());
                        }
                    }
                    Some(existing) if *existing == claim => {}
                    Some(existing) => {
                        return Err(MpsxError::SectorConflict {
                            symbol: letter.clone(),
                            first: format!(
                                "({},{})",
                                osym_name(&existing.0),
                                osym_name(&existing.1)
                            ),
                            second: format!("({},{})", osym_name(&claim.0), osym_name(&claim.1)),
                        })
                    }
                }
            }
            rls.add_weight(o.clone(), string, weight * kw);
        }
        lx.skip_ws();
        if !lx.eat(b'+') {
            break;
        }
    }
    lx.skip_ws();
    if lx.pos != lx.src.len() {
        return lx.err("trailing input");
    }
    // letters used both as runs and as bounded symbols are contradictory
    for s in &f_syms {
        if inf_syms.contains(s) {
            return Err(MpsxError::SectorConflict {
                symbol: s.clone(),
                first: "unbounded run".into(),
                second: "bounded letter".into(),
            });
        }
    }
    inf_syms.sort();
    f_syms.sort();
    rls.sigma_inf = inf_syms;
    rls.sigma_f = f_syms;
    rls.sectors = sector_claims;
    rls.validate()?;
    Ok(rls)
}

// ---------------------------------------------------------------------------
// Explicit constructions

/// Theoretical bond bound for the algebraic construction.
pub fn algebraic_bond_bound(n_inf: usize, n_f: usize, m: usize) -> usize {
    n_inf
        + if n_f <= 1 {
            m * (m + 3) / 2
        } else {
            (m + 1) * n_f.pow((m + 1) as u32)
        }
}

/// Theoretical bond bound for the exponential-law construction.
pub fn span_bond_bound(n_inf: usize, n_sigma: usize, m: usize, k: usize) -> usize {
    k * n_inf
        + if n_sigma <= 1 {
            m * (m + 3) * k / 2
        } else {
            (m + 1) * k * n_sigma.pow((m + 1) as u32)
        }
}

/// Builds the block-diagonal MPS-X representation: one block per weighted
/// letter string, plus a diagonal block for the size-zero terms when any
/// carry weight.
pub fn rls_to_mpsx(r: &AlgebraicRls) -> Result<MpsX> {
    r.validate()?;
    let alphabet = r.alphabet();
    let d = alphabet.len();
    if d == 0 {
        return Err(MpsxError::InvalidInput("empty alphabet".into()));
    }
    let index = |s: &Sym| alphabet.iter().position(|t| t == s).unwrap();
    struct Block {
        size: usize,
        mats: Vec<Vec<(usize, usize, C64)>>,
        x: Vec<(usize, usize, C64)>,
    }
    let mut blocks: Vec<Block> = Vec::new();

    // size-zero terms share one diagonal block over the run symbols
    let m0: Vec<(usize, C64)> = r
        .defining
        .iter()
        .filter(|(o, _)| o.len() == 1)
        .filter_map(|(o, strings)| {
            let w = strings.get(&Vec::new()).copied().unwrap_or(cr(0.0));
            o[0].as_ref().map(|run| {
                (
                    r.sigma_inf.iter().position(|t| t == run).unwrap(),
                    w,
                )
            })
        })
        .filter(|(_, w)| w.norm() > 0.0)
        .collect();
    if !m0.is_empty() {
        let size = r.sigma_inf.len();
        let mut mats = vec![Vec::new(); d];
        for (k, run) in r.sigma_inf.iter().enumerate() {
            mats[index(run)].push((k, k, cr(1.0)));
        }
        let x = m0.iter().map(|&(k, w)| (k, k, w)).collect();
        blocks.push(Block { size, mats, x });
    }

    for (o, strings) in &r.defining {
        let m = o.len() - 1;
        if m == 0 {
            continue;
        }
        for (s, &w) in strings {
            if w.norm() == 0.0 {
                continue;
            }
            let size = m + 1;
            let mut mats = vec![Vec::new(); d];
            for (slot, run) in o.iter().enumerate() {
                if let Some(run) = run {
                    mats[index(run)].push((slot, slot, cr(1.0)));
                }
            }
            for (k, letter) in s.iter().enumerate() {
                mats[index(letter)].push((k, k + 1, cr(1.0)));
            }
            let x = vec![(m, 0, w)];
            blocks.push(Block { size, mats, x });
        }
    }
    if blocks.is_empty() {
        return Err(MpsxError::InvalidInput(
            "family has no weighted terms".into(),
        ));
    }
    let total: usize = blocks.iter().map(|b| b.size).sum();
    let bound = algebraic_bond_bound(r.sigma_inf.len(), r.sigma_f.len(), r.max_m());
    assert!(
        total <= bound,
        "construction exceeded the bond bound: {total} > {bound}"
    );
    let mut mats = vec![CMat::zeros((total, total)); d];
    let mut x = CMat::zeros((total, total));
    let mut off = 0usize;
    for b in &blocks {
        for (y, entries) in b.mats.iter().enumerate() {
            for &(i, j, v) in entries {
                mats[y][(off + i, off + j)] = v;
            }
        }
        for &(i, j, v) in &b.x {
            x[(off + i, off + j)] = v;
        }
        off += b.size;
    }
    MpsX::new(MatrixSet::new(mats)?, x)
}

/// The exponential-law generalization: run symbols carry per-block weights,
/// and letter strings may include bounded occurrences of run symbols.
pub fn span_rls_to_mpsx(r: &SpanRls) -> Result<MpsX> {
    let alphabet = r.alphabet();
    let d = alphabet.len();
    if d == 0 {
        return Err(MpsxError::InvalidInput("empty alphabet".into()));
    }
    let index = |s: &Sym| -> Result<usize> {
        alphabet
            .iter()
            .position(|t| t == s)
            .ok_or_else(|| MpsxError::InvalidInput(format!("unknown symbol {s}")))
    };
    struct Block {
        size: usize,
        mats: Vec<Vec<(usize, usize, C64)>>,
        x: Vec<(usize, usize, C64)>,
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut k_max = 1usize;

    for (run, laws) in &r.m0 {
        if laws.is_empty() {
            continue;
        }
        k_max = k_max.max(laws.len());
        let size = laws.len();
        let mut mats = vec![Vec::new(); d];
        let yi = index(run)?;
        for (j, &(_, lambda)) in laws.iter().enumerate() {
            mats[yi].push((j, j, lambda));
        }
        let x = laws
            .iter()
            .enumerate()
            .map(|(j, &(alpha, _))| (j, j, alpha))
            .collect();
        blocks.push(Block { size, mats, x });
    }

    for ((o, s), laws) in &r.strings {
        let m = o.len() - 1;
        if s.len() != m {
            return Err(MpsxError::InvalidInput(
                "string length does not match the run pattern".into(),
            ));
        }
        k_max = k_max.max(laws.len());
        for &(alpha, ref lambdas) in laws {
            if lambdas.len() != o.len() {
                return Err(MpsxError::InvalidInput(
                    "one run weight per slot is required".into(),
                ));
            }
            let size = m + 1;
            let mut mats = vec![Vec::new(); d];
            for (slot, run) in o.iter().enumerate() {
                if let Some(run) = run {
                    mats[index(run)?].push((slot, slot, lambdas[slot]));
                }
            }
            for (k, letter) in s.iter().enumerate() {
                mats[index(letter)?].push((k, k + 1, cr(1.0)));
            }
            let x = vec![(m, 0, alpha)];
            blocks.push(Block { size, mats, x });
        }
    }
    if blocks.is_empty() {
        return Err(MpsxError::InvalidInput(
            "family has no weighted terms".into(),
        ));
    }
    let total: usize = blocks.iter().map(|b| b.size).sum();
    let m_max = r
        .strings
        .keys()
        .map(|(o, _)| o.len() - 1)
        .max()
        .unwrap_or(0);
    let bound = span_bond_bound(r.sigma_inf.len(), d, m_max, k_max);
    assert!(
        total <= bound,
        "construction exceeded the bond bound: {total} > {bound}"
    );
    let mut mats = vec![CMat::zeros((total, total)); d];
    let mut x = CMat::zeros((total, total));
    let mut off = 0usize;
    for b in &blocks {
        for (y, entries) in b.mats.iter().enumerate() {
            for &(i, j, v) in entries {
                mats[y][(off + i, off + j)] = v;
            }
        }
        for &(i, j, v) in &b.x {
            x[(off + i, off + j)] = v;
        }
        off += b.size;
    }
    MpsX::new(MatrixSet::new(mats)?, x)
}

// ---------------------------------------------------------------------------
// Backbone extraction

/// Reads an algebraic family off a small boundary and the lower tensor of a
/// structured basis: weighted strictly-upper paths through the free labels,
/// closed by the boundary entries.
pub fn extract_backbone(y: &CMat, sb: &StructuredBasis, cfg: &Config) -> Result<AlgebraicRls> {
    let low = sb.a_low();
    let b = sb.partition.n_blocks();
    if y.nrows() != b || y.ncols() != b {
        return Err(MpsxError::DimensionMismatch(
            "boundary size does not match the block count".into(),
        ));
    }
    // table constraints: diagonal labels are 0/1 diagonal matrices, free
    // labels strictly upper
    for (e, l) in sb.labels.iter().enumerate() {
        for (&(i, j), &w) in &sb.k[e] {
            if l.is_free() {
                if i >= j {
                    return Err(MpsxError::InvalidAlow(format!(
                        "free label {} has weight on block ({i},{j})",
                        sb.label_name(e)
                    )));
                }
            } else {
                if i != j {
                    return Err(MpsxError::InvalidAlow(format!(
                        "run label {} has off-diagonal weight",
                        sb.label_name(e)
                    )));
                }
                if (w - cr(1.0)).norm() > 1e-9 {
                    return Err(MpsxError::InvalidAlow(format!(
                        "run label {} has a non-unit diagonal weight",
                        sb.label_name(e)
                    )));
                }
            }
        }
    }
    let mut rls = AlgebraicRls::default();
    let inf_names: Vec<Sym> = sb
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_free())
        .map(|(e, _)| sb.label_name(e))
        .collect();
    let f_names: Vec<(usize, Sym)> = sb
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_free())
        .map(|(e, _)| (e, sb.label_name(e)))
        .collect();
    rls.sigma_inf = inf_names.clone();
    rls.sigma_f = f_names.iter().map(|(_, n)| n.clone()).collect();
    let class_name = |block: usize| -> OSym {
        sb.class_of_block[block].map(|e| sb.label_name(e))
    };
    for (e, name) in &f_names {
        let l = &sb.labels[*e];
        let left = match l.sector.0 {
            crate::block_structure::ClassLabel::Inf(c) => Some(sb.label_name(c)),
            crate::block_structure::ClassLabel::Eps => None,
        };
        let right = match l.sector.1 {
            crate::block_structure::ClassLabel::Inf(c) => Some(sb.label_name(c)),
            crate::block_structure::ClassLabel::Eps => None,
        };
        rls.sectors.insert(name.clone(), (left, right));
    }
    // size-zero terms: trace of the boundary over each class
    for (e, l) in sb.labels.iter().enumerate() {
        if l.is_free() {
            continue;
        }
        let mut w = cr(0.0);
        for j in 0..b {
            if sb.class_of_block[j] == Some(e) {
                w += y[(j, j)];
            }
        }
        if w.norm() > 0.0 {
            rls.add_weight(vec![Some(sb.label_name(e))], Vec::new(), w);
        }
    }
    // weighted paths through the free labels
    struct Path {
        at: usize,
        letters: Vec<Sym>,
        blocks: Vec<usize>,
        weight: C64,
    }
    let mut stack: Vec<Path> = (0..b)
        .map(|j| Path {
            at: j,
            letters: Vec::new(),
            blocks: vec![j],
            weight: cr(1.0),
        })
        .collect();
    while let Some(p) = stack.pop() {
        if !p.letters.is_empty() {
            let close = y[(p.at, p.blocks[0])];
            if close.norm() > 0.0 {
                let o: Vec<OSym> = p.blocks.iter().map(|&j| class_name(j)).collect();
                rls.add_weight(o, p.letters.clone(), p.weight * close);
            }
        }
        for (e, name) in &f_names {
            for next in p.at + 1..b {
                let w = sb.k[*e].get(&(p.at, next)).copied().unwrap_or(cr(0.0));
                if w.norm() == 0.0 {
                    continue;
                }
                let mut letters = p.letters.clone();
                letters.push(name.clone());
                let mut blocks = p.blocks.clone();
                blocks.push(next);
                stack.push(Path {
                    at: next,
                    letters,
                    blocks,
                    weight: p.weight * w,
                });
            }
        }
    }
    rls.prune(cfg.tol);
    rls.validate()?;
    Ok(rls)
}

// ---------------------------------------------------------------------------
// Coarse-graining invariance

/// A coarse-graining prescription over a named alphabet.
#[derive(Debug, Clone)]
pub struct BlockingTensor {
    pub symbols: Vec<Sym>,
    pub gamma: GammaTensor,
}

impl BlockingTensor {
    pub fn from_basis(sb: &StructuredBasis, gamma: &GammaTensor) -> Self {
        BlockingTensor {
            symbols: (0..sb.labels.len()).map(|e| sb.label_name(e)).collect(),
            gamma: gamma.clone(),
        }
    }
}

/// Whether the family reproduces itself when every `alpha` sites are grouped
/// through the blocking tensor, checked on explicit states of size
/// `alpha * beta` against size `beta`.
pub fn gamma_block_check(
    r: &AlgebraicRls,
    blocking: &BlockingTensor,
    alpha: usize,
    beta: usize,
    cfg: &Config,
) -> Result<bool> {
    if alpha == 0 || beta == 0 {
        return Err(MpsxError::InvalidInput("sizes must be positive".into()));
    }
    let d = blocking.symbols.len();
    let map_sym = |s: &Sym| -> Result<usize> {
        blocking
            .symbols
            .iter()
            .position(|t| t == s)
            .ok_or_else(|| MpsxError::InvalidInput(format!("symbol {s} missing from the blocking")))
    };
    // family alphabet must embed into the blocking alphabet
    let alphabet = r.alphabet();
    let embed: Vec<usize> = alphabet.iter().map(map_sym).collect::<Result<_>>()?;

    let fine_n = alpha * beta;
    let total_fine = d.checked_pow(fine_n as u32).unwrap_or(usize::MAX);
    if total_fine > cfg.amp_cap {
        return Err(MpsxError::CapExceeded {
            what: "coarse graining",
            needed: total_fine,
            cap: cfg.amp_cap,
        });
    }
    // amplitudes over the blocking alphabet
    let expand_family = |n: usize| -> Vec<C64> {
        let amps = r.amplitudes(n);
        let mut out = vec![cr(0.0); d.pow(n as u32)];
        for (word, w) in amps {
            let mut idx = 0usize;
            for s in &word {
                let k = alphabet.iter().position(|t| t == s).unwrap();
                idx = idx * d + embed[k];
            }
            out[idx] += w;
        }
        out
    };
    let fine_expected = expand_family(fine_n);
    let coarse = expand_family(beta);

    // expansion matrix for a block of alpha sites: G[w, j] is the weight of
    // the fine word w in the expansion of the coarse letter j, assembled by
    // peeling one site at a time through the pair rule
    let mut g_l = CMat::zeros((d, d));
    for j in 0..d {
        g_l[(j, j)] = cr(1.0);
    }
    for _ in 1..alpha {
        let rows = g_l.nrows() * d;
        let mut next = CMat::zeros((rows, d));
        for w in 0..g_l.nrows() {
            for last in 0..d {
                for j in 0..d {
                    let mut acc = cr(0.0);
                    for mid in 0..d {
                        acc += g_l[(w, mid)] * blocking.gamma.get(mid, last, j);
                    }
                    next[(w * d + last, j)] = acc;
                }
            }
        }
        g_l = next;
    }

    // the coarse member expanded block by block must reproduce the fine one
    let mut computed_fine = vec![cr(0.0); total_fine];
    for (wc, &a) in coarse.iter().enumerate() {
        if a.norm() == 0.0 {
            continue;
        }
        let mut letters = vec![0usize; beta];
        let mut idx = wc;
        for k in (0..beta).rev() {
            letters[k] = idx % d;
            idx /= d;
        }
        fn assign(
            k: usize,
            beta: usize,
            acc: C64,
            idx: usize,
            letters: &[usize],
            g_l: &CMat,
            fine_block: usize,
            out: &mut [C64],
        ) {
            if k == beta {
                out[idx] += acc;
                return;
            }
            for w in 0..fine_block {
                let coef = g_l[(w, letters[k])];
                if coef.norm() == 0.0 {
                    continue;
                }
                assign(
                    k + 1,
                    beta,
                    acc * coef,
                    idx * fine_block + w,
                    letters,
                    g_l,
                    fine_block,
                    out,
                );
            }
        }
        let fine_block = d.pow(alpha as u32);
        assign(0, beta, a, 0, &letters, &g_l, fine_block, &mut computed_fine);
    }
    let scale = fine_expected
        .iter()
        .chain(computed_fine.iter())
        .map(|a| a.norm())
        .fold(0.0, f64::max)
        .max(1e-300);
    let ok = computed_fine
        .iter()
        .zip(fine_expected.iter())
        .all(|(a, b)| (a - b).norm() <= 1e-8 * scale);
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{c, vec_norm, vec_of};

    fn cfg() -> Config {
        Config::default()
    }

    #[test]
    fn parse_w_state() {
        let r = parse_rls("|0* 1 0*>").unwrap();
        assert_eq!(r.sigma_inf, vec!["0"]);
        assert_eq!(r.sigma_f, vec!["1"]);
        assert_eq!(
            r.sectors["1"],
            (Some("0".to_string()), Some("0".to_string()))
        );
        let amps = r.amplitudes(3);
        assert_eq!(amps.len(), 3);
    }

    #[test]
    fn parse_weighted_sum() {
        let r = parse_rls("2*|0*> + 0.5*S1|0* f 0*>(|1>)").unwrap();
        let amps = r.amplitudes(2);
        let all0: Vec<Sym> = vec!["0".into(), "0".into()];
        assert!((amps[&all0] - cr(2.0)).norm() < 1e-12);
        let w10: Vec<Sym> = vec!["1".into(), "0".into()];
        assert!((amps[&w10] - cr(0.5)).norm() < 1e-12);
    }

    #[test]
    fn parse_complex_weight() {
        let r = parse_rls("1+2i*|0*>").unwrap();
        let amps = r.amplitudes(1);
        let key: Vec<Sym> = vec!["0".into()];
        assert!((amps[&key] - c(1.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn parse_two_letter_substitution() {
        let r = parse_rls("S2|0* f 1* f 0*>(0.25*|2 4> + 0.75*|3 4>)").unwrap();
        assert_eq!(r.sigma_inf, vec!["0", "1"]);
        assert_eq!(r.sigma_f, vec!["2", "3", "4"]);
        assert_eq!(
            r.sectors["2"],
            (Some("0".to_string()), Some("1".to_string()))
        );
        assert_eq!(
            r.sectors["4"],
            (Some("1".to_string()), Some("0".to_string()))
        );
    }

    #[test]
    fn sector_conflict_is_detected() {
        // 2 appears both between 0-runs and between 1-runs
        let err = parse_rls("|0* 2 0*> + |1* 2 1*>").unwrap_err();
        assert!(matches!(err, MpsxError::SectorConflict { .. }));
    }

    #[test]
    fn run_letter_conflict_is_detected() {
        let err = parse_rls("|0* 1 0*> + |1*>").unwrap_err();
        assert!(matches!(err, MpsxError::SectorConflict { .. }));
    }

    #[test]
    fn w_state_construction_matches_amplitudes() {
        let r = parse_rls("|0* 1 0*>").unwrap();
        let m = rls_to_mpsx(&r).unwrap();
        assert_eq!(m.dim(), 2);
        for n in 1..=8 {
            let amps = generate_state(&m, n, &cfg()).unwrap();
            let expected = r.amplitudes(n);
            for (w, a) in amps.iter().enumerate() {
                let mut word = Vec::new();
                let mut idx = w;
                for _ in 0..n {
                    word.push(idx % 2);
                    idx /= 2;
                }
                word.reverse();
                let syms: Vec<Sym> = word
                    .iter()
                    .map(|&k| r.alphabet()[k].clone())
                    .collect();
                let e = expected.get(&syms).copied().unwrap_or(cr(0.0));
                assert!((a - e).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn ghz_construction_is_one_dimensional_per_branch() {
        let r = parse_rls("|0*> + |1*>").unwrap();
        let m = rls_to_mpsx(&r).unwrap();
        assert_eq!(m.dim(), 2);
        let amps = generate_state(&m, 3, &cfg()).unwrap();
        assert_eq!(
            amps.iter().filter(|a| a.norm() > 0.5).count(),
            2
        );
    }

    #[test]
    fn single_run_trivial_family() {
        let r = parse_rls("|0*>").unwrap();
        let m = rls_to_mpsx(&r).unwrap();
        assert_eq!(m.dim(), 1);
        for n in 1..=5 {
            let amps = generate_state(&m, n, &cfg()).unwrap();
            assert!((amps[0] - cr(1.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn appendix_two_letter_construction_layout() {
        // substitution family over runs 0, 1 with letters 2, 3 between them
        // and 4 on the way back: the printed pair of 3x3 blocks
        let r = parse_rls("S2|0* f 1* f 0*>(0.25*|2 4> + 0.75*|3 4>)").unwrap();
        let m = rls_to_mpsx(&r).unwrap();
        assert_eq!(m.dim(), 6);
        let expect = |entries: &[(usize, usize, f64)]| {
            let mut out = CMat::zeros((6, 6));
            for &(i, j, v) in entries {
                out[(i, j)] = cr(v);
            }
            out
        };
        let a0 = expect(&[(0, 0, 1.0), (2, 2, 1.0), (3, 3, 1.0), (5, 5, 1.0)]);
        let a1 = expect(&[(1, 1, 1.0), (4, 4, 1.0)]);
        let a2 = expect(&[(0, 1, 1.0)]);
        let a3 = expect(&[(3, 4, 1.0)]);
        let a4 = expect(&[(1, 2, 1.0), (4, 5, 1.0)]);
        let x = expect(&[(2, 0, 0.25), (5, 3, 0.75)]);
        for (got, want) in m.tensor.mats.iter().zip([a0, a1, a2, a3, a4].iter()) {
            assert!(vec_norm(&(&vec_of(got) - &vec_of(want))) < 1e-12);
        }
        assert!(vec_norm(&(&vec_of(&m.boundary) - &vec_of(&x))) < 1e-12);
    }

    #[test]
    fn span_family_with_phase_law() {
        // weights e^{i sqrt(2) pi n1} on |0^n0 1 0^n1>: the 2x2 matrices
        let phase = c(
            ((2.0f64).sqrt() * std::f64::consts::PI).cos(),
            ((2.0f64).sqrt() * std::f64::consts::PI).sin(),
        );
        let mut r = SpanRls {
            sigma_inf: vec!["0".into()],
            sigma_f: vec!["1".into()],
            ..Default::default()
        };
        r.strings.insert(
            (
                vec![Some("0".into()), Some("0".into())],
                vec!["1".into()],
            ),
            vec![(cr(1.0), vec![cr(1.0), phase])],
        );
        let m = span_rls_to_mpsx(&r).unwrap();
        assert_eq!(m.dim(), 2);
        assert!((m.tensor.mats[0][(0, 0)] - cr(1.0)).norm() < 1e-12);
        assert!((m.tensor.mats[0][(1, 1)] - phase).norm() < 1e-12);
        assert!((m.tensor.mats[1][(0, 1)] - cr(1.0)).norm() < 1e-12);
        assert!((m.boundary[(1, 0)] - cr(1.0)).norm() < 1e-12);
        // amplitudes carry the phase law
        let amps = generate_state(&m, 3, &cfg()).unwrap();
        assert!((amps[0b001] - cr(1.0)).norm() < 1e-12);
        assert!((amps[0b010] - phase).norm() < 1e-12);
        assert!((amps[0b100] - phase * phase).norm() < 1e-12);
    }

    #[test]
    fn span_family_with_bounded_run_letter() {
        // sum over |0^n0 0 0^n1 1 0^n2| with defining string "01": the 3x3
        // construction with a bounded extra zero
        let mut r = SpanRls {
            sigma_inf: vec!["0".into()],
            sigma_f: vec!["1".into()],
            ..Default::default()
        };
        r.strings.insert(
            (
                vec![Some("0".into()), Some("0".into()), Some("0".into())],
                vec!["0".into(), "1".into()],
            ),
            vec![(cr(1.0), vec![cr(1.0); 3])],
        );
        let m = span_rls_to_mpsx(&r).unwrap();
        assert_eq!(m.dim(), 3);
        let a0 = &m.tensor.mats[0];
        assert!((a0[(0, 0)] - cr(1.0)).norm() < 1e-12);
        assert!((a0[(0, 1)] - cr(1.0)).norm() < 1e-12);
        assert!((a0[(1, 1)] - cr(1.0)).norm() < 1e-12);
        assert!((a0[(2, 2)] - cr(1.0)).norm() < 1e-12);
        let a1 = &m.tensor.mats[1];
        assert!((a1[(1, 2)] - cr(1.0)).norm() < 1e-12);
        assert!((m.boundary[(2, 0)] - cr(1.0)).norm() < 1e-12);
        // brute-force amplitude check: amp(w) = number of ways to read w as
        // 0^a 0 0^b 1 0^c
        for n in 2..=7 {
            let amps = generate_state(&m, n, &cfg()).unwrap();
            for (w, a) in amps.iter().enumerate() {
                let mut word = Vec::new();
                let mut idx = w;
                for _ in 0..n {
                    word.push(idx % 2);
                    idx /= 2;
                }
                word.reverse();
                let ones: Vec<usize> = word
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == 1)
                    .map(|(i, _)| i)
                    .collect();
                let expected = if ones.len() == 1 && ones[0] >= 1 {
                    cr(ones[0] as f64)
                } else {
                    cr(0.0)
                };
                assert!((a - expected).norm() < 1e-10, "n {n} word {word:?}");
            }
        }
    }

    #[test]
    fn constant_law_agrees_with_algebraic_construction() {
        let r = parse_rls("|0* 1 0*> + 0.3*|0*>").unwrap();
        let ma = rls_to_mpsx(&r).unwrap();
        let ms = span_rls_to_mpsx(&SpanRls::constant(&r)).unwrap();
        for n in 1..=6 {
            let a = generate_state(&ma, n, &cfg()).unwrap();
            let b = generate_state(&ms, n, &cfg()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn pretty_round_trips_through_the_parser() {
        let r = parse_rls("0.5*|0*> + S1|0* f 0*>(2*|4>) + S2|0* f 1* f 0*>(|2 3>)").unwrap();
        let text = r.pretty();
        let r2 = parse_rls(&text).unwrap();
        for n in 1..=6 {
            let a = r.amplitudes(n);
            let b = r2.amplitudes(n);
            assert_eq!(a.len(), b.len());
            for (k, v) in &a {
                assert!((b[k] - v).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_run_pattern() {
        // adjacent letters with no run in between
        let r = parse_rls("S2|0* f f 0*>(|1 2>)").unwrap();
        let amps = r.amplitudes(2);
        let key: Vec<Sym> = vec!["1".into(), "2".into()];
        assert!((amps[&key] - cr(1.0)).norm() < 1e-12);
        let m = rls_to_mpsx(&r).unwrap();
        for n in 2..=6 {
            let got = generate_state(&m, n, &cfg()).unwrap();
            let expected = r.amplitudes(n);
            let d = r.alphabet_size();
            for (w, a) in got.iter().enumerate() {
                let mut word = Vec::new();
                let mut idx = w;
                for _ in 0..n {
                    word.push(idx % d);
                    idx /= d;
                }
                word.reverse();
                let syms: Vec<Sym> = word.iter().map(|&k| r.alphabet()[k].clone()).collect();
                let e = expected.get(&syms).copied().unwrap_or(cr(0.0));
                assert!((a - e).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn blocking_invariance_of_single_letter_family() {
        // |0*10*| with pair rule 0 -> 00, 1 -> 01 + 10
        let r = parse_rls("|0* 1 0*>").unwrap();
        let mut gamma = GammaTensor {
            n: 2,
            entries: Default::default(),
        };
        gamma.entries.insert((0, 0, 0), cr(1.0));
        gamma.entries.insert((0, 1, 1), cr(1.0));
        gamma.entries.insert((1, 0, 1), cr(1.0));
        let blocking = BlockingTensor {
            symbols: vec!["0".into(), "1".into()],
            gamma,
        };
        for alpha in 1..=3 {
            for beta in 1..=3 {
                assert!(
                    gamma_block_check(&r, &blocking, alpha, beta, &cfg()).unwrap(),
                    "alpha {alpha} beta {beta}"
                );
            }
        }
    }

    #[test]
    fn two_letter_family_is_not_invariant() {
        let r = parse_rls("|0* 1 0* 1 0*>").unwrap();
        let mut gamma = GammaTensor {
            n: 2,
            entries: Default::default(),
        };
        gamma.entries.insert((0, 0, 0), cr(1.0));
        gamma.entries.insert((0, 1, 1), cr(1.0));
        gamma.entries.insert((1, 0, 1), cr(1.0));
        let blocking = BlockingTensor {
            symbols: vec!["0".into(), "1".into()],
            gamma,
        };
        assert!(!gamma_block_check(&r, &blocking, 2, 3, &cfg()).unwrap());
        assert!(!gamma_block_check(&r, &blocking, 2, 2, &cfg()).unwrap());
    }

    #[test]
    fn completed_family_regains_invariance() {
        // |0*10*10*> + |0*20*> with the three-symbol rule including
        // 2 -> 11 + 02 + 20
        let r = parse_rls("|0* 1 0* 1 0*> + |0* 2 0*>").unwrap();
        let mut gamma = GammaTensor {
            n: 3,
            entries: Default::default(),
        };
        gamma.entries.insert((0, 0, 0), cr(1.0));
        gamma.entries.insert((0, 1, 1), cr(1.0));
        gamma.entries.insert((1, 0, 1), cr(1.0));
        gamma.entries.insert((1, 1, 2), cr(1.0));
        gamma.entries.insert((0, 2, 2), cr(1.0));
        gamma.entries.insert((2, 0, 2), cr(1.0));
        let blocking = BlockingTensor {
            symbols: vec!["0".into(), "1".into(), "2".into()],
            gamma,
        };
        for alpha in 1..=3 {
            for beta in 1..=3 {
                assert!(
                    gamma_block_check(&r, &blocking, alpha, beta, &cfg()).unwrap(),
                    "alpha {alpha} beta {beta}"
                );
            }
        }
    }

    #[test]
    fn blocking_order_independence() {
        // blocking by 2 then 2 equals blocking by 4 directly
        let r = parse_rls("|0* 1 0*>").unwrap();
        let mut gamma = GammaTensor {
            n: 2,
            entries: Default::default(),
        };
        gamma.entries.insert((0, 0, 0), cr(1.0));
        gamma.entries.insert((0, 1, 1), cr(1.0));
        gamma.entries.insert((1, 0, 1), cr(1.0));
        let blocking = BlockingTensor {
            symbols: vec!["0".into(), "1".into()],
            gamma,
        };
        assert!(gamma_block_check(&r, &blocking, 4, 2, &cfg()).unwrap());
        assert!(gamma_block_check(&r, &blocking, 2, 2, &cfg()).unwrap());
    }
}
